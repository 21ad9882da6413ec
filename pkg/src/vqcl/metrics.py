"""Classification metrics and continual-learning summaries.

The attack class (y = 1) is the positive class everywhere.  Zero-denominator
conventions are fixed: precision, recall, and F1 fall back to 0 when their
denominators vanish.  Continual summaries are computed from a task-performance
matrix R[t][k] (performance on task k after training through task t) whose
lower triangle must be complete; the one-step-ahead entries R[k-1][k] hold
pre-training performance for forward transfer.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(y_true: np.ndarray, y_pred: np.ndarray) -> ConfusionCounts:
    y_true = np.asarray(y_true).astype(int)
    y_pred = np.asarray(y_pred).astype(int)
    return ConfusionCounts(
        tp=int(np.sum((y_true == 1) & (y_pred == 1))),
        fp=int(np.sum((y_true == 0) & (y_pred == 1))),
        fn=int(np.sum((y_true == 1) & (y_pred == 0))),
        tn=int(np.sum((y_true == 0) & (y_pred == 0))),
    )


def attack_prf(counts: ConfusionCounts) -> tuple[float, float, float]:
    """(precision, recall, F1) for the attack-positive class."""
    precision = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    recall = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    f1 = (
        2.0 * precision * recall / (precision + recall)
        if precision + recall
        else 0.0
    )
    return precision, recall, f1


def f1_macro(y_pred: np.ndarray, y_true: np.ndarray) -> float:
    """Unweighted mean of per-class F1 (class 0 scored with 0 as positive)."""
    y_pred = np.asarray(y_pred).astype(int)
    y_true = np.asarray(y_true).astype(int)
    _, _, f1_pos = attack_prf(confusion(y_true, y_pred))
    _, _, f1_neg = attack_prf(confusion(1 - y_true, 1 - y_pred))
    return 0.5 * (f1_pos + f1_neg)


def f1_weighted(y_pred: np.ndarray, y_true: np.ndarray) -> float:
    y_pred = np.asarray(y_pred).astype(int)
    y_true = np.asarray(y_true).astype(int)
    n = y_true.size
    _, _, f1_pos = attack_prf(confusion(y_true, y_pred))
    _, _, f1_neg = attack_prf(confusion(1 - y_true, 1 - y_pred))
    n1 = int(np.sum(y_true == 1))
    return (n1 * f1_pos + (n - n1) * f1_neg) / n


def accuracy(y_pred: np.ndarray, y_true: np.ndarray) -> float:
    y_pred = np.asarray(y_pred).astype(int)
    y_true = np.asarray(y_true).astype(int)
    return float(np.mean(y_pred == y_true))


def roc_auc(scores: np.ndarray, y_true: np.ndarray) -> float:
    """Trapezoidal area under the ROC curve over score-sorted thresholds.

    Returns NaN for single-class inputs.
    """
    scores = np.asarray(scores, dtype=float)
    y_true = np.asarray(y_true).astype(int)
    n_pos = int(np.sum(y_true == 1))
    n_neg = y_true.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    sorted_y = y_true[order]
    sorted_s = scores[order]
    tps = np.cumsum(sorted_y == 1)
    fps = np.cumsum(sorted_y == 0)
    # keep one operating point per distinct score (handles ties)
    distinct = np.r_[np.flatnonzero(np.diff(sorted_s)), sorted_y.size - 1]
    tpr = np.r_[0.0, tps[distinct] / n_pos]
    fpr = np.r_[0.0, fps[distinct] / n_neg]
    return float(np.trapezoid(tpr, fpr))


# ---------------------------------------------------------------------------
# Task-performance matrix and continual-learning summaries.
# ---------------------------------------------------------------------------


@dataclass
class RMatrix:
    """R[t][k] accumulator; entries are written exactly once."""

    num_tasks: int
    values: np.ndarray = field(default=None)
    baseline: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.values is None:
            self.values = np.full((self.num_tasks, self.num_tasks), np.nan)
        if self.baseline is None:
            self.baseline = np.full(self.num_tasks, np.nan)

    def set_entry(self, t: int, k: int, value: float) -> None:
        if not (0 <= t < self.num_tasks and 0 <= k < self.num_tasks):
            raise IndexError(f"entry ({t}, {k}) out of range")
        if k > t + 1:
            raise ValueError(
                f"R[{t}][{k}] is never evaluated (only k <= t and the k = t + 1 pre-training entry)"
            )
        if not np.isnan(self.values[t, k]):
            raise ValueError(f"R[{t}][{k}] already written")
        self.values[t, k] = value

    def entry(self, t: int, k: int) -> float:
        return float(self.values[t, k])

    def lower_triangle_complete(self) -> bool:
        t_idx, k_idx = np.tril_indices(self.num_tasks)
        return not np.any(np.isnan(self.values[t_idx, k_idx]))

    def to_csv(self) -> str:
        """Stable text form: repr floats, empty cells for absent entries."""
        buf = io.StringIO()
        header = ",".join(["after_task"] + [f"task_{k}" for k in range(self.num_tasks)])
        buf.write(header + "\n")
        for t in range(self.num_tasks):
            cells = [str(t)]
            for k in range(self.num_tasks):
                v = self.values[t, k]
                cells.append("" if np.isnan(v) else repr(float(v)))
            buf.write(",".join(cells) + "\n")
        cells = ["baseline"]
        for k in range(self.num_tasks):
            v = self.baseline[k]
            cells.append("" if np.isnan(v) else repr(float(v)))
        buf.write(",".join(cells) + "\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "RMatrix":
        lines = [ln for ln in text.strip().splitlines()]
        header = lines[0].split(",")
        num_tasks = len(header) - 1
        rm = cls(num_tasks)
        for line in lines[1:]:
            cells = line.split(",")
            row = cells[0]
            vals = [float(c) if c else np.nan for c in cells[1:]]
            if row == "baseline":
                rm.baseline = np.array(vals)
            else:
                rm.values[int(row)] = np.array(vals)
        return rm


def _require_cl(r: RMatrix) -> None:
    if r.num_tasks < 2:
        raise ValueError("continual-learning summaries require at least 2 tasks")
    if not r.lower_triangle_complete():
        raise ValueError("R-matrix lower triangle is incomplete")


def forgetting(r: RMatrix) -> float:
    """Mean over earlier tasks of (best-ever performance - final performance)."""
    _require_cl(r)
    T = r.num_tasks
    drops = [
        np.max(r.values[k:T, k]) - r.values[T - 1, k] for k in range(T - 1)
    ]
    return float(np.mean(drops))


def bwt(r: RMatrix) -> float:
    """Mean signed change on past tasks between learning them and the end."""
    _require_cl(r)
    T = r.num_tasks
    deltas = [r.values[T - 1, k] - r.values[k, k] for k in range(T - 1)]
    return float(np.mean(deltas))


def fwt(r: RMatrix) -> float:
    """Mean pre-training performance on future tasks above the init baseline."""
    _require_cl(r)
    T = r.num_tasks
    terms = []
    for k in range(1, T):
        pre = r.values[k - 1, k]
        if np.isnan(pre) or np.isnan(r.baseline[k]):
            raise ValueError(f"missing pre-training entry or baseline for task {k}")
        terms.append(pre - r.baseline[k])
    return float(np.mean(terms))


def intransigence(r: RMatrix, oracle: np.ndarray) -> float:
    """Mean oracle-minus-diagonal shortfall (negative when the stream model
    beats the per-task oracle)."""
    oracle = np.asarray(oracle, dtype=float)
    if oracle.size != r.num_tasks:
        raise ValueError("oracle vector length must match the task count")
    diag = np.diag(r.values)
    if np.any(np.isnan(diag)):
        raise ValueError("R-matrix diagonal is incomplete")
    return float(np.mean(oracle - diag))


def mean_final(r: RMatrix) -> float:
    """Mean performance across all tasks under the final model."""
    final = r.values[r.num_tasks - 1, : r.num_tasks]
    if np.any(np.isnan(final)):
        raise ValueError("final row is incomplete")
    return float(np.mean(final))
