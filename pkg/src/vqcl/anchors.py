"""Anchor-based stability regularization for continual training.

Keeps a compact per-task memory (anchor inputs, frozen parameter snapshot,
snapshot outputs, diagonal sensitivity estimates) and turns it into a penalty
with two parts: a sensitivity-weighted quadratic on parameter drift and a
bounded fidelity-proxy term on output drift over anchor sub-samples.

The regularized "scalar output" is the model's pre-sigmoid readout score.
Sensitivities from multiple completed tasks are consolidated by summing the
diagonal vectors and anchoring the quadratic at the most recent snapshot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ANCHOR_STRATEGIES = ("state-space", "gradient-space", "random")
DRIFT_KINDS = ("fidelity", "mse", "kl")


@dataclass
class QfishConfig:
    lambda_qfi: float = 0.3
    lambda_fid: float = 0.1
    eps: float = 1e-2            # finite-difference step for sensitivity
    anchor_budget: int = 64
    anchor_strategy: str = "state-space"
    qfi_batch: int = 32          # anchors used when estimating sensitivities
    fid_batch: int = 32          # per-step anchor sub-sample for the drift term
    drift_kind: str = "fidelity"  # or "mse" / "kl" behavioral alternative

    def __post_init__(self):
        if self.lambda_qfi < 0 or self.lambda_fid < 0:
            raise ValueError("penalty weights must be >= 0")
        if not (0.0 < self.eps <= 0.5):
            raise ValueError("eps must be in (0, 0.5]")
        if self.anchor_budget < 1 or self.qfi_batch < 1 or self.fid_batch < 1:
            raise ValueError("budgets must be >= 1")
        if self.anchor_strategy not in ANCHOR_STRATEGIES:
            raise ValueError(f"unknown anchor strategy {self.anchor_strategy!r}")
        if self.drift_kind not in DRIFT_KINDS:
            raise ValueError(f"unknown drift kind {self.drift_kind!r}")


@dataclass
class TaskAnchorRecord:
    """Frozen memory for one completed task."""

    task_id: int
    inputs: np.ndarray            # (n, d) post-preprocessing feature vectors
    snapshot_params: np.ndarray   # flat parameter vector at the task boundary
    snapshot_scores: np.ndarray   # pre-sigmoid scores of the snapshot on inputs
    fisher: np.ndarray            # diagonal sensitivity estimates, length P

    def __post_init__(self):
        if np.any(self.fisher < 0):
            raise ValueError("sensitivities must be nonnegative")
        if not np.all(np.isfinite(self.snapshot_scores)):
            raise ValueError("snapshot outputs must be finite")


@dataclass
class AnchorMemory:
    records: list[TaskAnchorRecord] = field(default_factory=list)

    def __bool__(self) -> bool:
        return bool(self.records)

    @property
    def total_anchors(self) -> int:
        return sum(r.inputs.shape[0] for r in self.records)

    def add(self, record: TaskAnchorRecord) -> None:
        self.records.append(record)

    def consolidated_fisher(self) -> np.ndarray:
        return np.sum([r.fisher for r in self.records], axis=0)

    def reference_params(self) -> np.ndarray:
        return self.records[-1].snapshot_params

    def stacked_inputs(self) -> np.ndarray:
        return np.vstack([r.inputs for r in self.records])

    def stacked_scores(self) -> np.ndarray:
        return np.concatenate([r.snapshot_scores for r in self.records])

    def to_doc(self) -> list[dict]:
        return [
            {
                "task_id": r.task_id,
                "inputs": r.inputs.tolist(),
                "snapshot_params": r.snapshot_params.tolist(),
                "snapshot_scores": r.snapshot_scores.tolist(),
                "fisher": r.fisher.tolist(),
            }
            for r in self.records
        ]

    @classmethod
    def from_doc(cls, doc: list[dict]) -> "AnchorMemory":
        mem = cls()
        for d in doc:
            mem.add(
                TaskAnchorRecord(
                    task_id=int(d["task_id"]),
                    inputs=np.asarray(d["inputs"], dtype=float),
                    snapshot_params=np.asarray(d["snapshot_params"], dtype=float),
                    snapshot_scores=np.asarray(d["snapshot_scores"], dtype=float),
                    fisher=np.asarray(d["fisher"], dtype=float),
                )
            )
        return mem


def estimate_sensitivity(
    score_fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
    theta: np.ndarray,
    inputs: np.ndarray,
    eps: float,
) -> np.ndarray:
    """Diagonal sensitivity: mean over anchors of squared central differences.

    ``score_fn(theta, inputs)`` must return the scalar model output for every
    anchor row.  Deterministic in exact-expectation mode.
    """
    if eps <= 0.0:
        raise ValueError("eps must be > 0")
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    if inputs.shape[0] == 0:
        raise ValueError("anchor set is empty")
    theta = np.asarray(theta, dtype=float)
    fisher = np.empty(theta.size)
    for i in range(theta.size):
        plus = theta.copy()
        minus = theta.copy()
        plus[i] += eps
        minus[i] -= eps
        diff = (np.asarray(score_fn(plus, inputs)) - np.asarray(score_fn(minus, inputs))) / (
            2.0 * eps
        )
        fisher[i] = float(np.mean(np.square(diff)))
    return fisher


def fidelity_proxy(f_current: np.ndarray | float, f_snapshot: np.ndarray | float):
    """Bounded behavioral-consistency score: clip(1 - (f - f*)^2 / 2, 0, 1)."""
    return np.clip(1.0 - 0.5 * (np.asarray(f_current) - np.asarray(f_snapshot)) ** 2, 0.0, 1.0)


def output_drift(current: np.ndarray, snapshot: np.ndarray, kind: str) -> float:
    """Mean anchor-output discrepancy: squared error or Bernoulli KL.

    ``kl`` requires both arrays to be probabilities in (0, 1).
    """
    current = np.asarray(current, dtype=float)
    snapshot = np.asarray(snapshot, dtype=float)
    if kind == "mse":
        return float(np.mean((current - snapshot) ** 2))
    if kind == "kl":
        for arr in (current, snapshot):
            if np.any(arr <= 0.0) or np.any(arr >= 1.0):
                raise ValueError("kl drift requires probability outputs in (0, 1)")
        return float(
            np.mean(
                current * np.log(current / snapshot)
                + (1.0 - current) * np.log((1.0 - current) / (1.0 - snapshot))
            )
        )
    raise ValueError(f"unknown drift kind {kind!r}")


def regularizer(
    flat_params: np.ndarray,
    memory: AnchorMemory,
    cfg: QfishConfig,
    score_fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
    rng: np.random.Generator | None = None,
    *,
    prob_fn: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
) -> float:
    """Combined stability penalty; 0 before the first task boundary.

    When ``rng`` is given and the memory holds more than ``fid_batch`` anchors,
    the drift term is evaluated on a fresh uniform sub-sample; otherwise on all
    stored anchors.  With ``drift_kind = "kl"`` the drift is computed on
    probabilities via ``prob_fn``.
    """
    if not memory:
        return 0.0
    flat_params = np.asarray(flat_params, dtype=float)
    total = 0.0
    if cfg.lambda_qfi > 0.0:
        delta = flat_params - memory.reference_params()
        total += cfg.lambda_qfi * float(np.sum(memory.consolidated_fisher() * delta**2))
    if cfg.lambda_fid > 0.0:
        inputs = memory.stacked_inputs()
        stored = memory.stacked_scores()
        if rng is not None and inputs.shape[0] > cfg.fid_batch:
            idx = rng.choice(inputs.shape[0], size=cfg.fid_batch, replace=False)
            inputs, stored = inputs[idx], stored[idx]
        if cfg.drift_kind == "fidelity":
            current = np.asarray(score_fn(flat_params, inputs))
            total += cfg.lambda_fid * float(1.0 - np.mean(fidelity_proxy(current, stored)))
        else:
            total += cfg.lambda_fid * behavioral_consistency(
                flat_params, memory, cfg.drift_kind, score_fn,
                prob_fn=prob_fn, inputs=inputs, stored=stored,
            )
    return total


def behavioral_consistency(
    flat_params: np.ndarray,
    memory: AnchorMemory,
    kind: str,
    score_fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
    *,
    prob_fn: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
    inputs: np.ndarray | None = None,
    stored: np.ndarray | None = None,
) -> float:
    """Mean output drift on anchors; selectable alternative to the fidelity term."""
    if not memory:
        raise ValueError("anchor memory is empty")
    if inputs is None:
        inputs = memory.stacked_inputs()
        stored = memory.stacked_scores()
    if kind == "kl":
        if prob_fn is None:
            raise ValueError("kl drift requires a probability output function")
        current = np.asarray(prob_fn(flat_params, inputs))
        ref = memory.records[-1]
        tau_star = math.exp(ref.snapshot_params[-1])
        snapshot = 1.0 / (1.0 + np.exp(-np.clip(tau_star * stored, -500, 500)))
        return output_drift(current, snapshot, "kl")
    current = np.asarray(score_fn(flat_params, inputs))
    return output_drift(current, stored, kind)


# ---------------------------------------------------------------------------
# Coreset selection.
# ---------------------------------------------------------------------------


def _greedy_kcenter(emb: np.ndarray, k: int) -> list[int]:
    """Farthest-point coreset; first pick is the point closest to the mean
    (ties toward the lowest index, as does every argmax below)."""
    center = emb.mean(axis=0)
    first = int(np.argmin(np.linalg.norm(emb - center, axis=1)))
    selected = [first]
    min_dist = np.linalg.norm(emb - emb[first], axis=1)
    while len(selected) < k:
        nxt = int(np.argmax(min_dist))
        selected.append(nxt)
        min_dist = np.minimum(min_dist, np.linalg.norm(emb - emb[nxt], axis=1))
    return selected


def _class_budgets(y: np.ndarray, budget: int) -> dict[int, int]:
    """Split the anchor budget across classes, odd slot to the attack class;
    spare capacity flows to the class that still has samples."""
    n = {c: int(np.sum(y == c)) for c in (0, 1)}
    if n[0] == 0 or n[1] == 0:
        present = 0 if n[0] else 1
        return {present: min(budget, n[present])}
    b1 = min(n[1], (budget + 1) // 2)
    b0 = min(n[0], budget - b1)
    spare = budget - b0 - b1
    if spare > 0:
        extra1 = min(spare, n[1] - b1)
        b1 += extra1
        b0 += min(spare - extra1, n[0] - b0)
    return {0: b0, 1: b1}


def select_anchors(
    X: np.ndarray,
    y: np.ndarray,
    budget: int,
    strategy: str,
    *,
    embedding: np.ndarray | None = None,
    seed: int = 0,
) -> np.ndarray:
    """Choose up to ``budget`` class-balanced anchor indices.

    The greedy strategies run farthest-point selection per class in the given
    embedding (conditioned inputs for ``state-space``, per-sample gradient
    sketches for ``gradient-space``); ``random`` draws uniformly without
    replacement.  Returns sorted row indices into ``X``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y)
    if X.shape[0] == 0:
        raise ValueError("cannot select anchors from empty data")
    if strategy not in ANCHOR_STRATEGIES:
        raise ValueError(f"unknown anchor strategy {strategy!r}")
    if budget >= X.shape[0]:
        return np.arange(X.shape[0])
    if strategy != "random":
        if embedding is None:
            embedding = X
        embedding = np.atleast_2d(np.asarray(embedding, dtype=float))
        if embedding.shape[0] != X.shape[0]:
            raise ValueError("embedding must have one row per sample")
    rng = np.random.default_rng(seed)
    chosen: list[int] = []
    for c, b in sorted(_class_budgets(y, budget).items()):
        if b == 0:
            continue
        rows = np.flatnonzero(y == c)
        if strategy == "random":
            chosen.extend(rng.choice(rows, size=b, replace=False))
        else:
            local = _greedy_kcenter(embedding[rows], b)
            chosen.extend(rows[local])
    return np.array(sorted(chosen))
