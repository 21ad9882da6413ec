"""Simultaneous-perturbation stochastic approximation (SPSA).

Two entry points: :func:`spsa_minimize` runs a fixed-iteration optimization
with best-seen tracking (generator fitting), :class:`SpsaStepper` exposes one
update at a time for streaming objectives (classifier training, where every
step sees a fresh mini-batch).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

ALPHA = 0.602
GAMMA = 0.101


def _gain_a(k: int, a: float, stability: float) -> float:
    return a / (k + 1 + stability) ** ALPHA


def _gain_c(k: int, c: float) -> float:
    return c / (k + 1) ** GAMMA


@dataclass
class SpsaResult:
    x_best: np.ndarray
    f_best: float
    x_final: np.ndarray
    trace: list = field(default_factory=list)  # (iteration, exact objective) pairs


def spsa_minimize(
    objective: Callable[[np.ndarray], float],
    x0: np.ndarray,
    max_iters: int,
    seed: int,
    *,
    a: float = 0.2,
    c: float = 0.2,
    stability: float = 30.0,
    eval_every: int = 10,
    exact_objective: Callable[[np.ndarray], float] | None = None,
) -> SpsaResult:
    """Minimize with Rademacher-perturbation SPSA.

    Each iteration costs exactly two ``objective`` evaluations.  Every
    ``eval_every`` iterations (and at the start and end) the iterate is scored
    with ``exact_objective`` (defaults to ``objective``) and the best-seen
    iterate under that score is returned.  Deterministic given ``seed``.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if exact_objective is None:
        exact_objective = objective
    rng = np.random.default_rng(seed)
    x = np.asarray(x0, dtype=float).copy()

    f0 = float(exact_objective(x))
    _check_finite(f0, -1, x)
    best_x, best_f = x.copy(), f0
    trace = [(-1, f0)]

    for k in range(max_iters):
        ck = _gain_c(k, c)
        delta = rng.choice((-1.0, 1.0), size=x.size)
        f_plus = float(objective(x + ck * delta))
        f_minus = float(objective(x - ck * delta))
        _check_finite(f_plus, k, x)
        _check_finite(f_minus, k, x)
        ghat = (f_plus - f_minus) / (2.0 * ck) * delta
        x = x - _gain_a(k, a, stability) * ghat
        if (k + 1) % eval_every == 0 or k == max_iters - 1:
            fk = float(exact_objective(x))
            _check_finite(fk, k, x)
            trace.append((k, fk))
            if fk < best_f:
                best_f, best_x = fk, x.copy()
    return SpsaResult(x_best=best_x, f_best=best_f, x_final=x, trace=trace)


def _check_finite(value: float, iteration: int, x: np.ndarray) -> None:
    if not np.isfinite(value):
        raise RuntimeError(
            f"SPSA objective became non-finite ({value}) at iteration {iteration}; "
            f"parameter inf-norm {np.max(np.abs(x)):.3g}"
        )


class SpsaStepper:
    """One-update-at-a-time SPSA for streaming objectives.

    The gain schedule is fixed by the total step budget; ``stability`` defaults
    to 10% of the budget.  Each :meth:`step` consumes two evaluations of the
    supplied per-step objective.
    """

    def __init__(
        self,
        dim: int,
        total_steps: int,
        seed: int,
        *,
        a: float = 0.1,
        c: float = 0.1,
        stability: float | None = None,
    ):
        self.dim = dim
        self.a = a
        self.c = c
        self.stability = 0.1 * total_steps if stability is None else stability
        self.k = 0
        self.rng = np.random.default_rng(seed)

    def step(self, objective: Callable[[np.ndarray], float], x: np.ndarray) -> np.ndarray:
        ck = _gain_c(self.k, self.c)
        delta = self.rng.choice((-1.0, 1.0), size=self.dim)
        f_plus = float(objective(x + ck * delta))
        f_minus = float(objective(x - ck * delta))
        _check_finite(f_plus, self.k, x)
        _check_finite(f_minus, self.k, x)
        ghat = (f_plus - f_minus) / (2.0 * ck) * delta
        new_x = x - _gain_a(self.k, self.a, self.stability) * ghat
        self.k += 1
        return new_x
