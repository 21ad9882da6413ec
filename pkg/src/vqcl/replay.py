"""Prototype-based generative replay with frozen per-task snapshots.

Each completed task freezes a small conditional generator: a shallow circuit
whose per-qubit <Z> vector is fitted (by SPSA) to the class-mean prototype of
each condition, plus a classical isotropic noise scale.  Replay samples are
the frozen expectation vector plus Gaussian spread, so no raw historical rows
are ever retained.  A classical conditional diagonal-GMM source is provided
as a control.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .optim import spsa_minimize
from .simcore import (
    NOISELESS,
    CircuitSpec,
    NoiseParams,
    batch_z,
    counts_to_z,
    run_circuit,
    sample_counts,
    GateOp,
    QuantumState,
    apply_gate,
)

#: Replay feature vectors are clipped to the preprocessing guard range.
CLIP_RANGE = 1.5

#: <Z> cannot reach +/-1 exactly, so fitting targets are pre-clipped.
PROTO_CLIP = 0.999


def compute_prototypes(X: np.ndarray, y: np.ndarray):
    """Class means and isotropic spread scales (mean per-dim population std)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y)
    out = {}
    for c in (0, 1):
        rows = X[y == c]
        if rows.shape[0] == 0:
            raise ValueError(f"class {c} missing; prototypes need both classes")
        out[c] = (rows.mean(axis=0), float(rows.std(axis=0, ddof=0).mean()))
    return out[0][0], out[1][0], out[0][1], out[1][1]


def generator_expectations(
    spec: CircuitSpec,
    phi: np.ndarray,
    condition: int,
    noise: NoiseParams = NOISELESS,
    *,
    shots: int | None = None,
    seed: int = 0,
) -> np.ndarray:
    """<Z> vector of the conditioned generator circuit.

    The condition is encoded as an RY(pi * c) basis flip on qubit 0 applied
    before the variational layers.
    """
    if condition not in (0, 1):
        raise ValueError("condition must be 0 or 1")
    prep_angle = math.pi * condition
    if shots is None:
        zeros = np.zeros((1, spec.num_qubits))
        return batch_z(spec, phi, zeros, noise, prep=[(0, np.array([prep_angle]))])[0]
    state = QuantumState.zero(spec.num_qubits, mixed=noise.enabled)
    state = apply_gate(state, GateOp("RY", 0, angle=prep_angle), noise)
    for gate in spec.gates(np.asarray(phi, dtype=float), np.zeros(spec.num_qubits)):
        state = apply_gate(state, gate, noise)
    p_ro = noise.p_ro if noise.enabled else 0.0
    counts = sample_counts(state, shots, p_ro=p_ro, rng_seed=seed)
    return counts_to_z(counts, spec.num_qubits)


def prototype_loss(
    spec: CircuitSpec,
    phi: np.ndarray,
    condition: int,
    mu: np.ndarray,
    noise: NoiseParams = NOISELESS,
    *,
    shots: int | None = None,
    seed: int = 0,
) -> float:
    """Squared Euclidean distance between generator expectations and target."""
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (spec.num_qubits,):
        raise ValueError(f"prototype must have dimension {spec.num_qubits}")
    z = generator_expectations(spec, phi, condition, noise, shots=shots, seed=seed)
    return float(np.sum((z - mu) ** 2))


@dataclass
class GeneratorSnapshot:
    """Frozen per-task replay source (quantum prototype generator)."""

    task_id: int
    spec: CircuitSpec
    params: dict[int, np.ndarray]      # per-condition fitted circuit angles
    prototypes: dict[int, np.ndarray]  # clipped fitting targets
    sigmas: dict[int, float]           # isotropic classical spread per condition
    class_counts: dict[int, int]
    frozen: bool = False

    def freeze(self) -> "GeneratorSnapshot":
        for arr in list(self.params.values()) + list(self.prototypes.values()):
            arr.flags.writeable = False
        self.frozen = True
        return self

    def expectations(self, condition: int, noise: NoiseParams = NOISELESS) -> np.ndarray:
        return generator_expectations(self.spec, self.params[condition], condition, noise)

    def sample(self, condition: int, n: int, rng: np.random.Generator) -> np.ndarray:
        if not self.frozen:
            raise ValueError("snapshot must be frozen before sampling")
        if n < 1:
            raise ValueError("sample count must be >= 1")
        center = self.expectations(condition)  # evaluated once, reused for all draws
        noise_draws = rng.standard_normal((n, center.size)) * self.sigmas[condition]
        return np.clip(center + noise_draws, -CLIP_RANGE, CLIP_RANGE)

    def to_doc(self) -> dict:
        return {
            "kind": "quantum",
            "task_id": self.task_id,
            "num_qubits": self.spec.num_qubits,
            "num_layers": self.spec.num_layers,
            "params": {str(c): v.tolist() for c, v in sorted(self.params.items())},
            "prototypes": {str(c): v.tolist() for c, v in sorted(self.prototypes.items())},
            "sigmas": {str(c): v for c, v in sorted(self.sigmas.items())},
            "class_counts": {str(c): v for c, v in sorted(self.class_counts.items())},
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "GeneratorSnapshot":
        snap = cls(
            task_id=int(doc["task_id"]),
            spec=CircuitSpec(doc["num_qubits"], doc["num_layers"]),
            params={int(c): np.asarray(v, dtype=float) for c, v in doc["params"].items()},
            prototypes={int(c): np.asarray(v, dtype=float) for c, v in doc["prototypes"].items()},
            sigmas={int(c): float(v) for c, v in doc["sigmas"].items()},
            class_counts={int(c): int(v) for c, v in doc["class_counts"].items()},
        )
        return snap.freeze()

    def checksum(self) -> str:
        payload = json.dumps(self.to_doc(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()


def synthesize(
    snapshot: GeneratorSnapshot, condition: int, n: int, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` labeled replay samples x = f(c) + N(0, sigma^2 I)."""
    rng = np.random.default_rng(seed)
    X = snapshot.sample(condition, n, rng)
    return X, np.full(n, condition, dtype=int)


def _coordinate_descent(objective, x0: np.ndarray, passes: int = 2, grid: int = 9) -> tuple[np.ndarray, float]:
    angles = np.linspace(-math.pi, math.pi, grid, endpoint=False)
    x = x0.copy()
    best = objective(x)
    for _ in range(passes):
        for i in range(x.size):
            vals = []
            for a in angles:
                trial = x.copy()
                trial[i] = a
                vals.append(objective(trial))
            j = int(np.argmin(vals))
            if vals[j] < best:
                best = vals[j]
                x[i] = angles[j]
    return x, best


def _warm_start(objective, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Coarse coordinate-grid search from a few starts.

    SPSA's decaying gains cannot cross the circuit landscape from an arbitrary
    corner within the fixed iteration budget, so the refinement is seeded with
    a cheap deterministic search (noiseless objective).
    """
    randoms = sorted(
        (rng.uniform(-math.pi, math.pi, dim) for _ in range(16)), key=objective
    )
    starts = [np.zeros(dim), randoms[0], randoms[1]]
    best_x, best_f = None, math.inf
    for s in starts:
        x, f = _coordinate_descent(objective, s)
        if f < best_f:
            best_x, best_f = x, f
    return best_x


def train_generator(
    X: np.ndarray,
    y: np.ndarray,
    task_id: int,
    *,
    num_layers: int = 2,
    noise: NoiseParams = NOISELESS,
    max_iters: int = 300,
    seed: int = 0,
    shots: int | None = None,
) -> GeneratorSnapshot:
    """Fit one conditional prototype generator and freeze it.

    Each condition's parameter vector is optimized separately against its own
    prototype target (the total objective is the sum over conditions).  With
    ``shots`` set the SPSA evaluations are shot-estimated while best-seen
    checkpoints still use exact expectations.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    mu0, mu1, s0, s1 = compute_prototypes(X, y)
    spec = CircuitSpec(X.shape[1], num_layers)
    rng = np.random.default_rng(seed)
    params, protos = {}, {}
    for c, mu in ((0, mu0), (1, mu1)):
        target = np.clip(mu, -PROTO_CLIP, PROTO_CLIP)

        def exact_obj(phi, _c=c, _t=target):
            return prototype_loss(spec, phi, _c, _t, noise)

        def pure_obj(phi, _c=c, _t=target):
            return prototype_loss(spec, phi, _c, _t, NOISELESS)

        phi0 = _warm_start(pure_obj, spec.num_params, rng)

        if shots is None:
            obj = exact_obj
        else:
            shot_seeds = np.random.default_rng(seed + 13 * (c + 1))

            def obj(phi, _c=c, _t=target, _rng=shot_seeds):
                return prototype_loss(
                    spec, phi, _c, _t, noise, shots=shots,
                    seed=int(_rng.integers(2**63)),
                )

        result = spsa_minimize(
            obj, phi0, max_iters, seed=seed + c, exact_objective=exact_obj
        )
        params[c] = result.x_best
        protos[c] = target
    snap = GeneratorSnapshot(
        task_id=task_id,
        spec=spec,
        params=params,
        prototypes=protos,
        sigmas={0: s0, 1: s1},
        class_counts={0: int(np.sum(y == 0)), 1: int(np.sum(y == 1))},
    )
    return snap.freeze()


# ---------------------------------------------------------------------------
# Classical conditional GMM control.
# ---------------------------------------------------------------------------

VAR_FLOOR = 1e-6


def _kmeanspp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [X[rng.integers(X.shape[0])]]
    for _ in range(1, k):
        d2 = np.min(
            [np.sum((X - c) ** 2, axis=1) for c in centers], axis=0
        )
        total = d2.sum()
        if total <= 0:
            centers.append(X[rng.integers(X.shape[0])])
            continue
        centers.append(X[rng.choice(X.shape[0], p=d2 / total)])
    return np.array(centers)


def _fit_diag_gmm(X: np.ndarray, k: int, iters: int, rng: np.random.Generator):
    n, d = X.shape
    if n < k:
        raise ValueError(f"need at least {k} samples per class, got {n}")
    means = _kmeanspp_init(X, k, rng)
    variances = np.tile(np.maximum(X.var(axis=0, ddof=0), VAR_FLOOR), (k, 1))
    weights = np.full(k, 1.0 / k)
    for _ in range(iters):
        # E-step in log space
        log_p = np.empty((n, k))
        for j in range(k):
            log_p[:, j] = (
                math.log(max(weights[j], 1e-300))
                - 0.5 * np.sum(np.log(2.0 * math.pi * variances[j]))
                - 0.5 * np.sum((X - means[j]) ** 2 / variances[j], axis=1)
            )
        m = log_p.max(axis=1, keepdims=True)
        resp = np.exp(log_p - m)
        resp /= resp.sum(axis=1, keepdims=True)
        # M-step
        nk = resp.sum(axis=0) + 1e-12
        weights = nk / nk.sum()
        means = (resp.T @ X) / nk[:, None]
        for j in range(k):
            diff2 = (X - means[j]) ** 2
            variances[j] = np.maximum((resp[:, j] @ diff2) / nk[j], VAR_FLOOR)
    return weights, means, variances


@dataclass
class GmmSnapshot:
    """Frozen per-task classical replay control (diagonal conditional GMM)."""

    task_id: int
    weights: dict[int, np.ndarray]
    means: dict[int, np.ndarray]
    variances: dict[int, np.ndarray]
    class_counts: dict[int, int]
    frozen: bool = False

    def freeze(self) -> "GmmSnapshot":
        for group in (self.weights, self.means, self.variances):
            for arr in group.values():
                arr.flags.writeable = False
        self.frozen = True
        return self

    def sample(self, condition: int, n: int, rng: np.random.Generator) -> np.ndarray:
        if not self.frozen:
            raise ValueError("snapshot must be frozen before sampling")
        comp = rng.choice(self.weights[condition].size, size=n, p=self.weights[condition])
        mu = self.means[condition][comp]
        sd = np.sqrt(self.variances[condition][comp])
        return np.clip(mu + rng.standard_normal(mu.shape) * sd, -CLIP_RANGE, CLIP_RANGE)

    def to_doc(self) -> dict:
        return {
            "kind": "gmm",
            "task_id": self.task_id,
            "weights": {str(c): v.tolist() for c, v in sorted(self.weights.items())},
            "means": {str(c): v.tolist() for c, v in sorted(self.means.items())},
            "variances": {str(c): v.tolist() for c, v in sorted(self.variances.items())},
            "class_counts": {str(c): v for c, v in sorted(self.class_counts.items())},
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "GmmSnapshot":
        snap = cls(
            task_id=int(doc["task_id"]),
            weights={int(c): np.asarray(v, dtype=float) for c, v in doc["weights"].items()},
            means={int(c): np.asarray(v, dtype=float) for c, v in doc["means"].items()},
            variances={int(c): np.asarray(v, dtype=float) for c, v in doc["variances"].items()},
            class_counts={int(c): int(v) for c, v in doc["class_counts"].items()},
        )
        return snap.freeze()

    def checksum(self) -> str:
        payload = json.dumps(self.to_doc(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()


def gmm_fit(
    X: np.ndarray,
    y: np.ndarray,
    task_id: int,
    *,
    components: int = 3,
    iters: int = 100,
    seed: int = 0,
) -> GmmSnapshot:
    """Per-class diagonal-covariance EM fit with k-means++-style seeding."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    weights, means, variances = {}, {}, {}
    for c in (0, 1):
        rows = X[y == c]
        if rows.shape[0] == 0:
            raise ValueError(f"class {c} missing")
        weights[c], means[c], variances[c] = _fit_diag_gmm(rows, components, iters, rng)
    snap = GmmSnapshot(
        task_id=task_id,
        weights=weights,
        means=means,
        variances=variances,
        class_counts={0: int(np.sum(y == 0)), 1: int(np.sum(y == 1))},
    )
    return snap.freeze()


# ---------------------------------------------------------------------------
# Replay sampling policy.
# ---------------------------------------------------------------------------


@dataclass
class ReplayPolicy:
    task_mode: str = "uniform"  # or "proportional" to past task sizes
    class_balanced: bool = True
    cond_upweights: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.task_mode not in ("uniform", "proportional"):
            raise ValueError(f"unknown task mode {self.task_mode!r}")
        if any(u <= 0 for u in self.cond_upweights):
            raise ValueError("condition upweights must be positive")


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def draw_replay_batch(
    snapshots: list,
    policy: ReplayPolicy,
    batch_size: int,
    rho: float,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw round(rho * batch_size) synthetic samples from past-task snapshots.

    Per draw: pick a past task (uniform or size-proportional), then a condition
    (balanced or class-proportional, modulated by upweights), then sample from
    that snapshot.  Empty result when there are no past tasks.
    """
    if not (0.0 <= rho <= 1.0):
        raise ValueError("rho must be in [0, 1]")
    n = round_half_up(rho * batch_size)
    if not snapshots or n == 0:
        return np.empty((0, 0)), np.empty(0, dtype=int)
    rng = np.random.default_rng(seed)
    if policy.task_mode == "uniform":
        task_p = np.full(len(snapshots), 1.0 / len(snapshots))
    else:
        sizes = np.array([sum(s.class_counts.values()) for s in snapshots], dtype=float)
        task_p = sizes / sizes.sum()
    task_idx = rng.choice(len(snapshots), size=n, p=task_p)
    conditions = np.empty(n, dtype=int)
    for t in range(len(snapshots)):
        rows = task_idx == t
        if not rows.any():
            continue
        if policy.class_balanced:
            base = np.array([0.5, 0.5])
        else:
            counts = snapshots[t].class_counts
            base = np.array([counts.get(0, 0), counts.get(1, 0)], dtype=float)
        p = base * np.asarray(policy.cond_upweights, dtype=float)
        p = p / p.sum()
        conditions[rows] = rng.choice(2, size=int(rows.sum()), p=p)
    xs, ys = [], []
    for t in range(len(snapshots)):
        for c in (0, 1):
            count = int(np.sum((task_idx == t) & (conditions == c)))
            if count == 0:
                continue
            group_rng = np.random.default_rng(rng.integers(2**63))
            xs.append(snapshots[t].sample(c, count, group_rng))
            ys.append(np.full(count, c, dtype=int))
    return np.vstack(xs), np.concatenate(ys)
