"""Data re-uploading variational classifier: conditioning, readout, losses.

The model maps an input ``x`` through a trainable linear conditioning layer
``x' = clip(W x, -1, 1)``, encodes ``pi * x'`` as re-uploaded RY offsets, and
reads out ``p(y=1|x) = sigmoid(tau * (w . <Z> - b))`` with a jointly trained
positive calibration temperature ``tau = exp(tau_raw)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .simcore import (
    NOISELESS,
    CircuitSpec,
    NoiseParams,
    angle_map,
    batch_z,
    counts_to_z,
    run_circuit,
    sample_counts,
)

#: Probability clamp applied before logarithms.
P_EPS = 1e-7

MODEL_DOC_VERSION = 1
#: Flat parameter layout (also the serialization field order):
#: theta (2qL), W row-major (q*d), w (q), bias (1), tau_raw (1).
FLAT_LAYOUT = ("theta", "W", "w", "bias", "tau_raw")


def sigmoid(x: np.ndarray | float) -> np.ndarray | float:
    return 1.0 / (1.0 + np.exp(-np.clip(x, -500.0, 500.0)))


@dataclass
class LossConfig:
    kind: str = "weighted_bce"  # or "focal"
    w0: float = 1.0
    w1: float = 1.0
    gamma: float = 0.0
    alpha: float = 0.5

    def __post_init__(self):
        if self.kind not in ("weighted_bce", "focal"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.w0 <= 0 or self.w1 <= 0:
            raise ValueError("class weights must be positive")
        if self.gamma < 0:
            raise ValueError("focal gamma must be >= 0")
        if not (0.0 < self.alpha < 1.0):
            raise ValueError("focal alpha must be in (0, 1)")


@dataclass
class VqcModel:
    spec: CircuitSpec
    theta: np.ndarray  # circuit angles, length 2qL
    W: np.ndarray      # conditioning projection, (q, d)
    w: np.ndarray      # readout weights, (q,)
    bias: float
    tau_raw: float = 0.0

    @property
    def tau(self) -> float:
        return math.exp(self.tau_raw)

    @property
    def input_dim(self) -> int:
        return self.W.shape[1]

    @property
    def num_flat_params(self) -> int:
        return self.theta.size + self.W.size + self.w.size + 2

    @classmethod
    def initialize(
        cls,
        num_qubits: int = 6,
        num_layers: int = 3,
        input_dim: int | None = None,
        seed: int = 0,
    ) -> "VqcModel":
        """W = (truncated) identity, w = 1/q, bias = 0, tau = 1; RY angles
        start at pi/2 + U[-0.1, 0.1] and RZ angles at U[-0.1, 0.1].

        The quarter-period RY offset breaks the even-parity degeneracy of
        RY-from-|0> encodings (<Z> = cos is even in the encoded angle, so a
        zero-centered init cannot distinguish +/-x at first order).
        """
        spec = CircuitSpec(num_qubits, num_layers)
        d = num_qubits if input_dim is None else input_dim
        rng = np.random.default_rng(seed)
        theta = rng.uniform(-0.1, 0.1, spec.num_params)
        for layer in range(num_layers):
            base = layer * 2 * num_qubits
            theta[base : base + num_qubits] += math.pi / 2.0
        return cls(
            spec=spec,
            theta=theta,
            W=np.eye(num_qubits, d),
            w=np.full(num_qubits, 1.0 / num_qubits),
            bias=0.0,
            tau_raw=0.0,
        )

    def flat_params(self) -> np.ndarray:
        return np.concatenate(
            [self.theta, self.W.ravel(), self.w, [self.bias, self.tau_raw]]
        )

    def with_flat_params(self, flat: np.ndarray) -> "VqcModel":
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.num_flat_params:
            raise ValueError(
                f"expected {self.num_flat_params} parameters, got {flat.size}"
            )
        q, d = self.W.shape
        nt = self.theta.size
        return replace(
            self,
            theta=flat[:nt].copy(),
            W=flat[nt : nt + q * d].reshape(q, d).copy(),
            w=flat[nt + q * d : nt + q * d + q].copy(),
            bias=float(flat[-2]),
            tau_raw=float(flat[-1]),
        )

    def readout_slice(self) -> slice:
        """Positions of (w, bias, tau_raw) within the flat parameter vector."""
        return slice(self.theta.size + self.W.size, self.num_flat_params)

    def to_doc(self) -> dict:
        return {
            "version": MODEL_DOC_VERSION,
            "num_qubits": self.spec.num_qubits,
            "num_layers": self.spec.num_layers,
            "theta": self.theta.tolist(),
            "W": self.W.tolist(),
            "w": self.w.tolist(),
            "bias": self.bias,
            "tau_raw": self.tau_raw,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "VqcModel":
        if doc.get("version") != MODEL_DOC_VERSION:
            raise ValueError(f"unsupported model document version {doc.get('version')}")
        return cls(
            spec=CircuitSpec(doc["num_qubits"], doc["num_layers"]),
            theta=np.asarray(doc["theta"], dtype=float),
            W=np.asarray(doc["W"], dtype=float),
            w=np.asarray(doc["w"], dtype=float),
            bias=float(doc["bias"]),
            tau_raw=float(doc["tau_raw"]),
        )


def condition_input(model: VqcModel, x: np.ndarray) -> np.ndarray:
    """clip(W x, -1, 1); accepts a single vector or a (B, d) batch."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite values")
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != model.input_dim:
        raise ValueError(f"expected input dimension {model.input_dim}, got {X.shape[1]}")
    out = np.clip(X @ model.W.T, -1.0, 1.0)
    return out[0] if single else out


def input_angles(model: VqcModel, X: np.ndarray) -> np.ndarray:
    """Conditioned features mapped to re-uploaded rotation angles.

    The per-layer scale is pi / num_layers so the total rotation accumulated
    across all re-uploading layers spans one period ([-pi, pi]); a full-period
    scale per layer multiplies the feature frequency by the layer count and
    collapses small-budget trainability.
    """
    return angle_map(condition_input(model, np.atleast_2d(X))) / model.spec.num_layers


def z_features(
    model: VqcModel,
    X: np.ndarray,
    noise: NoiseParams = NOISELESS,
    *,
    shots: int | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Per-qubit <Z> features for a batch, shape (B, q).

    Exact expectations by default; with ``shots`` set, each row is estimated
    from a seeded shot histogram (readout flips applied in-sample).
    """
    angles = input_angles(model, X)
    if shots is None:
        return batch_z(model.spec, model.theta, angles, noise)
    if rng is None:
        rng = np.random.default_rng(0)
    p_ro = noise.p_ro if noise.enabled else 0.0
    zs = np.empty((angles.shape[0], model.spec.num_qubits))
    for b in range(angles.shape[0]):
        state = run_circuit(model.spec, model.theta, angles[b], noise)
        counts = sample_counts(
            state, shots, p_ro=p_ro, rng_seed=int(rng.integers(2**63))
        )
        zs[b] = counts_to_z(counts, model.spec.num_qubits)
    return zs


def scores_from_z(model: VqcModel, zs: np.ndarray) -> np.ndarray:
    """Pre-sigmoid readout score w . <Z> - b (the anchor-regularizer output)."""
    return zs @ model.w - model.bias


def predict_proba(
    model: VqcModel,
    x: np.ndarray,
    noise: NoiseParams = NOISELESS,
    *,
    shots: int | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray | float:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    zs = z_features(model, np.atleast_2d(x), noise, shots=shots, rng=rng)
    p = sigmoid(model.tau * scores_from_z(model, zs))
    return float(p[0]) if single else p


def loss_from_probs(
    probs: np.ndarray,
    y: np.ndarray,
    cfg: LossConfig,
    sample_weight: np.ndarray | None = None,
) -> float:
    """Weighted mean of per-sample weighted-BCE or focal loss."""
    probs = np.asarray(probs, dtype=float)
    y = np.asarray(y)
    if probs.size == 0:
        raise ValueError("empty batch")
    p = np.clip(probs, P_EPS, 1.0 - P_EPS)
    if cfg.kind == "weighted_bce":
        per = -(cfg.w1 * y * np.log(p) + cfg.w0 * (1 - y) * np.log(1.0 - p))
    else:
        p_t = np.where(y == 1, p, 1.0 - p)
        alpha_t = np.where(y == 1, cfg.alpha, 1.0 - cfg.alpha)
        per = -alpha_t * (1.0 - p_t) ** cfg.gamma * np.log(p_t)
    if sample_weight is None:
        return float(np.mean(per))
    sample_weight = np.asarray(sample_weight, dtype=float)
    return float(np.sum(sample_weight * per) / np.sum(sample_weight))


def supervised_loss(
    model: VqcModel,
    X: np.ndarray,
    y: np.ndarray,
    cfg: LossConfig,
    sample_weight: np.ndarray | None = None,
    noise: NoiseParams = NOISELESS,
    *,
    probs: np.ndarray | None = None,
) -> float:
    if probs is None:
        probs = predict_proba(model, np.atleast_2d(X), noise)
    return loss_from_probs(probs, y, cfg, sample_weight)


def class_weights(
    y: np.ndarray, strategy: str = "auto", boost: float = 1.5
) -> tuple[float, float, bool]:
    """Per-class loss weights and a focal-loss switch.

    ``sqrt-boost``: w_c proportional to sqrt(N / (2 N_c)) with the attack
    weight multiplied by ``boost``.  ``auto``: focal loss when the imbalance
    ratio exceeds 5, square-root weights otherwise.  Weights are normalized so
    that their mean is 1.
    """
    y = np.asarray(y)
    n0 = int(np.sum(y == 0))
    n1 = int(np.sum(y == 1))
    if n0 == 0 or n1 == 0:
        raise ValueError("both classes must be present to derive class weights")
    n = n0 + n1
    w0 = math.sqrt(n / (2.0 * n0))
    w1 = math.sqrt(n / (2.0 * n1))
    use_focal = False
    if strategy == "sqrt-boost":
        w1 *= boost
    elif strategy == "auto":
        if max(n0, n1) / min(n0, n1) > 5.0:
            use_focal = True
    else:
        raise ValueError(f"unknown weighting strategy {strategy!r}")
    scale = 2.0 / (w0 + w1)
    return w0 * scale, w1 * scale, use_focal


def focal_alpha(y: np.ndarray) -> float:
    """Inverse-frequency focal alpha for the attack class (class 1)."""
    y = np.asarray(y)
    n = y.size
    alpha = float(np.sum(y == 0)) / n
    return min(max(alpha, 0.01), 0.99)


def make_loss_config(y: np.ndarray, strategy: str = "auto", boost: float = 1.5) -> LossConfig:
    """Bundle :func:`class_weights` into a ready LossConfig."""
    w0, w1, use_focal = class_weights(y, strategy, boost)
    if use_focal:
        return LossConfig(kind="focal", gamma=2.0, alpha=focal_alpha(y))
    return LossConfig(kind="weighted_bce", w0=w0, w1=w1)


def supervised_readout_gradient(
    model: VqcModel,
    zs: np.ndarray,
    y: np.ndarray,
    cfg: LossConfig,
    sample_weight: np.ndarray | None = None,
) -> np.ndarray:
    """Analytic gradient of the supervised loss w.r.t. (w, bias, tau_raw).

    ``zs`` are the cached <Z> features; valid away from the P_EPS clamp.
    Returns a vector of length q + 2.
    """
    zs = np.asarray(zs, dtype=float)
    y = np.asarray(y)
    s = scores_from_z(model, zs)
    u = model.tau * s
    p = np.clip(sigmoid(u), P_EPS, 1.0 - P_EPS)
    if cfg.kind == "weighted_bce":
        dl_du = -(cfg.w1 * y * (1.0 - p) - cfg.w0 * (1 - y) * p)
    else:
        p_t = np.where(y == 1, p, 1.0 - p)
        alpha_t = np.where(y == 1, cfg.alpha, 1.0 - cfg.alpha)
        dl_dpt = -alpha_t * (
            -cfg.gamma * (1.0 - p_t) ** (cfg.gamma - 1.0) * np.log(p_t)
            + (1.0 - p_t) ** cfg.gamma / p_t
        )
        # dp_t/du = +p(1-p) for y=1 and -p(1-p) for y=0
        sign = np.where(y == 1, 1.0, -1.0)
        dl_du = dl_dpt * sign * p * (1.0 - p)
    if sample_weight is None:
        weight = np.full(y.shape, 1.0 / y.size)
    else:
        sample_weight = np.asarray(sample_weight, dtype=float)
        weight = sample_weight / np.sum(sample_weight)
    dw = (weight * dl_du) @ (model.tau * zs)
    db = float(np.sum(weight * dl_du * (-model.tau)))
    dtau_raw = float(np.sum(weight * dl_du * u))
    return np.concatenate([dw, [db, dtau_raw]])
