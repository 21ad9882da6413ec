"""Dense statevector / density-matrix simulator for small parametrized circuits.

Conventions used throughout:

* qubit 0 is the most significant bit of a computational-basis index, i.e.
  the leftmost character of a measured bitstring;
* depolarizing noise with probability ``p`` replaces the reduced state of the
  gate's qubit(s) with the maximally mixed state with weight ``p``:
  ``rho -> (1 - p) * rho + p * (I / 2^k) (x) tr_S(rho)``.  ``p = 0`` is the
  identity map, ``p = 1`` fully scrambles the affected qubits;
* readout error is a symmetric bit flip with probability ``p_ro``: applied
  per measured bit in shot mode, and as a ``(1 - 2 p_ro)`` contraction of
  ``<Z>`` in exact-expectation mode (the two agree in expectation);
* noise channels are applied immediately after each gate; there is no idle
  noise.

States are immutable-in / new-out: every operation returns a fresh state and
all randomness comes from explicit per-call seeds.
"""

from __future__ import annotations

import itertools
import math
import string
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

MAX_QUBITS = 10

#: Linear angle map for conditioned features: [-1, 1] -> [-pi, pi].
ANGLE_SCALE = math.pi

GATE_KINDS = ("RY", "RZ", "CNOT")

_CNOT = np.array(
    [[1, 0, 0, 0],
     [0, 1, 0, 0],
     [0, 0, 0, 1],
     [0, 0, 1, 0]],
    dtype=complex,
)


def ry_matrix(theta: float) -> np.ndarray:
    c, s = math.cos(theta / 2.0), math.sin(theta / 2.0)
    return np.array([[c, -s], [s, c]], dtype=complex)


def rz_matrix(theta: float) -> np.ndarray:
    return np.array(
        [[np.exp(-0.5j * theta), 0.0], [0.0, np.exp(0.5j * theta)]], dtype=complex
    )


def angle_map(x: np.ndarray | float) -> np.ndarray | float:
    """Map conditioned features in [-1, 1] onto rotation angles in [-pi, pi]."""
    return ANGLE_SCALE * x


@dataclass(frozen=True)
class NoiseParams:
    """Depolarizing + readout-flip noise configuration."""

    p1: float = 0.0
    p2: float = 0.0
    p_ro: float = 0.0
    enabled: bool = False

    def __post_init__(self):
        for name in ("p1", "p2", "p_ro"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {v}")


NOISELESS = NoiseParams()


@dataclass(frozen=True)
class GateOp:
    kind: str
    target: int
    control: int | None = None
    angle: float | None = None


@dataclass(frozen=True)
class CircuitSpec:
    """Layered re-uploading ansatz: per layer, RY(theta + input) and RZ(phi)
    on every qubit followed by a CNOT ring (skipped for a single qubit)."""

    num_qubits: int
    num_layers: int

    def __post_init__(self):
        if not (1 <= self.num_qubits <= MAX_QUBITS):
            raise ValueError(f"num_qubits must be in [1, {MAX_QUBITS}]")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")

    @property
    def num_params(self) -> int:
        return 2 * self.num_qubits * self.num_layers

    def gates(self, params: np.ndarray, input_angles: np.ndarray) -> list[GateOp]:
        """Deterministic gate sequence for the given parameters and inputs."""
        q, L = self.num_qubits, self.num_layers
        params = np.asarray(params, dtype=float)
        input_angles = np.asarray(input_angles, dtype=float)
        if params.shape != (self.num_params,):
            raise ValueError(
                f"expected {self.num_params} circuit parameters, got {params.shape}"
            )
        if input_angles.shape != (q,):
            raise ValueError(f"expected {q} input angles, got {input_angles.shape}")
        ops: list[GateOp] = []
        for layer in range(L):
            base = layer * 2 * q
            for i in range(q):
                ops.append(GateOp("RY", i, angle=float(params[base + i] + input_angles[i])))
            for i in range(q):
                ops.append(GateOp("RZ", i, angle=float(params[base + q + i])))
            if q > 1:
                for i in range(q):
                    ops.append(GateOp("CNOT", (i + 1) % q, control=i))
        return ops


class QuantumState:
    """Pure statevector or density matrix over ``num_qubits`` qubits.

    The underlying tensor has one axis of size 2 per qubit (pure mode) or one
    ket axis plus one bra axis per qubit (mixed mode).
    """

    __slots__ = ("num_qubits", "mixed", "_tensor")

    def __init__(self, num_qubits: int, tensor: np.ndarray, mixed: bool):
        self.num_qubits = num_qubits
        self.mixed = mixed
        self._tensor = tensor

    @classmethod
    def zero(cls, num_qubits: int, mixed: bool = False) -> "QuantumState":
        if not (1 <= num_qubits <= MAX_QUBITS):
            raise ValueError(f"num_qubits must be in [1, {MAX_QUBITS}]")
        n_axes = 2 * num_qubits if mixed else num_qubits
        tensor = np.zeros((2,) * n_axes, dtype=complex)
        tensor[(0,) * n_axes] = 1.0
        return cls(num_qubits, tensor, mixed)

    @classmethod
    def from_statevector(cls, vec: Sequence[complex]) -> "QuantumState":
        vec = np.asarray(vec, dtype=complex)
        q = int(round(math.log2(vec.size)))
        if 2**q != vec.size:
            raise ValueError("statevector length must be a power of two")
        return cls(q, vec.reshape((2,) * q).copy(), mixed=False)

    @classmethod
    def from_density_matrix(cls, rho: np.ndarray) -> "QuantumState":
        rho = np.asarray(rho, dtype=complex)
        dim = rho.shape[0]
        q = int(round(math.log2(dim)))
        if rho.shape != (dim, dim) or 2**q != dim:
            raise ValueError("density matrix must be 2^q x 2^q")
        return cls(q, rho.reshape((2,) * (2 * q)).copy(), mixed=True)

    @property
    def statevector(self) -> np.ndarray:
        if self.mixed:
            raise ValueError("mixed-mode state has no statevector")
        return self._tensor.reshape(-1)

    @property
    def density_matrix(self) -> np.ndarray:
        dim = 2**self.num_qubits
        if self.mixed:
            return self._tensor.reshape(dim, dim)
        vec = self.statevector
        return np.outer(vec, vec.conj())

    def to_mixed(self) -> "QuantumState":
        if self.mixed:
            return self
        return QuantumState.from_density_matrix(self.density_matrix)

    def probabilities(self) -> np.ndarray:
        """Computational-basis probabilities, clipped and renormalized."""
        if self.mixed:
            diag = _diag_probs(self._tensor[None], self.num_qubits, mixed=True)[0]
        else:
            diag = np.abs(self._tensor) ** 2
        p = np.clip(diag.reshape(-1), 0.0, None)
        total = p.sum()
        if total <= 0.0:
            raise ValueError("state has vanishing total probability")
        return p / total

    def validate(self) -> None:
        """Raise if the state violates its mode invariants."""
        if self.mixed:
            rho = self.density_matrix
            if abs(np.trace(rho) - 1.0) > 1e-12:
                raise ValueError(f"trace deviates from 1: {np.trace(rho)}")
            if np.max(np.abs(rho - rho.conj().T)) > 1e-12:
                raise ValueError("density matrix not Hermitian")
            if np.min(np.linalg.eigvalsh(rho)) < -1e-10:
                raise ValueError("density matrix has a negative eigenvalue")
        else:
            norm = np.sum(np.abs(self.statevector) ** 2)
            if abs(norm - 1.0) > 1e-12:
                raise ValueError(f"statevector norm deviates from 1: {norm}")


# ---------------------------------------------------------------------------
# Batched tensor kernels.  All take an array with a leading batch axis;
# single-state operations wrap them with a batch of one.
# ---------------------------------------------------------------------------


def _contract_1q(arr: np.ndarray, u: np.ndarray, axis: int) -> np.ndarray:
    """Apply a 2x2 matrix (or a (B,2,2) stack) along one tensor axis."""
    moved = np.moveaxis(arr, axis, -1)
    if u.ndim == 3:
        out = np.einsum("bij,b...j->b...i", u, moved)
    else:
        out = moved @ u.T
    return np.moveaxis(out, -1, axis)


def _contract_2q(arr: np.ndarray, u4: np.ndarray, axis_a: int, axis_b: int) -> np.ndarray:
    """Apply a 4x4 matrix on the joint index (2*i_a + i_b) of two axes."""
    moved = np.moveaxis(arr, (axis_a, axis_b), (-2, -1))
    shape = moved.shape
    out = (moved.reshape(shape[:-2] + (4,)) @ u4.T).reshape(shape)
    return np.moveaxis(out, (-2, -1), (axis_a, axis_b))


def _apply_unitary_1q(arr: np.ndarray, u: np.ndarray, qubit: int, q: int, mixed: bool) -> np.ndarray:
    arr = _contract_1q(arr, u, 1 + qubit)
    if mixed:
        arr = _contract_1q(arr, u.conj(), 1 + q + qubit)
    return arr


def _apply_cnot(arr: np.ndarray, control: int, target: int, q: int, mixed: bool) -> np.ndarray:
    arr = _contract_2q(arr, _CNOT, 1 + control, 1 + target)
    if mixed:
        arr = _contract_2q(arr, _CNOT, 1 + q + control, 1 + q + target)
    return arr


def _depolarize(arr: np.ndarray, qubits: Sequence[int], p: float, q: int) -> np.ndarray:
    """Mix the reduced state of ``qubits`` toward maximally mixed with weight p."""
    if p <= 0.0:
        return arr
    qs = sorted(qubits)
    n_axes = arr.ndim
    letters = string.ascii_letters
    subs = [letters[i] for i in range(n_axes)]
    for k in qs:
        subs[1 + q + k] = subs[1 + k]  # contract ket against bra -> partial trace
    out_subs = (
        [subs[0]]
        + [subs[1 + i] for i in range(q) if i not in qs]
        + [subs[1 + q + i] for i in range(q) if i not in qs]
    )
    traced = np.einsum(f"{''.join(subs)}->{''.join(out_subs)}", arr)
    mixed_part = np.zeros_like(arr)
    scale = 1.0 / (2 ** len(qs))
    for bits in itertools.product((0, 1), repeat=len(qs)):
        idx: list = [slice(None)] * n_axes
        for k, b in zip(qs, bits):
            idx[1 + k] = b
            idx[1 + q + k] = b
        mixed_part[tuple(idx)] = traced * scale
    return (1.0 - p) * arr + p * mixed_part


def _diag_probs(arr: np.ndarray, q: int, mixed: bool) -> np.ndarray:
    """Basis probabilities as a (B,) + (2,)*q real tensor."""
    if not mixed:
        return np.abs(arr) ** 2
    letters = string.ascii_letters
    subs = [letters[0]] + [letters[1 + i] for i in range(q)] * 2
    out = letters[0] + "".join(letters[1 + i] for i in range(q))
    return np.real(np.einsum(f"{''.join(subs)}->{out}", arr))


def _z_from_probs(diag: np.ndarray, q: int) -> np.ndarray:
    """Per-qubit <Z> values, shape (B, q), from a basis-probability tensor."""
    batch = diag.shape[0]
    zs = np.empty((batch, q))
    for i in range(q):
        p_one = np.take(diag, 1, axis=1 + i).reshape(batch, -1).sum(axis=1)
        zs[:, i] = 1.0 - 2.0 * p_one
    return zs


# ---------------------------------------------------------------------------
# Public single-state operations.
# ---------------------------------------------------------------------------


def _validate_gate(gate: GateOp, num_qubits: int) -> None:
    if gate.kind not in GATE_KINDS:
        raise ValueError(f"unknown gate kind {gate.kind!r}")
    if not (0 <= gate.target < num_qubits):
        raise IndexError(f"target {gate.target} out of range for {num_qubits} qubits")
    if gate.kind == "CNOT":
        if gate.control is None:
            raise ValueError("CNOT requires a control qubit")
        if not (0 <= gate.control < num_qubits):
            raise IndexError(f"control {gate.control} out of range")
        if gate.control == gate.target:
            raise ValueError("control and target must differ")
    else:
        if gate.angle is None or not math.isfinite(gate.angle):
            raise ValueError(f"{gate.kind} requires a finite angle, got {gate.angle}")


def apply_gate(state: QuantumState, gate: GateOp, noise: NoiseParams = NOISELESS) -> QuantumState:
    """Apply one gate (plus its post-gate depolarizing channel when enabled)."""
    q = state.num_qubits
    _validate_gate(gate, q)
    if noise.enabled and not state.mixed:
        raise ValueError("noise-enabled simulation requires a mixed-mode state")
    arr = state._tensor[None]
    if gate.kind == "CNOT":
        arr = _apply_cnot(arr, gate.control, gate.target, q, state.mixed)
        if noise.enabled:
            arr = _depolarize(arr, (gate.control, gate.target), noise.p2, q)
    else:
        u = ry_matrix(gate.angle) if gate.kind == "RY" else rz_matrix(gate.angle)
        arr = _apply_unitary_1q(arr, u, gate.target, q, state.mixed)
        if noise.enabled:
            arr = _depolarize(arr, (gate.target,), noise.p1, q)
    return QuantumState(q, arr[0], state.mixed)


def expectation_z(state: QuantumState, qubit: int, noise: NoiseParams = NOISELESS) -> float:
    """Exact <Z_qubit>; contracted by (1 - 2 p_ro) when readout noise is on."""
    if not (0 <= qubit < state.num_qubits):
        raise IndexError(f"qubit {qubit} out of range")
    diag = _diag_probs(state._tensor[None], state.num_qubits, state.mixed)
    z = _z_from_probs(diag, state.num_qubits)[0, qubit]
    if noise.enabled:
        z *= 1.0 - 2.0 * noise.p_ro
    return float(z)


def sample_counts(
    state: QuantumState, shots: int, p_ro: float = 0.0, rng_seed: int = 0
) -> dict[str, int]:
    """Multinomial shot sampling with independent per-bit readout flips.

    Returns a histogram mapping observed bitstrings (qubit 0 leftmost) to
    counts; bit-exactly reproducible for a fixed seed.
    """
    if shots < 1:
        raise ValueError("shots must be >= 1")
    q = state.num_qubits
    probs = state.probabilities()
    rng = np.random.default_rng(rng_seed)
    counts = rng.multinomial(shots, probs)
    outcomes = np.repeat(np.arange(probs.size), counts)
    weights = 1 << np.arange(q - 1, -1, -1)
    bits = (outcomes[:, None] >> np.arange(q - 1, -1, -1)) & 1
    if p_ro > 0.0:
        bits = bits ^ (rng.random(bits.shape) < p_ro)
    observed = bits @ weights
    hist = np.bincount(observed, minlength=probs.size)
    return {format(i, f"0{q}b"): int(c) for i, c in enumerate(hist) if c}


def counts_to_z(counts: dict[str, int], num_qubits: int) -> np.ndarray:
    """Empirical per-qubit <Z> estimates from a shot histogram."""
    total = sum(counts.values())
    if total == 0:
        raise ValueError("empty histogram")
    zs = np.zeros(num_qubits)
    for bitstring, c in counts.items():
        for i in range(num_qubits):
            zs[i] += c * (1.0 - 2.0 * int(bitstring[i]))
    return zs / total


def run_circuit(
    spec: CircuitSpec,
    params: np.ndarray,
    input_angles: np.ndarray,
    noise: NoiseParams = NOISELESS,
    *,
    mixed: bool | None = None,
) -> QuantumState:
    """Run the layered ansatz from |0...0>; mixed mode iff noise is enabled
    (overridable for testing pure/mixed agreement)."""
    if mixed is None:
        mixed = noise.enabled
    state = QuantumState.zero(spec.num_qubits, mixed=mixed)
    for gate in spec.gates(params, input_angles):
        state = apply_gate(state, gate, noise)
    return state


def batch_z(
    spec: CircuitSpec,
    params: np.ndarray,
    input_angles: np.ndarray,
    noise: NoiseParams = NOISELESS,
    *,
    prep: Sequence[tuple[int, np.ndarray]] | None = None,
    mixed: bool | None = None,
    engine: str = "auto",
) -> np.ndarray:
    """Exact per-qubit <Z> for a batch of inputs in one vectorized pass.

    ``input_angles`` has shape (B, q).  ``prep`` optionally lists
    ``(qubit, angles)`` RY pre-rotations applied before the first layer (used
    for condition encoding); each prep rotation is a gate and receives the
    single-qubit noise channel like any other.  Matches ``run_circuit`` +
    ``expectation_z`` on every batch element.

    ``engine="auto"`` routes noisy exact evaluation through an algebraically
    equivalent Pauli-transfer kernel when numba is available; ``"dense"``
    forces the statevector / density-matrix path.
    """
    q, L = spec.num_qubits, spec.num_layers
    params = np.asarray(params, dtype=float)
    input_angles = np.asarray(input_angles, dtype=float)
    if params.shape != (spec.num_params,):
        raise ValueError(f"expected {spec.num_params} parameters, got {params.shape}")
    if input_angles.ndim != 2 or input_angles.shape[1] != q:
        raise ValueError(f"input_angles must have shape (B, {q})")
    if not np.all(np.isfinite(params)) or not np.all(np.isfinite(input_angles)):
        raise ValueError("non-finite circuit parameters or inputs")
    if engine not in ("auto", "dense", "ptm"):
        raise ValueError(f"unknown engine {engine!r}")
    # auto: the Pauli-transfer kernel wins for noisy (density) evaluation;
    # the dense pure path is faster when noise is off
    if engine == "auto" and not noise.enabled:
        engine = "dense"
    if engine != "dense" and mixed is None and _ptm_available():
        from ._ptm import ptm_batch_z

        return ptm_batch_z(
            q, L, params, input_angles, noise.p1, noise.p2, noise.p_ro,
            noise.enabled, prep=list(prep) if prep else None,
        )
    if engine == "ptm":
        raise RuntimeError("Pauli-transfer engine unavailable (numba missing)")
    if mixed is None:
        mixed = noise.enabled
    batch = input_angles.shape[0]
    n_axes = 2 * q if mixed else q
    arr = np.zeros((batch,) + (2,) * n_axes, dtype=complex)
    arr[(slice(None),) + (0,) * n_axes] = 1.0

    def ry_batch(angles: np.ndarray) -> np.ndarray:
        c, s = np.cos(angles / 2.0), np.sin(angles / 2.0)
        u = np.empty((angles.size, 2, 2), dtype=complex)
        u[:, 0, 0] = c
        u[:, 0, 1] = -s
        u[:, 1, 0] = s
        u[:, 1, 1] = c
        return u

    def apply_1q_batch(a: np.ndarray, u: np.ndarray, qubit: int) -> np.ndarray:
        a = _contract_1q(a, u, 1 + qubit)
        if mixed:
            a = _contract_1q(a, u.conj(), 1 + q + qubit)
        return a

    if prep is not None:
        for qubit, angles in prep:
            angles = np.broadcast_to(np.asarray(angles, dtype=float), (batch,))
            arr = apply_1q_batch(arr, ry_batch(angles), qubit)
            if noise.enabled:
                arr = _depolarize(arr, (qubit,), noise.p1, q)

    for layer in range(L):
        base = layer * 2 * q
        for i in range(q):
            arr = apply_1q_batch(arr, ry_batch(params[base + i] + input_angles[:, i]), i)
            if noise.enabled:
                arr = _depolarize(arr, (i,), noise.p1, q)
        for i in range(q):
            arr = _apply_unitary_1q(arr, rz_matrix(params[base + q + i]), i, q, mixed)
            if noise.enabled:
                arr = _depolarize(arr, (i,), noise.p1, q)
        if q > 1:
            for i in range(q):
                arr = _apply_cnot(arr, i, (i + 1) % q, q, mixed)
                if noise.enabled:
                    arr = _depolarize(arr, (i, (i + 1) % q), noise.p2, q)

    zs = _z_from_probs(_diag_probs(arr, q, mixed), q)
    if noise.enabled:
        zs = zs * (1.0 - 2.0 * noise.p_ro)
    return zs


def _ptm_available() -> bool:
    try:
        from ._ptm import HAVE_NUMBA

        return HAVE_NUMBA
    except ImportError:  # pragma: no cover
        return False


GRADIENT_METHODS = ("parameter-shift", "finite-difference", "spsa")


def gradient(
    spec: CircuitSpec,
    params: np.ndarray,
    input_angles: np.ndarray,
    readout: Callable[[QuantumState], float],
    method: str = "parameter-shift",
    *,
    noise: NoiseParams = NOISELESS,
    eps: float = 1e-5,
    seed: int = 0,
) -> np.ndarray:
    """Gradient of ``readout(final_state)`` with respect to the circuit angles.

    ``parameter-shift`` assumes the readout is linear in the state (any fixed
    observable qualifies) and requires noiseless exact expectations;
    ``finite-difference`` uses central differences with step ``eps``;
    ``spsa`` returns a single simultaneous-perturbation estimate.
    """
    params = np.asarray(params, dtype=float)
    n = params.size

    def evaluate(p: np.ndarray) -> float:
        return float(readout(run_circuit(spec, p, input_angles, noise)))

    if method == "parameter-shift":
        if noise.enabled:
            raise ValueError("parameter-shift requires noiseless exact expectations")
        grad = np.empty(n)
        for i in range(n):
            plus = params.copy()
            minus = params.copy()
            plus[i] += math.pi / 2.0
            minus[i] -= math.pi / 2.0
            grad[i] = 0.5 * (evaluate(plus) - evaluate(minus))
        return grad
    if method == "finite-difference":
        if eps <= 0.0:
            raise ValueError("eps must be > 0")
        grad = np.empty(n)
        for i in range(n):
            plus = params.copy()
            minus = params.copy()
            plus[i] += eps
            minus[i] -= eps
            grad[i] = (evaluate(plus) - evaluate(minus)) / (2.0 * eps)
        return grad
    if method == "spsa":
        if eps <= 0.0:
            raise ValueError("eps must be > 0")
        rng = np.random.default_rng(seed)
        delta = rng.choice((-1.0, 1.0), size=n)
        diff = evaluate(params + eps * delta) - evaluate(params - eps * delta)
        return diff / (2.0 * eps) * delta
    raise ValueError(f"unknown gradient method {method!r}; choose from {GRADIENT_METHODS}")
