"""Pauli-transfer fast path for noisy exact expectations.

Represents the state as the real coefficient vector r_P = Tr(rho P) over the
4^q Pauli strings (index digits: 0=I, 1=X, 2=Y, 3=Z, qubit 0 most
significant).  In this basis the depolarizing channel is an elementwise
contraction of the strings supported on the affected qubit(s) and rotations
act as 2x2 blends, so the layered-ansatz forward pass is exactly equivalent
to the density-matrix evolution but far cheaper.  Used only when numba is
available; callers fall back to the density path otherwise.
"""

from __future__ import annotations

import math

import numpy as np

try:
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a soft dependency
    HAVE_NUMBA = False

_PAULIS = [
    np.eye(2, dtype=complex),
    np.array([[0, 1], [1, 0]], dtype=complex),
    np.array([[0, -1j], [1j, 0]], dtype=complex),
    np.array([[1, 0], [0, -1]], dtype=complex),
]
_CNOT_U = np.array(
    [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=complex
)


def _cnot_transfer() -> tuple[np.ndarray, np.ndarray]:
    """Signed-permutation action of CNOT on two-qubit Pauli strings."""
    src = np.empty(16, dtype=np.int64)
    sgn = np.empty(16, dtype=np.float64)
    for qi in range(16):
        Q = np.kron(_PAULIS[qi // 4], _PAULIS[qi % 4])
        for pi in range(16):
            P = np.kron(_PAULIS[pi // 4], _PAULIS[pi % 4])
            coeff = np.trace(_CNOT_U @ P @ _CNOT_U.conj().T @ Q).real / 4.0
            if abs(coeff) > 0.5:
                src[qi] = pi
                sgn[qi] = round(coeff)
                break
    return src, sgn


_CNOT_SRC16, _CNOT_SGN16 = _cnot_transfer()

_TABLE_CACHE: dict = {}


def _tables(q: int, p1: float, p2: float, noisy: bool) -> dict:
    """Index and noise-factor tables for the flat Pauli vector of length 4^q.

    Factor arrays bake the depolarizing contraction in branchless form:
    ``fac1[i]`` multiplies after a rotation on qubit i, the CNOT gather
    carries sign * two-qubit factor.
    """
    key = (q, p1, p2, noisy)
    if key in _TABLE_CACHE:
        return _TABLE_CACHE[key]
    n = 4**q
    strides = np.array([4 ** (q - 1 - i) for i in range(q)], dtype=np.int64)
    digits = np.empty((q, n), dtype=np.int64)
    idx = np.arange(n)
    for i in range(q):
        digits[i] = (idx // strides[i]) % 4

    # initial |0...0>: coefficient 1 on strings with support in {I, Z}
    init = np.where(np.all((digits == 0) | (digits == 3), axis=0), 1.0, 0.0)

    eff_p1 = p1 if noisy else 0.0
    eff_p2 = p2 if noisy else 0.0
    fac1 = 1.0 - eff_p1 * (digits != 0)

    pairs = [(i, (i + 1) % q) for i in range(q)] if q > 1 else []
    n_pairs = len(pairs)
    cnot_src = np.empty((n_pairs, n), dtype=np.int64)
    cnot_fac = np.empty((n_pairs, n), dtype=np.float64)
    for k, (c, t) in enumerate(pairs):
        combo_q = digits[c] * 4 + digits[t]
        combo_src = _CNOT_SRC16[combo_q]
        # rebuild the flat source index with the (c, t) digits replaced
        delta = (combo_src // 4 - digits[c]) * strides[c] + (
            combo_src % 4 - digits[t]
        ) * strides[t]
        cnot_src[k] = idx + delta
        support = (digits[c] != 0) | (digits[t] != 0)
        cnot_fac[k] = _CNOT_SGN16[combo_q] * (1.0 - eff_p2 * support)

    tables = {
        "strides": strides,
        "init": init,
        "fac1": np.ascontiguousarray(fac1),
        "cnot_src": np.ascontiguousarray(cnot_src),
        "cnot_fac": np.ascontiguousarray(cnot_fac),
        "apply_fac1": bool(noisy and p1 > 0.0),
    }
    _TABLE_CACHE[key] = tables
    return tables


if HAVE_NUMBA:

    @njit(cache=True, inline="always")
    def _ry(r, s, n, alpha):
        # Bloch rotation about Y: x' = c*x + s*z, z' = -s*x + c*z
        c = math.cos(alpha)
        sn = math.sin(alpha)
        step = 4 * s
        for high in range(0, n, step):
            for low in range(s):
                ix = high + low + s
                iz = high + low + 3 * s
                x = r[ix]
                z = r[iz]
                r[ix] = c * x + sn * z
                r[iz] = -sn * x + c * z

    @njit(cache=True, inline="always")
    def _rz(r, s, n, alpha):
        # Bloch rotation about Z: x' = c*x - s*y, y' = s*x + c*y
        c = math.cos(alpha)
        sn = math.sin(alpha)
        step = 4 * s
        for high in range(0, n, step):
            for low in range(s):
                ix = high + low + s
                iy = high + low + 2 * s
                x = r[ix]
                y = r[iy]
                r[ix] = c * x - sn * y
                r[iy] = sn * x + c * y

    @njit(cache=True, parallel=True)
    def _forward(
        init,
        input_angles,
        theta_ry,
        theta_rz,
        strides,
        fac1,
        apply_fac1,
        cnot_src,
        cnot_fac,
        prep_qubits,
        prep_angles,
        out_z,
    ):
        batch, q = input_angles.shape
        layers = theta_ry.shape[0]
        n = init.shape[0]
        for b in prange(batch):
            r = init.copy()
            tmp = np.empty(n)
            for pi in range(prep_qubits.shape[0]):
                pq = prep_qubits[pi]
                _ry(r, strides[pq], n, prep_angles[pi, b])
                if apply_fac1:
                    r *= fac1[pq]
            for layer in range(layers):
                for i in range(q):
                    _ry(r, strides[i], n, theta_ry[layer, i] + input_angles[b, i])
                    if apply_fac1:
                        r *= fac1[i]
                for i in range(q):
                    _rz(r, strides[i], n, theta_rz[layer, i])
                    if apply_fac1:
                        r *= fac1[i]
                if q > 1:
                    for k in range(cnot_src.shape[0]):
                        for j in range(n):
                            tmp[j] = cnot_fac[k, j] * r[cnot_src[k, j]]
                        r[:] = tmp
            for i in range(q):
                out_z[b, i] = r[3 * strides[i]]


def ptm_batch_z(
    num_qubits: int,
    num_layers: int,
    params: np.ndarray,
    input_angles: np.ndarray,
    p1: float,
    p2: float,
    p_ro: float,
    noisy: bool,
    prep: list[tuple[int, np.ndarray]] | None = None,
) -> np.ndarray:
    """Exact <Z> expectations for the layered ansatz via Pauli transfer."""
    if not HAVE_NUMBA:
        raise RuntimeError("Pauli-transfer fast path requires numba")
    q, L = num_qubits, num_layers
    tables = _tables(q, p1, p2, noisy)
    params = np.asarray(params, dtype=float).reshape(L, 2 * q)
    theta_ry = np.ascontiguousarray(params[:, :q])
    theta_rz = np.ascontiguousarray(params[:, q:])
    input_angles = np.ascontiguousarray(np.asarray(input_angles, dtype=float))
    batch = input_angles.shape[0]
    if prep:
        prep_qubits = np.array([p[0] for p in prep], dtype=np.int64)
        prep_angles = np.vstack(
            [np.broadcast_to(np.asarray(a, dtype=float), (batch,)) for _, a in prep]
        )
    else:
        prep_qubits = np.empty(0, dtype=np.int64)
        prep_angles = np.empty((0, batch))
    out = np.empty((batch, q))
    _forward(
        tables["init"],
        input_angles,
        theta_ry,
        theta_rz,
        tables["strides"],
        tables["fac1"],
        tables["apply_fac1"],
        tables["cnot_src"],
        tables["cnot_fac"],
        prep_qubits,
        np.ascontiguousarray(prep_angles),
        out,
    )
    if noisy:
        out *= 1.0 - 2.0 * p_ro
    return out
