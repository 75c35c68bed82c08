"""Independent reference implementations used by the test suite and ``gradcheck``.

Nothing here shares code with the fast paths it checks: the circuit oracle
builds full ``2**n x 2**n`` unitaries from Kronecker products, and gradients
are central finite differences.
"""
from __future__ import annotations

import numpy as np
from scipy import sparse

from .qsim import CircuitSpec, Gate

_I = np.eye(2, dtype=complex)
_P0 = np.diag([1.0, 0.0]).astype(complex)
_P1 = np.diag([0.0, 1.0]).astype(complex)


def rotation_matrix(kind: str, angle: float) -> np.ndarray:
    c, s = np.cos(angle / 2), np.sin(angle / 2)
    if kind.endswith("RX"):
        return np.array([[c, -1j * s], [-1j * s, c]])
    return np.array([[np.exp(-1j * angle / 2), 0], [0, np.exp(1j * angle / 2)]])


def _kron_all(factors, as_sparse: bool = False):
    if as_sparse:
        out = sparse.identity(1, dtype=complex, format="csr")
        for f in factors:
            out = sparse.kron(out, sparse.csr_matrix(f), format="csr")
        return out
    out = np.ones((1, 1), dtype=complex)
    for f in factors:
        out = np.kron(out, f)
    return out


def dense_gate(n: int, gate: Gate, angle: float, as_sparse: bool = False):
    """Full unitary of one gate; qubit 0 is the leftmost Kronecker factor.

    ``as_sparse`` returns the same Kronecker product as a CSR matrix, which
    keeps 12-qubit circuits tractable.
    """
    R = rotation_matrix(gate.kind, angle)
    if gate.control is None:
        return _kron_all([R if q == gate.target else _I for q in range(n)], as_sparse)
    off = _kron_all([_P0 if q == gate.control else _I for q in range(n)], as_sparse)
    on = _kron_all([_P1 if q == gate.control else (R if q == gate.target else _I) for q in range(n)], as_sparse)
    return off + on


def _slot_angle(g: Gate, theta, x) -> float:
    s = g.slot
    return float(theta[s.value] if s.kind == "trainable" else x[s.value] if s.kind == "input" else s.value)


def dense_unitary(spec: CircuitSpec, theta, x) -> np.ndarray:
    U = np.eye(2**spec.n_qubits, dtype=complex)
    for g in spec.gates:
        U = dense_gate(spec.n_qubits, g, _slot_angle(g, theta, x)) @ U
    return U


def dense_statevector(spec: CircuitSpec, theta, x) -> np.ndarray:
    """First column of the circuit unitary; above 6 qubits the gate matrices are applied sparsely."""
    if spec.n_qubits <= 6:
        return dense_unitary(spec, theta, x)[:, 0]
    psi = np.zeros(2**spec.n_qubits, dtype=complex)
    psi[0] = 1.0
    for g in spec.gates:
        psi = dense_gate(spec.n_qubits, g, _slot_angle(g, theta, x), as_sparse=True) @ psi
    return psi


def pauli_z_expectations(psi: np.ndarray) -> np.ndarray:
    """<psi|Z_q|psi> for every qubit by explicit operator matrices."""
    n = int(np.log2(psi.size))
    Z = np.diag([1.0, -1.0])
    ops = [_kron_all([Z if k == q else _I for k in range(n)], as_sparse=True) for q in range(n)]
    return np.array([np.real(psi.conj() @ (op @ psi)) for op in ops])


def central_difference(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` (any shape) by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def random_circuit(rng: np.random.Generator, n_qubits: int, n_gates: int, n_trainable: int = 0, n_inputs: int = 0):
    """Random gate list over {RX, RZ, CRX, CRZ} mixing trainable, input and fixed slots."""
    from .qsim import Fixed, Input, Trainable

    gates = []
    kinds = ["RX", "RZ"] + (["CRX", "CRZ"] if n_qubits > 1 else [])
    for k in range(n_gates):
        kind = str(rng.choice(kinds))
        target = int(rng.integers(n_qubits))
        control = None
        if kind.startswith("C"):
            control = int(rng.choice([q for q in range(n_qubits) if q != target]))
        if k < n_trainable:
            slot = Trainable(k)
        else:
            r = rng.random()
            if n_trainable and r < 0.4:
                slot = Trainable(int(rng.integers(n_trainable)))
            elif n_inputs and r < 0.7:
                slot = Input(int(rng.integers(n_inputs)))
            else:
                slot = Fixed(float(rng.uniform(-np.pi, np.pi)))
        gates.append(Gate(kind, target, control, slot))
    return CircuitSpec(n_qubits, tuple(gates), n_trainable, n_inputs)
