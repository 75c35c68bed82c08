"""Dense statevector simulator for small variational circuits.

Gates are RX, RZ and their controlled versions CRX, CRZ, all using the
half-angle convention ``R(theta) = exp(-i theta P / 2)``. Qubit 0 is the most
significant bit of the basis index.

The public single-state functions (``apply_gate``, ``encode_angle``,
``expect_z_all``, ``run_circuit``, ``param_shift_gradients``) wrap batched
kernels that operate on ``(rows, 2**n)`` complex arrays with optional per-row
angles. The batched forms are what the quantum node of the autodiff engine
calls.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

MAX_QUBITS = 16
GATE_KINDS = ("RX", "RZ", "CRX", "CRZ")
CONTROLLED = ("CRX", "CRZ")

# Shift rules. Single-qubit rotations have generator eigenvalues +-1/2, so the
# two-term rule is exact. Controlled rotations have eigenvalues {0, +-1/2},
# which needs the four-term rule to stay exact.
_C1 = (math.sqrt(2) + 1) / (4 * math.sqrt(2))
_C2 = (math.sqrt(2) - 1) / (4 * math.sqrt(2))
SHIFT_RULES = {
    "RX": ((math.pi / 2, -math.pi / 2), (0.5, -0.5)),
    "RZ": ((math.pi / 2, -math.pi / 2), (0.5, -0.5)),
    "CRX": ((math.pi / 2, -math.pi / 2, 3 * math.pi / 2, -3 * math.pi / 2), (_C1, -_C1, -_C2, _C2)),
    "CRZ": ((math.pi / 2, -math.pi / 2, 3 * math.pi / 2, -3 * math.pi / 2), (_C1, -_C1, -_C2, _C2)),
}


class CircuitError(ValueError):
    """Raised for malformed gates, circuits, or mismatched parameter lengths."""


@dataclass(frozen=True)
class Slot:
    """Where a gate gets its angle: ``trainable`` index, ``input`` index or ``fixed`` radians."""

    kind: str
    value: float

    def __post_init__(self):
        if self.kind not in ("trainable", "input", "fixed"):
            raise CircuitError(f"unknown slot kind {self.kind!r}")
        if self.kind != "fixed":
            if int(self.value) != self.value or self.value < 0:
                raise CircuitError(f"{self.kind} slot needs a non-negative integer index, got {self.value!r}")
            object.__setattr__(self, "value", int(self.value))


def Trainable(index: int) -> Slot:
    return Slot("trainable", index)


def Input(index: int) -> Slot:
    return Slot("input", index)


def Fixed(angle: float) -> Slot:
    return Slot("fixed", float(angle))


@dataclass(frozen=True)
class Gate:
    kind: str
    target: int
    control: int | None = None
    slot: Slot = field(default_factory=lambda: Fixed(0.0))

    def __post_init__(self):
        if self.kind not in GATE_KINDS:
            raise CircuitError(f"unknown gate kind {self.kind!r}")
        controlled = self.kind in CONTROLLED
        if controlled and self.control is None:
            raise CircuitError(f"{self.kind} needs a control qubit")
        if not controlled and self.control is not None:
            raise CircuitError(f"{self.kind} takes no control qubit")
        if self.control is not None and self.control == self.target:
            raise CircuitError(f"control and target are both qubit {self.target}")

    def qubits(self) -> tuple[int, ...]:
        return (self.target,) if self.control is None else (self.control, self.target)

    def to_dict(self) -> dict:
        slot = {"kind": self.slot.kind, "value": self.slot.value}
        return {"kind": self.kind, "target": self.target, "control": self.control, "slot": slot}

    @classmethod
    def from_dict(cls, d: dict) -> "Gate":
        return cls(d["kind"], int(d["target"]), d.get("control"), Slot(d["slot"]["kind"], d["slot"]["value"]))


@dataclass(frozen=True)
class CircuitSpec:
    n_qubits: int
    gates: tuple[Gate, ...]
    n_trainable: int
    n_inputs: int

    def __post_init__(self):
        object.__setattr__(self, "gates", tuple(self.gates))
        if not 1 <= self.n_qubits <= MAX_QUBITS:
            raise CircuitError(f"n_qubits must be in 1..{MAX_QUBITS}, got {self.n_qubits}")
        used = set()
        for k, g in enumerate(self.gates):
            for q in g.qubits():
                if not 0 <= q < self.n_qubits:
                    raise CircuitError(f"gate {k} ({g.kind}) touches qubit {q} outside 0..{self.n_qubits - 1}")
            if g.slot.kind == "trainable":
                if g.slot.value >= self.n_trainable:
                    raise CircuitError(f"gate {k} uses trainable slot {g.slot.value} >= {self.n_trainable}")
                used.add(g.slot.value)
            elif g.slot.kind == "input" and g.slot.value >= self.n_inputs:
                raise CircuitError(f"gate {k} uses input slot {g.slot.value} >= {self.n_inputs}")
        missing = set(range(self.n_trainable)) - used
        if missing:
            raise CircuitError(f"trainable slots never used: {sorted(missing)[:5]}")

    def to_json(self) -> str:
        doc = {
            "n_qubits": self.n_qubits,
            "n_trainable": self.n_trainable,
            "n_inputs": self.n_inputs,
            "gates": [g.to_dict() for g in self.gates],
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CircuitSpec":
        d = json.loads(text)
        gates = tuple(Gate.from_dict(g) for g in d["gates"])
        return cls(int(d["n_qubits"]), gates, int(d["n_trainable"]), int(d["n_inputs"]))


@dataclass
class StateVector:
    amplitudes: np.ndarray

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=np.complex128)
        n = int(round(math.log2(amps.size))) if amps.size else -1
        if amps.ndim != 1 or n < 1 or 2**n != amps.size:
            raise CircuitError(f"amplitude array of length {amps.size} is not 2**n")
        self.amplitudes = amps

    @property
    def n_qubits(self) -> int:
        return int(round(math.log2(self.amplitudes.size)))

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    @classmethod
    def zero(cls, n_qubits: int) -> "StateVector":
        amps = np.zeros(2**n_qubits, dtype=np.complex128)
        amps[0] = 1.0
        return cls(amps)


# ---------------------------------------------------------------- kernels


def _coef(values, extra_dims: int):
    """Broadcast a scalar or per-row array against ``extra_dims`` trailing axes."""
    if np.ndim(values) == 0:
        return values
    return np.reshape(values, (-1,) + (1,) * extra_dims)


def _pair_views(psi: np.ndarray, n: int, gate: Gate):
    """Views of the amplitude blocks where the target bit is 0 and 1 (control bit 1 if any)."""
    rows, t = psi.shape[0], gate.target
    if gate.control is None:
        view = psi.reshape(rows, 2**t, 2, 2 ** (n - t - 1))
        return view[:, :, 0], view[:, :, 1]
    c = gate.control
    lo, hi = min(c, t), max(c, t)
    view = psi.reshape(rows, 2**lo, 2, 2 ** (hi - lo - 1), 2, 2 ** (n - hi - 1))
    if c < t:
        return view[:, :, 1, :, 0], view[:, :, 1, :, 1]
    return view[:, :, 0, :, 1], view[:, :, 1, :, 1]


def apply_gate_inplace(psi: np.ndarray, n: int, gate: Gate, angle) -> np.ndarray:
    """Apply ``gate`` to a C-contiguous ``(rows, 2**n)`` array in place; ``angle`` is scalar or per-row."""
    a0, a1 = _pair_views(psi, n, gate)
    half = np.asarray(angle, dtype=np.float64) / 2.0
    extra = a0.ndim - 1
    if gate.kind.endswith("RZ"):
        ph = _coef(np.exp(-1j * half), extra)
        a0 *= ph
        a1 *= np.conj(ph)
    else:
        c = _coef(np.cos(half), extra)
        ms = _coef(-1j * np.sin(half), extra)
        old0 = a0.copy()
        a0 *= c
        a0 += ms * a1
        a1 *= c
        a1 += ms * old0
    return psi


def apply_gate_batch(psi: np.ndarray, n: int, gate: Gate, angle) -> np.ndarray:
    """Return a new ``(rows, 2**n)`` array with ``gate`` applied."""
    return apply_gate_inplace(np.array(psi, dtype=np.complex128, order="C"), n, gate, angle)


@lru_cache(maxsize=None)
def z_signs(n: int) -> np.ndarray:
    """(n, 2**n) matrix with entry +1 where bit q of the basis index is 0, else -1."""
    idx = np.arange(2**n)
    bits = (idx[None, :] >> (n - 1 - np.arange(n))[:, None]) & 1
    signs = 1.0 - 2.0 * bits
    signs.setflags(write=False)
    return signs


def expect_z_batch(psi: np.ndarray, n: int) -> np.ndarray:
    probs = psi.real**2 + psi.imag**2
    return probs @ z_signs(n).T


def zero_batch(rows: int, n: int) -> np.ndarray:
    psi = np.zeros((rows, 2**n), dtype=np.complex128)
    psi[:, 0] = 1.0
    return psi


def _check_lengths(spec: CircuitSpec, theta: np.ndarray, X: np.ndarray):
    if theta.shape != (spec.n_trainable,):
        raise CircuitError(f"theta has shape {theta.shape}, circuit needs ({spec.n_trainable},)")
    if X.ndim != 2 or X.shape[1] != spec.n_inputs:
        raise CircuitError(f"inputs have shape {X.shape}, circuit needs (rows, {spec.n_inputs})")


def _angle(gate: Gate, theta: np.ndarray, X: np.ndarray):
    kind, v = gate.slot.kind, gate.slot.value
    if kind == "trainable":
        return theta[v]
    if kind == "input":
        return X[:, v]
    return v


def _run_from(psi, spec: CircuitSpec, start: int, theta, X):
    """Run gates ``start:`` on ``psi`` in place (the caller must own ``psi``)."""
    n = spec.n_qubits
    for g in spec.gates[start:]:
        apply_gate_inplace(psi, n, g, _angle(g, theta, X))
    return psi


def _statevector_rows(spec: CircuitSpec, theta, X) -> np.ndarray:
    return _run_from(zero_batch(X.shape[0], spec.n_qubits), spec, 0, theta, X)


def _chunks(rows: int, chunk: int) -> list[slice]:
    return [slice(i, min(i + chunk, rows)) for i in range(0, rows, chunk)]


def _map(fn, items: Sequence, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def run_circuit_batch(spec: CircuitSpec, theta, X, workers: int = 1, chunk: int = 64) -> np.ndarray:
    """Per-qubit <Z> for every row of ``X``; returns ``(rows, n_qubits)``."""
    theta = np.asarray(theta, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    _check_lengths(spec, theta, X)
    if X.shape[0] == 0:
        return np.zeros((0, spec.n_qubits))

    def one(sl):
        return expect_z_batch(_statevector_rows(spec, theta, X[sl]), spec.n_qubits)

    return np.concatenate(_map(one, _chunks(X.shape[0], chunk), workers))


def _shift_chunk(spec: CircuitSpec, theta, X, U, shift_rules):
    """Parameter-shift gradients for a block of rows; returns (dtheta, dX)."""
    n = spec.n_qubits
    rows = X.shape[0]
    dtheta = np.zeros(spec.n_trainable)
    dX = np.zeros_like(X)
    weights = U @ z_signs(n)  # (rows, 2**n): sum_q U_q * z_q(b)
    psi = zero_batch(rows, n)
    for k, g in enumerate(spec.gates):
        a = _angle(g, theta, X)
        if g.slot.kind != "fixed":
            shifts, coefs = shift_rules[g.kind]
            S = len(shifts)
            stacked = np.concatenate([apply_gate_batch(psi, n, g, a + s) for s in shifts])
            stacked = _run_from(stacked, spec, k + 1, theta, np.tile(X, (S, 1)))
            probs = stacked.real**2 + stacked.imag**2
            vals = np.einsum("rb,rb->r", probs, np.tile(weights, (S, 1))).reshape(S, rows)
            deriv = np.asarray(coefs) @ vals
            if g.slot.kind == "trainable":
                dtheta[g.slot.value] += deriv.sum()
            else:
                dX[:, g.slot.value] += deriv
        apply_gate_inplace(psi, n, g, a)
    return dtheta, dX


def param_shift_batch(spec: CircuitSpec, theta, X, U, workers: int = 1, chunk: int = 16, shift_rules=None):
    """Batched parameter-shift gradients.

    ``U`` holds the upstream gradients (rows, n_qubits). Returns ``dtheta``
    summed over rows and ``dX`` per row. Chunks are reduced in a fixed order,
    so the result does not depend on ``workers``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    U = np.asarray(U, dtype=np.float64)
    _check_lengths(spec, theta, X)
    if U.shape != (X.shape[0], spec.n_qubits):
        raise CircuitError(f"upstream has shape {U.shape}, expected {(X.shape[0], spec.n_qubits)}")
    rules = SHIFT_RULES if shift_rules is None else shift_rules
    dtheta = np.zeros(spec.n_trainable)
    dX = np.zeros_like(X)
    parts = _map(lambda sl: (sl, _shift_chunk(spec, theta, X[sl], U[sl], rules)), _chunks(X.shape[0], chunk), workers)
    for sl, (dt, dx) in parts:
        dtheta += dt
        dX[sl] = dx
    return dtheta, dX


def adjoint_batch(spec: CircuitSpec, theta, X, U, workers: int = 1, chunk: int = 64):
    """Same outputs as ``param_shift_batch`` via reverse-mode adjoint state propagation.

    Costs a few circuit passes instead of one pass per shifted gate. Used as a
    faster training backend; the tests check it against parameter shift.
    """
    theta = np.asarray(theta, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    U = np.asarray(U, dtype=np.float64)
    _check_lengths(spec, theta, X)
    n = spec.n_qubits
    gen = {"RX": np.array([[0, 1], [1, 0]], dtype=complex), "RZ": np.array([[1, 0], [0, -1]], dtype=complex)}

    def one(sl):
        x, u = X[sl], U[sl]
        rows = x.shape[0]
        psi = _statevector_rows(spec, theta, x)
        lam = psi * (u @ z_signs(n))  # O|psi> with O = sum_q u_q Z_q
        dt = np.zeros(spec.n_trainable)
        dx = np.zeros_like(x)
        for g in reversed(spec.gates):
            a = _angle(g, theta, x)
            if g.slot.kind != "fixed":
                # d/da <psi|O|psi> = 2 Re <lam| dU/da |psi_prev>, with dU/da = -i/2 P U
                dmoved = _apply_generator(psi, n, g, gen)
                deriv = 2.0 * np.real(np.einsum("rb,rb->r", lam.conj(), -0.5j * dmoved))
                if g.slot.kind == "trainable":
                    dt[g.slot.value] += deriv.sum()
                else:
                    dx[:, g.slot.value] += deriv
            apply_gate_inplace(psi, n, g, -a)
            apply_gate_inplace(lam, n, g, -a)
        return dt, dx

    dtheta = np.zeros(spec.n_trainable)
    dX = np.zeros_like(X)
    for sl, (dt, dx) in zip(_chunks(X.shape[0], chunk), _map(one, _chunks(X.shape[0], chunk), workers)):
        dtheta += dt
        dX[sl] = dx
    return dtheta, dX


def _apply_generator(psi, n, gate: Gate, gen) -> np.ndarray:
    """Apply the (possibly controlled) Pauli generator of ``gate``; controlled part zeroes the control=0 block."""
    rows = psi.shape[0]
    P = gen[gate.kind[-2:]]
    t = gate.target
    out = np.zeros_like(psi)
    if gate.control is None:
        src = psi.reshape(rows, 2**t, 2, -1)
        dst = out.reshape(rows, 2**t, 2, -1)
        dst[:, :, 0] = P[0, 0] * src[:, :, 0] + P[0, 1] * src[:, :, 1]
        dst[:, :, 1] = P[1, 0] * src[:, :, 0] + P[1, 1] * src[:, :, 1]
        return out
    c = gate.control
    lo, hi = min(c, t), max(c, t)
    shape = (rows, 2**lo, 2, 2 ** (hi - lo - 1), 2, 2 ** (n - hi - 1))
    src, dst = psi.reshape(shape), out.reshape(shape)
    if c < t:
        s, d = src[:, :, 1], dst[:, :, 1]
        d[:, :, :, 0] = P[0, 0] * s[:, :, :, 0] + P[0, 1] * s[:, :, :, 1]
        d[:, :, :, 1] = P[1, 0] * s[:, :, :, 0] + P[1, 1] * s[:, :, :, 1]
    else:
        s, d = src[:, :, :, :, 1], dst[:, :, :, :, 1]
        d[:, :, 0] = P[0, 0] * s[:, :, 0] + P[0, 1] * s[:, :, 1]
        d[:, :, 1] = P[1, 0] * s[:, :, 0] + P[1, 1] * s[:, :, 1]
    return out


# ------------------------------------------------------- single-state API


def apply_gate(state: StateVector, gate: Gate, angle: float) -> StateVector:
    n = state.n_qubits
    for q in gate.qubits():
        if not 0 <= q < n:
            raise CircuitError(f"{gate.kind} touches qubit {q} but the state has {n} qubits")
    return StateVector(apply_gate_batch(state.amplitudes[None, :], n, gate, float(angle))[0])


def encode_angle(x: Iterable[float]) -> StateVector:
    """Product state ``prod_i RX_i(x_i) |0...0>``."""
    x = np.asarray(list(x), dtype=np.float64)
    if not 1 <= x.size <= MAX_QUBITS:
        raise CircuitError(f"can encode 1..{MAX_QUBITS} features, got {x.size}")
    amps = np.ones(1, dtype=np.complex128)
    for xi in x:
        amps = np.kron(amps, np.array([math.cos(xi / 2), -1j * math.sin(xi / 2)]))
    return StateVector(amps)


def expect_z_all(state: StateVector) -> np.ndarray:
    return expect_z_batch(state.amplitudes[None, :], state.n_qubits)[0]


def _single_inputs(spec: CircuitSpec, theta, x):
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    _check_lengths(spec, theta, x)
    return theta, x


def simulate(spec: CircuitSpec, theta, x) -> StateVector:
    theta, X = _single_inputs(spec, theta, x)
    return StateVector(_statevector_rows(spec, theta, X)[0])


def run_circuit(spec: CircuitSpec, theta, x) -> np.ndarray:
    theta, X = _single_inputs(spec, theta, x)
    return run_circuit_batch(spec, theta, X)[0]


def param_shift_gradients(spec: CircuitSpec, theta, x, upstream):
    theta, X = _single_inputs(spec, theta, x)
    U = np.asarray(upstream, dtype=np.float64).reshape(1, -1)
    dtheta, dX = param_shift_batch(spec, theta, X, U)
    return dtheta, dX[0]
