"""The two 12-qubit convolution ansatzes, HQConv and FQConv.

Qubit layout: ``qubit = channel * pixels_per_channel + pixel``, so a 3x2x2
activation block flattened in (channel, row, col) order lands one value per
qubit. Both circuits start with an RX angle-encoding prefix (input ``i`` on
qubit ``i``) followed by ``n_layers`` entangling layers with fresh parameters.

HQConv layer
    intra-channel ring: for every channel ``c`` and pixel ``p``,
    CRZ then CRX from (c, p) to (c, p+1 mod P); then, for each adjacent channel
    pair, CRZ then CRX from the first qubit of ``c`` to the first qubit of ``c+1``.
FQConv layer
    cross-channel stride: CRZ from every qubit ``q`` to ``q + P mod n``, then
    CRX over the same pairs.
"""
from __future__ import annotations

from dataclasses import dataclass

from .qsim import MAX_QUBITS, CircuitError, CircuitSpec, Gate, Input, Trainable

KINDS = ("HQConv", "FQConv")


@dataclass(frozen=True)
class AnsatzConfig:
    kind: str = "HQConv"
    n_channels: int = 3
    pixels_per_channel: int = 4
    n_layers: int = 3
    wrap: bool = True  # ring indexing; False drops the wrapped pairs
    close_channel_ring: bool = False  # HQConv only: add the last->first channel pair

    @property
    def n_qubits(self) -> int:
        return self.n_channels * self.pixels_per_channel

    def validate(self):
        if self.kind not in KINDS:
            raise CircuitError(f"ansatz kind must be one of {KINDS}, got {self.kind!r}")
        if self.n_channels < 1 or self.pixels_per_channel < 1:
            raise CircuitError("need at least one channel and one pixel per channel")
        if self.n_layers < 1:
            raise CircuitError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.n_qubits > MAX_QUBITS:
            raise CircuitError(f"{self.n_qubits} qubits exceeds the simulator limit of {MAX_QUBITS}")
        if self.kind == "HQConv" and self.pixels_per_channel < 2:
            raise CircuitError("HQConv needs at least two pixels per channel")
        if self.kind == "FQConv" and self.n_channels < 2:
            raise CircuitError("FQConv needs at least two channels to cross")


def _encoding(n: int) -> list[Gate]:
    return [Gate("RX", q, None, Input(q)) for q in range(n)]


class _Slots:
    def __init__(self):
        self.count = 0

    def next(self):
        slot = Trainable(self.count)
        self.count += 1
        return slot


def _controlled_pair(gates, slots, control, target):
    gates.append(Gate("CRZ", target, control, slots.next()))
    gates.append(Gate("CRX", target, control, slots.next()))


def build_hqconv(cfg: AnsatzConfig = AnsatzConfig()) -> CircuitSpec:
    cfg.validate()
    if cfg.kind != "HQConv":
        raise CircuitError(f"build_hqconv got a {cfg.kind} config")
    P, C = cfg.pixels_per_channel, cfg.n_channels
    gates, slots = _encoding(cfg.n_qubits), _Slots()
    for _ in range(cfg.n_layers):
        for c in range(C):
            for p in range(P):
                if p + 1 == P and not cfg.wrap:
                    continue
                _controlled_pair(gates, slots, c * P + p, c * P + (p + 1) % P)
        pairs = [(c, c + 1) for c in range(C - 1)]
        if cfg.close_channel_ring and C > 2:
            pairs.append((C - 1, 0))
        for a, b in pairs:
            _controlled_pair(gates, slots, a * P, b * P)
    return CircuitSpec(cfg.n_qubits, tuple(gates), slots.count, cfg.n_qubits)


def build_fqconv(cfg: AnsatzConfig = AnsatzConfig(kind="FQConv")) -> CircuitSpec:
    cfg.validate()
    if cfg.kind != "FQConv":
        raise CircuitError(f"build_fqconv got a {cfg.kind} config")
    n, stride = cfg.n_qubits, cfg.pixels_per_channel
    pairs = [(q, (q + stride) % n) for q in range(n) if cfg.wrap or q + stride < n]
    gates, slots = _encoding(n), _Slots()
    for _ in range(cfg.n_layers):
        for kind in ("CRZ", "CRX"):
            for control, target in pairs:
                gates.append(Gate(kind, target, control, slots.next()))
    return CircuitSpec(n, tuple(gates), slots.count, n)


def build_ansatz(cfg: AnsatzConfig) -> CircuitSpec:
    return build_hqconv(cfg) if cfg.kind == "HQConv" else build_fqconv(cfg)
