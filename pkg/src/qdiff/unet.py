"""U-Net noise predictor and its hybrid quantum variants.

Variants
--------
``classical``
    ResNet + attention U-Net over 28x28x10 -> 14x14x20 -> 7x7x40 -> 2x2x40.
``qvu``
    Same network with the ResNet convolutions of the 2x2x40 vertex partly
    replaced by 12-qubit circuits, each acting on a triple of channels.
``quanvu``
    ``qvu`` with one circuit in the vertex plus a quanvolutional filter in the
    first 14x14 encoder block: one shared circuit slides over the 2x2 patches
    of three channels.

Circuit inputs pass through ``tanh`` and are scaled by ``angle_scale`` (pi by
default), so encoding angles stay inside (-pi, pi).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .ansatz import AnsatzConfig, build_ansatz
from .qsim import CircuitSpec
from .tensor import ParamTree, ShapeError, Tensor

VARIANTS = ("classical", "qvu", "quanvu")
ANSATZ_NAMES = {"hqconv": "HQConv", "fqconv": "FQConv"}
FULL_CIRCUITS = 14
VERTEX_PREFIX = "mid."


class ConfigError(ValueError):
    """Raised for invalid model configurations."""


@dataclass
class ModelConfig:
    variant: str = "classical"
    n_circuits: int = 1  # 1, 7 or 14 (Full; 13 triples plus one covering channel 39)
    ansatz: str = "HQConv"
    base_channels: int = 10
    channel_multipliers: tuple = (1, 2, 4)
    image_size: int = 28
    in_channels: int = 1
    vertex_size: int = 2
    time_embed_dim: int = 40
    blocks_per_level: int = 2
    attention_levels: tuple = (1, 2)
    heads: int = 4
    stem_kernel: int = 7
    replace_convs: str = "both"  # which vertex ResNet convs get circuits: first | second | both
    full_fill: str = "overlap"  # 14th Full circuit: overlap (37,38,39) or zero_pad (39,0,0)
    quanv_level: int = 1
    quanv_channels: tuple = (0, 1, 2)
    ansatz_layers: int = 3
    ansatz_wrap: bool = True
    angle_scale: float = math.pi
    gradient_method: str = "param_shift"
    workers: int = 1

    def __post_init__(self):
        self.channel_multipliers = tuple(self.channel_multipliers)
        self.attention_levels = tuple(self.attention_levels)
        self.quanv_channels = tuple(self.quanv_channels)
        self.ansatz = ANSATZ_NAMES.get(str(self.ansatz).lower(), self.ansatz)
        if str(self.n_circuits).lower() == "full":
            self.n_circuits = FULL_CIRCUITS

    @property
    def widths(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_multipliers]

    @property
    def vertex_channels(self) -> int:
        return self.widths[-1]

    @property
    def level_sizes(self) -> list[int]:
        return [self.image_size // 2**l for l in range(len(self.channel_multipliers))]

    @property
    def hybrid(self) -> bool:
        return self.variant != "classical"

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.hybrid:
            if self.n_circuits not in (1, 7, FULL_CIRCUITS):
                raise ConfigError(f"n_circuits must be 1, 7 or full, got {self.n_circuits}")
            if self.variant == "quanvu" and self.n_circuits != 1:
                raise ConfigError("the quanvolutional variant uses a single vertex circuit")
            if self.ansatz not in ("HQConv", "FQConv"):
                raise ConfigError(f"ansatz must be HQConv or FQConv, got {self.ansatz!r}")
            if 3 * min(self.n_circuits, 13) > self.vertex_channels:
                raise ConfigError(f"{self.n_circuits} circuits need more than {self.vertex_channels} vertex channels")
        if self.replace_convs not in ("first", "second", "both"):
            raise ConfigError(f"replace_convs must be first, second or both, got {self.replace_convs!r}")
        if self.full_fill not in ("overlap", "zero_pad"):
            raise ConfigError(f"full_fill must be overlap or zero_pad, got {self.full_fill!r}")
        if self.gradient_method not in ("param_shift", "adjoint"):
            raise ConfigError(f"gradient_method must be param_shift or adjoint, got {self.gradient_method!r}")
        if self.time_embed_dim < 1 or self.base_channels % 2:
            raise ConfigError("base_channels must be even (it sets the sinusoid width)")
        sizes = self.level_sizes
        if sizes[-1] < self.vertex_size or any(s * 2 != p for p, s in zip(sizes, sizes[1:])):
            raise ConfigError(f"image size {self.image_size} does not halve cleanly over the levels")
        _downsample_geometry(sizes[-1], self.vertex_size)
        for l in self.attention_levels:
            if self.widths[min(l, len(self.widths) - 1)] % self.heads:
                raise ConfigError(f"attention at level {l} needs channels divisible by {self.heads} heads")
        if self.vertex_channels % self.heads:
            raise ConfigError(f"vertex channels {self.vertex_channels} not divisible by {self.heads} heads")
        if self.variant == "quanvu":
            lvl = self.quanv_level
            if not 0 <= lvl < len(self.widths) or len(self.quanv_channels) != 3:
                raise ConfigError("quanvolution needs a valid level and exactly three channels")
            if self.level_sizes[lvl] % 2:
                raise ConfigError(f"quanvolution needs an even plane size, got {self.level_sizes[lvl]}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def _downsample_geometry(n_in: int, n_out: int) -> tuple[int, int, int]:
    """(kernel, stride, padding) of the 3x3 conv taking an ``n_in`` plane to ``n_out``."""
    for stride, pad in ((2, 1), (3, 0)) if n_in != 2 * n_out else ((2, 1),):
        if T.conv_output_size(n_in, 3, stride, pad) == n_out:
            return 3, stride, pad
    raise ConfigError(f"no 3x3 stride-2/3 conv maps {n_in}x{n_in} to {n_out}x{n_out}")


# --------------------------------------------------------------- layers


@dataclass
class ParamSpec:
    shape: tuple
    init: str  # "uniform", "ones", "zeros", "angle"
    fan_in: int = 1


class Layer:
    name: str

    def params(self) -> dict[str, ParamSpec]:
        return {}


class Conv(Layer):
    def __init__(self, name, cin, cout, k=3, stride=1, padding=None):
        self.name, self.cin, self.cout, self.k, self.stride = name, cin, cout, k, stride
        self.padding = k // 2 if padding is None else padding

    def params(self):
        fan = self.cin * self.k * self.k
        return {f"{self.name}.w": ParamSpec((self.cout, self.cin, self.k, self.k), "uniform", fan),
                f"{self.name}.b": ParamSpec((self.cout,), "uniform", fan)}

    def __call__(self, P, h):
        return T.conv2d(h, P[f"{self.name}.w"], P[f"{self.name}.b"], self.stride, self.padding)

    def out_size(self, n):
        return T.conv_output_size(n, self.k, self.stride, self.padding)


class Linear(Layer):
    def __init__(self, name, cin, cout):
        self.name, self.cin, self.cout = name, cin, cout

    def params(self):
        return {f"{self.name}.w": ParamSpec((self.cout, self.cin), "uniform", self.cin),
                f"{self.name}.b": ParamSpec((self.cout,), "uniform", self.cin)}

    def __call__(self, P, h):
        return T.linear(h, P[f"{self.name}.w"], P[f"{self.name}.b"])


class Norm(Layer):
    def __init__(self, name, c):
        self.name, self.c, self.groups = name, c, T.default_groups(c)

    def params(self):
        return {f"{self.name}.g": ParamSpec((self.c,), "ones"), f"{self.name}.b": ParamSpec((self.c,), "zeros")}

    def __call__(self, P, h):
        return T.group_norm(h, self.groups, P[f"{self.name}.g"], P[f"{self.name}.b"])


class Attention(Layer):
    def __init__(self, name, c, heads):
        self.name, self.c, self.heads = name, c, heads
        self.norm = Norm(f"{name}.norm", c)
        self.qkv = Linear(f"{name}.qkv", c, 3 * c)
        self.out = Linear(f"{name}.out", c, c)

    def params(self):
        return {**self.norm.params(), **self.qkv.params(), **self.out.params()}

    def __call__(self, P, h):
        n = self.name
        return T.attention(h, P[f"{n}.norm.g"], P[f"{n}.norm.b"], P[f"{n}.qkv.w"], P[f"{n}.qkv.b"],
                           P[f"{n}.out.w"], P[f"{n}.out.b"], heads=self.heads, groups=self.norm.groups)


@dataclass
class CircuitAssignment:
    """One circuit of a hybrid conv: which channels feed its qubits and which outputs are kept.

    ``inputs`` lists a channel index (or ``None`` for a zero pad) per 4-qubit
    block; ``outputs`` pairs a block index with the output channel it fills.
    """

    inputs: tuple
    outputs: tuple
    theta_name: str


@dataclass
class HybridVertexPlan:
    channels: int
    assignments: list = field(default_factory=list)
    classical_channels: tuple = ()

    def quantum_channels(self) -> list[int]:
        return [c for a in self.assignments for _, c in a.outputs]

    def validate(self):
        out = self.quantum_channels()
        if len(set(out)) != len(out):
            raise ConfigError("two circuits write the same output channel")
        if set(out) & set(self.classical_channels):
            raise ConfigError("a channel is assigned to both a circuit and the classical conv")
        if sorted(out + list(self.classical_channels)) != list(range(self.channels)):
            raise ConfigError("plan does not cover every channel exactly once")
        return self


def make_vertex_plan(prefix: str, channels: int, n_circuits: int, full_fill: str = "overlap") -> HybridVertexPlan:
    """Consecutive channel triples from 0; circuit 14 covers the leftover channel of 40."""
    assignments = []
    n_triples = min(n_circuits, channels // 3)
    for j in range(n_triples):
        trip = (3 * j, 3 * j + 1, 3 * j + 2)
        assignments.append(CircuitAssignment(trip, tuple(enumerate(trip)), f"{prefix}.q{j}.theta"))
    covered = 3 * n_triples
    for j in range(n_triples, n_circuits):
        rest = list(range(covered, channels))
        if not rest:
            raise ConfigError(f"{n_circuits} circuits exceed what {channels} channels need")
        if full_fill == "overlap":
            trip = tuple(range(channels - 3, channels))
            outs = tuple((i, c) for i, c in enumerate(trip) if c >= covered)
        else:
            trip = tuple(rest[:3]) + (None,) * (3 - len(rest[:3]))
            outs = tuple((i, c) for i, c in enumerate(trip) if c is not None)
        assignments.append(CircuitAssignment(trip, outs, f"{prefix}.q{j}.theta"))
        covered += len(outs)
    quantum = {c for a in assignments for _, c in a.outputs}
    plan = HybridVertexPlan(channels, assignments, tuple(c for c in range(channels) if c not in quantum))
    return plan.validate()


def _block_tensor(h: Tensor, inputs) -> Tensor:
    """Stack the listed channels of ``h`` (``None`` giving zeros) into (B, len, H, W)."""
    if all(c is not None for c in inputs):
        return T.take(h, list(inputs), axis=1)
    B, _, H, W = h.shape
    parts = [T.take(h, [c], axis=1) if c is not None else T.constant(np.zeros((B, 1, H, W), h.data.dtype))
             for c in inputs]
    return T.concat(parts, axis=1)


class HybridConv(Layer):
    """3x3 conv at the 2x2 vertex with some output channels produced by circuits.

    Each circuit sees a full 2x2 plane of three channels (12 values, one per
    qubit); the classical remainder is an ordinary conv over the unassigned
    channels only.
    """

    def __init__(self, name, plan: HybridVertexPlan, spec: CircuitSpec, cfg: ModelConfig):
        self.name, self.plan, self.spec, self.cfg = name, plan, spec, cfg
        ncl = len(plan.classical_channels)
        self.classical = Conv(f"{name}.classical", ncl, ncl, 3) if ncl else None
        order = plan.quantum_channels() + list(plan.classical_channels)
        self.restore = np.argsort(order)

    def params(self):
        ps = {a.theta_name: ParamSpec((self.spec.n_trainable,), "angle") for a in self.plan.assignments}
        if self.classical:
            ps.update(self.classical.params())
        return ps

    def __call__(self, P, h):
        B, C, H, W = h.shape
        if (H, W) != (2, 2):
            raise ShapeError(f"circuit conv needs a 2x2 plane, got {H}x{W}")
        pieces = []
        for a in self.plan.assignments:
            blk = _block_tensor(h, a.inputs)
            angles = T.scale(T.tanh(T.reshape(blk, (B, -1))), self.cfg.angle_scale)
            z = T.quantum_node(angles, self.spec, P[a.theta_name], self.cfg.workers, self.cfg.gradient_method)
            pieces.append(T.take(T.reshape(z, blk.shape), [i for i, _ in a.outputs], axis=1))
        if self.classical:
            pieces.append(self.classical(P, T.take(h, list(self.plan.classical_channels), axis=1)))
        return T.take(T.concat(pieces, axis=1), self.restore, axis=1)


def quanvolve(h: Tensor, spec: CircuitSpec, theta: Tensor, angle_scale: float, workers=1, method="param_shift"):
    """Apply one shared circuit to every non-overlapping 2x2 patch of a (B, 3, H, W) tensor."""
    B, C, H, W = h.shape
    if H % 2 or W % 2:
        raise ShapeError(f"quanvolution needs even plane sizes, got {H}x{W}")
    p = T.transpose(T.reshape(h, (B, C, H // 2, 2, W // 2, 2)), (0, 2, 4, 1, 3, 5))
    rows = T.reshape(p, (B * (H // 2) * (W // 2), C * 4))
    z = T.quantum_node(T.scale(T.tanh(rows), angle_scale), spec, theta, workers, method)
    z = T.transpose(T.reshape(z, (B, H // 2, W // 2, C, 2, 2)), (0, 3, 1, 4, 2, 5))
    return T.reshape(z, (B, C, H, W))


class QuanvConv(Layer):
    """3x3 conv whose output for three channels comes from a quanvolutional filter."""

    def __init__(self, name, channels: int, quantum: tuple, spec: CircuitSpec, cfg: ModelConfig):
        self.name, self.spec, self.cfg, self.quantum = name, spec, cfg, tuple(quantum)
        self.rest = tuple(c for c in range(channels) if c not in self.quantum)
        self.classical = Conv(f"{name}.classical", len(self.rest), len(self.rest), 3)
        self.restore = np.argsort(list(self.quantum) + list(self.rest))

    def params(self):
        return {f"{self.name}.theta": ParamSpec((self.spec.n_trainable,), "angle"), **self.classical.params()}

    def __call__(self, P, h):
        q = quanvolve(T.take(h, list(self.quantum), axis=1), self.spec, P[f"{self.name}.theta"],
                      self.cfg.angle_scale, self.cfg.workers, self.cfg.gradient_method)
        c = self.classical(P, T.take(h, list(self.rest), axis=1))
        return T.take(T.concat([q, c], axis=1), self.restore, axis=1)


class ResBlock(Layer):
    """GN -> SiLU -> conv1 (+ time projection) -> GN -> SiLU -> conv2, plus (1x1) skip."""

    def __init__(self, name, cin, cout, temb, conv1=None, conv2=None):
        self.name, self.cin, self.cout = name, cin, cout
        self.norm1 = Norm(f"{name}.norm1", cin)
        self.conv1 = conv1 or Conv(f"{name}.conv1", cin, cout, 3)
        self.temb = Linear(f"{name}.temb", temb, cout)
        self.norm2 = Norm(f"{name}.norm2", cout)
        self.conv2 = conv2 or Conv(f"{name}.conv2", cout, cout, 3)
        self.skip = Conv(f"{name}.skip", cin, cout, 1) if cin != cout else None

    def sublayers(self):
        return [l for l in (self.norm1, self.conv1, self.temb, self.norm2, self.conv2, self.skip) if l]

    def params(self):
        out = {}
        for l in self.sublayers():
            out.update(l.params())
        return out

    def __call__(self, P, h, temb_act):
        y = self.conv1(P, T.silu(self.norm1(P, h)))
        y = T.add_channel(y, self.temb(P, temb_act))
        y = self.conv2(P, T.silu(self.norm2(P, y)))
        return T.add(self.skip(P, h) if self.skip else h, y)


# ---------------------------------------------------------------- model


class UNet:
    """Noise predictor ``eps(x_t, t)``; call as ``model(P, x, t)`` with ``P`` a name -> Tensor map."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg.validate()
        W, sizes, te = cfg.widths, cfg.level_sizes, cfg.time_embed_dim
        self.spec = None
        if cfg.hybrid:
            acfg = AnsatzConfig(cfg.ansatz, 3, 4, cfg.ansatz_layers, cfg.ansatz_wrap)
            self.spec = build_ansatz(acfg)
        self.sinusoid_dim = cfg.base_channels
        self.time1 = Linear("time.fc1", self.sinusoid_dim, te)
        self.time2 = Linear("time.fc2", te, te)
        self.stem = Conv("stem", cfg.in_channels, W[0], cfg.stem_kernel)
        self.layers: list[tuple] = []  # (op, layer, level) in execution order
        self.enc = []
        h, skips = W[0], [(0, W[0])]
        for l, w in enumerate(W):
            for i in range(cfg.blocks_per_level):
                name = f"enc.{l}.res{i}"
                conv1 = None
                if cfg.variant == "quanvu" and l == cfg.quanv_level and i == 0:
                    if h != w:
                        raise ConfigError("quanvolution block must not change the channel count")
                    conv1 = QuanvConv(f"{name}.conv1", w, cfg.quanv_channels, self.spec, cfg)
                blk = ResBlock(name, h, w, te, conv1=conv1)
                att = Attention(f"enc.{l}.attn{i}", w, cfg.heads) if l in cfg.attention_levels else None
                self.enc.append(("res", blk, att, l))
                h = w
                skips.append((l, h))
            nxt = W[l + 1] if l + 1 < len(W) else h
            n_in = sizes[l]
            n_out = sizes[l + 1] if l + 1 < len(W) else cfg.vertex_size
            k, s, p = _downsample_geometry(n_in, n_out)
            self.enc.append(("down", Conv(f"enc.{l}.down", h, nxt, k, s, p), None, l + 1))
            h = nxt
            skips.append((l + 1, h))
        V = len(W)
        C = h
        conv_a = conv_b = None
        self.vertex_plans = {}
        if cfg.hybrid:
            conv_a, conv_b = [], []
            for r in range(2):
                c1 = c2 = None
                if cfg.replace_convs in ("first", "both"):
                    plan = make_vertex_plan(f"mid.res{r}.conv1", C, cfg.n_circuits, cfg.full_fill)
                    c1 = HybridConv(f"mid.res{r}.conv1", plan, self.spec, cfg)
                    self.vertex_plans[c1.name] = plan
                if cfg.replace_convs in ("second", "both"):
                    plan = make_vertex_plan(f"mid.res{r}.conv2", C, cfg.n_circuits, cfg.full_fill)
                    c2 = HybridConv(f"mid.res{r}.conv2", plan, self.spec, cfg)
                    self.vertex_plans[c2.name] = plan
                conv_a.append(c1)
                conv_b.append(c2)
        else:
            conv_a = conv_b = [None, None]
        self.mid = [ResBlock("mid.res0", C, C, te, conv_a[0], conv_b[0]),
                    Attention("mid.attn", C, cfg.heads),
                    ResBlock("mid.res1", C, C, te, conv_a[1], conv_b[1])]
        self.dec = []
        j = 0
        while skips and skips[-1][0] == V:
            _, s = skips.pop()
            self.dec.append(("res", ResBlock(f"dec.v.res{j}", h + s, h, te), None, V))
            j += 1
        for l in reversed(range(V)):
            w = W[l]
            self.dec.append(("up", Conv(f"dec.{l}.up", h, w, 3), None, l))
            h = w
            i = 0
            while skips and skips[-1][0] == l:
                _, s = skips.pop()
                blk = ResBlock(f"dec.{l}.res{i}", h + s, w, te)
                att = Attention(f"dec.{l}.attn{i}", w, cfg.heads) if l in cfg.attention_levels else None
                self.dec.append(("res", blk, att, l))
                h = w
                i += 1
        self.head_norm = Norm("head.norm", h)
        self.head = Conv("head.conv", h, cfg.in_channels, 3)

    def all_layers(self) -> list[Layer]:
        out = [self.time1, self.time2, self.stem]
        for _, layer, att, _ in self.enc:
            out += [layer] + ([att] if att else [])
        out += self.mid
        for _, layer, att, _ in self.dec:
            out += [layer] + ([att] if att else [])
        return out + [self.head_norm, self.head]

    def param_specs(self) -> dict[str, ParamSpec]:
        out = {}
        for layer in self.all_layers():
            for k, v in layer.params().items():
                if k in out:
                    raise ConfigError(f"duplicate parameter name {k}")
                out[k] = v
        return out

    def init(self, seed: int = 0, names=None) -> ParamTree:
        """Fresh parameters; ``names`` restricts initialisation to a subset (same values as a full init)."""
        rng = np.random.default_rng(seed)
        tree = ParamTree()
        for k, ps in self.param_specs().items():
            if ps.init == "uniform":
                bound = 1.0 / math.sqrt(ps.fan_in)
                v = rng.uniform(-bound, bound, ps.shape)
            elif ps.init == "angle":
                v = rng.uniform(0.0, math.pi, ps.shape)
            elif ps.init == "ones":
                v = np.ones(ps.shape)
            else:
                v = np.zeros(ps.shape)
            if names is None or k in names:
                tree[k] = v
        return tree

    def vertex_names(self) -> list[str]:
        return [k for k in self.param_specs() if k.startswith(VERTEX_PREFIX)]

    def time_features(self, P, t) -> Tensor:
        emb = T.time_embedding(t, self.sinusoid_dim)
        return T.silu(self.time2(P, T.silu(self.time1(P, emb))))

    def __call__(self, P, x: Tensor, t) -> Tensor:
        cfg = self.cfg
        if x.data.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise ShapeError(f"model expects (B, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}), got {x.shape}")
        if np.size(t) != x.shape[0]:
            raise ShapeError(f"need one time step per image, got {np.size(t)} for {x.shape[0]}")
        temb = self.time_features(P, t)
        h = self.stem(P, x)
        skips = [h]
        for op, layer, att, _ in self.enc:
            h = layer(P, h, temb) if op == "res" else layer(P, h)
            if att:
                h = att(P, h)
            skips.append(h)
        h = self.mid[0](P, h, temb)
        h = self.mid[1](P, h)
        h = self.mid[2](P, h, temb)
        for op, layer, att, _ in self.dec:
            if op == "up":
                size = skips[-1].shape[2:]
                h = layer(P, T.upsample_nearest(h, size))
                continue
            h = layer(P, T.concat([h, skips.pop()], axis=1), temb)
            if att:
                h = att(P, h)
        return self.head(P, T.silu(self.head_norm(P, h)))

    def apply(self, params: ParamTree, x, t, grad: bool = False):
        """Run on numpy input; returns ``(output, leaves)`` where leaves is ``None`` unless ``grad``."""
        P = params.leaves() if grad else params.constants()
        out = self(P, T.constant(x), t)
        return out, (P if grad else None)

    def describe(self, batch: int = 1) -> list[dict]:
        """Layer table: name, kind, output shape, and parameter count of every layer."""
        rows, n = [], self.cfg.image_size
        specs = self.param_specs()

        def count(layer):
            return int(sum(np.prod(s.shape, dtype=np.int64) for s in layer.params().values()))

        def kind(layer):
            if isinstance(layer, ResBlock):
                inner = [type(c).__name__ for c in (layer.conv1, layer.conv2) if not isinstance(c, Conv)]
                return "QResBlock" if "HybridConv" in inner else "QuanResBlock" if "QuanvConv" in inner else "ResBlock"
            return type(layer).__name__

        def quantum_nodes(layer):
            convs = [layer.conv1, layer.conv2] if isinstance(layer, ResBlock) else [layer]
            total = 0
            for c in convs:
                if isinstance(c, HybridConv):
                    total += len(c.plan.assignments)
                elif isinstance(c, QuanvConv):
                    total += 1
            return total

        def row(layer, shape):
            return {"name": layer.name, "kind": kind(layer), "out_shape": [batch, *shape],
                    "params": count(layer), "quantum_nodes": quantum_nodes(layer)}

        rows.append(row(self.time1, ()) | {"out_shape": [batch, self.time1.cout]})
        rows.append(row(self.time2, ()) | {"out_shape": [batch, self.time2.cout]})
        rows.append(row(self.stem, (self.stem.cout, n, n)))
        skip_shapes = [(self.stem.cout, n, n)]
        for op, layer, att, _ in self.enc:
            if op == "down":
                n = layer.out_size(n)
            rows.append(row(layer, (layer.cout, n, n)))
            if att:
                rows.append(row(att, (att.c, n, n)))
            skip_shapes.append((layer.cout, n, n))
        for layer in self.mid:
            rows.append(row(layer, (self.cfg.vertex_channels, n, n)))
        for op, layer, att, _ in self.dec:
            if op == "up":
                n = skip_shapes[-1][1]
            else:
                skip_shapes.pop()
            rows.append(row(layer, (layer.cout, n, n)))
            if att:
                rows.append(row(att, (att.c, n, n)))
        rows.append(row(self.head_norm, (self.head_norm.c, n, n)))
        rows.append(row(self.head, (self.head.cout, n, n)))
        assert sum(r["params"] for r in rows) == sum(int(np.prod(s.shape)) for s in specs.values())
        return rows


def build_model(cfg: ModelConfig, seed: int = 0) -> tuple[ParamTree, UNet]:
    model = UNet(cfg)
    return model.init(seed), model


def count_parameters(tree: ParamTree) -> int:
    return tree.count()


def resnet_block(x: Tensor, t_emb: Tensor, weights: dict, name: str = "blk") -> Tensor:
    """Standalone classical ResNet block; ``weights`` maps ``{name}.*`` to Tensors."""
    cin, cout, te = x.shape[1], weights[f"{name}.conv1.w"].shape[0], t_emb.shape[1]
    return ResBlock(name, cin, cout, te)(weights, x, t_emb)


def qresnet_block(x: Tensor, t_emb: Tensor, plan: HybridVertexPlan, weights: dict, spec: CircuitSpec,
                  name: str = "blk", cfg: ModelConfig | None = None) -> Tensor:
    """ResNet block at the 2x2 vertex with its first conv replaced according to ``plan``."""
    cfg = cfg or ModelConfig(variant="qvu")
    C, te = x.shape[1], t_emb.shape[1]
    conv1 = HybridConv(f"{name}.conv1", plan, spec, cfg)
    return ResBlock(name, C, C, te, conv1=conv1)(weights, x, t_emb)


def quanresnet_block(x: Tensor, t_emb: Tensor, spec: CircuitSpec, weights: dict, name: str = "blk",
                     channels=(0, 1, 2), cfg: ModelConfig | None = None) -> Tensor:
    """ResNet block whose first conv uses a shared quanvolutional filter on ``channels``."""
    cfg = cfg or ModelConfig(variant="quanvu")
    C, te = x.shape[1], t_emb.shape[1]
    conv1 = QuanvConv(f"{name}.conv1", C, channels, spec, cfg)
    return ResBlock(name, C, C, te, conv1=conv1)(weights, x, t_emb)
