"""Finite-difference and oracle check suites behind ``qdiff grad-check``.

Each check returns a :class:`CheckResult` holding the worst deviation seen
and the tolerance it was held to. Results only depend on the seed.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import oracles, qsim
from . import tensor as T
from .ansatz import AnsatzConfig, build_ansatz
from .qsim import CircuitSpec, Gate, Input, Trainable

MODULES = ("qsim", "tensor", "unet", "diffusion")
FD_STEP = 1e-4
FD_STEP_CIRCUIT = 1e-5
REL_TOL = 1e-5
REL_FLOOR = 1e-3  # entries smaller than this are compared on an absolute 1e-8 scale


@dataclass
class CheckResult:
    name: str
    max_deviation: float
    tolerance: float
    instances: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_deviation) and self.max_deviation <= self.tolerance)

    def to_dict(self) -> dict:
        return asdict(self) | {"passed": self.passed}


def relative_error(analytic, numeric, floor: float = REL_FLOOR) -> float:
    """``max |a - n| / max(|n|, floor)`` over all entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(n), floor), initial=0.0))


# ------------------------------------------------------------------ qsim


def circuit_with_trainable_kind(rng, n_qubits: int, n_gates: int, kind: str) -> CircuitSpec:
    """Random circuit whose trainable and input slots sit only on ``kind`` gates."""
    spec = oracles.random_circuit(rng, n_qubits, n_gates)
    gates, n_tr, n_in = [], 0, 0
    for g in spec.gates:
        if g.kind == kind or rng.random() < 0.2:
            control = None
            if kind in qsim.CONTROLLED:
                control = g.control if g.control is not None else (g.target + 1) % n_qubits
            if rng.random() < 0.6:
                slot, n_tr = Trainable(n_tr), n_tr + 1
            else:
                slot, n_in = Input(n_in), n_in + 1
            g = Gate(kind, g.target, control, slot)
        gates.append(g)
    return CircuitSpec(n_qubits, gates, n_tr, n_in)


def _inputs_only(spec: CircuitSpec) -> CircuitSpec:
    """Same circuit with trainable slot ``k`` read from input ``n_inputs + k``."""
    gates = [Gate(g.kind, g.target, g.control, Input(spec.n_inputs + g.slot.value))
             if g.slot.kind == "trainable" else g for g in spec.gates]
    return CircuitSpec(spec.n_qubits, tuple(gates), 0, spec.n_inputs + spec.n_trainable)


def central_differences_batched(spec: CircuitSpec, theta, x, upstream, h: float = FD_STEP_CIRCUIT):
    """Central differences of ``upstream . <Z>`` in ``(theta, x)``, all shifted runs in one batch."""
    flat = _inputs_only(spec)
    z = np.concatenate([np.asarray(x, float), np.asarray(theta, float)])
    steps = h * np.eye(z.size)
    rows = np.concatenate([z + steps, z - steps])
    f = qsim.run_circuit_batch(flat, np.zeros(0), rows) @ np.asarray(upstream, float)
    g = (f[: z.size] - f[z.size :]) / (2 * h)
    return g[spec.n_inputs :], g[: spec.n_inputs]


def circuit_gradient_error(spec: CircuitSpec, theta, x, upstream, h: float = FD_STEP_CIRCUIT) -> float:
    """Parameter-shift gradients of ``upstream . <Z>`` against central differences."""
    dtheta, dx = qsim.param_shift_gradients(spec, theta, x, upstream)
    fd_theta, fd_x = central_differences_batched(spec, theta, x, upstream, h)
    err = 0.0
    if spec.n_trainable:
        err = max(err, relative_error(dtheta, fd_theta))
    if spec.n_inputs:
        err = max(err, relative_error(dx, fd_x))
    return err


def check_qsim(rng, scale: int = 1) -> list[CheckResult]:
    out = []
    worst = 0.0
    n = 10 * scale
    for _ in range(n):
        nq = int(rng.integers(1, 7))
        spec = oracles.random_circuit(rng, nq, int(rng.integers(1, 31)), n_trainable=2, n_inputs=2)
        theta, x = rng.uniform(-np.pi, np.pi, 2), rng.uniform(-np.pi, np.pi, 2)
        psi = qsim.simulate(spec, theta, x).amplitudes
        worst = max(worst, float(np.abs(psi - oracles.dense_statevector(spec, theta, x)).max()))
    out.append(CheckResult("qsim.simulate_vs_dense", worst, 1e-10, n))
    for kind in qsim.GATE_KINDS:
        worst = 0.0
        for _ in range(3 * scale):
            spec = circuit_with_trainable_kind(rng, 4, 12, kind)
            theta = rng.uniform(-np.pi, np.pi, spec.n_trainable)
            x = rng.uniform(-np.pi, np.pi, spec.n_inputs)
            worst = max(worst, circuit_gradient_error(spec, theta, x, rng.standard_normal(4)))
        out.append(CheckResult(f"qsim.param_shift.{kind}", worst, REL_TOL, 3 * scale))
    for name in ("HQConv", "FQConv"):
        spec = build_ansatz(AnsatzConfig(kind=name))
        worst = 0.0
        for _ in range(scale):
            theta = rng.uniform(0, np.pi, spec.n_trainable)
            x = rng.uniform(-np.pi, np.pi, spec.n_inputs)
            worst = max(worst, circuit_gradient_error(spec, theta, x, rng.standard_normal(spec.n_qubits)))
        out.append(CheckResult(f"qsim.param_shift.{name}", worst, REL_TOL, scale))
    spec = build_ansatz(AnsatzConfig())
    theta = rng.uniform(0, np.pi, spec.n_trainable)
    X = rng.uniform(-np.pi, np.pi, (3, spec.n_inputs))
    U = rng.standard_normal((3, spec.n_qubits))
    ps = qsim.param_shift_batch(spec, theta, X, U)
    ad = qsim.adjoint_batch(spec, theta, X, U)
    dev = max(relative_error(ad[0], ps[0]), relative_error(ad[1], ps[1]))
    out.append(CheckResult("qsim.adjoint_vs_param_shift", dev, 1e-10, 3))
    return out


# ---------------------------------------------------------------- tensor


def _gn_case(rng):
    C = int(rng.choice([2, 4, 6]))
    x = rng.standard_normal((2, C, 3, 3))
    return [x, rng.standard_normal(C), rng.standard_normal(C)], (lambda x, s, b: T.group_norm(x, C // 2, s, b))


def _conv_case(rng):
    k, s, p = [(3, 1, 1), (3, 2, 1), (1, 1, 0), (3, 3, 0), (5, 1, 2)][int(rng.integers(5))]
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    x = rng.standard_normal((2, cin, 6, 6))
    w = rng.standard_normal((cout, cin, k, k))
    return [x, w, rng.standard_normal(cout)], (lambda x, w, b: T.conv2d(x, w, b, stride=s, padding=p))


def _attention_case(rng):
    C, n = 8, int(rng.integers(1, 3))
    args = [rng.standard_normal((1, C, n, 2)), 1 + 0.1 * rng.standard_normal(C), 0.1 * rng.standard_normal(C),
            0.3 * rng.standard_normal((3 * C, C)), 0.1 * rng.standard_normal(3 * C),
            0.3 * rng.standard_normal((C, C)), 0.1 * rng.standard_normal(C)]
    # two norm groups keep each group large enough for a well-conditioned difference quotient
    return args, (lambda *a: T.attention(*a, heads=4, groups=2))


def _quantum_case(rng):
    spec = oracles.random_circuit(rng, 3, 8, n_trainable=2, n_inputs=3)
    return [rng.uniform(-2, 2, (2, 3)), rng.uniform(-np.pi, np.pi, 2)], (lambda x, th: T.quantum_node(x, spec, th))


def _upsample_case(rng):
    n, m = int(rng.integers(1, 4)), int(rng.integers(2, 8))
    return [rng.standard_normal((1, 2, n, n))], (lambda x: T.upsample_nearest(x, (m, m)))


TENSOR_CASES = {
    "add": lambda r: ([r.standard_normal((2, 3)), r.standard_normal((2, 3))], T.add),
    "sub": lambda r: ([r.standard_normal((2, 3)), r.standard_normal((2, 3))], T.sub),
    "mul": lambda r: ([r.standard_normal((2, 3)), r.standard_normal((2, 3))], T.mul),
    "scale": lambda r: ([r.standard_normal((3, 2))], lambda a: T.scale(a, -1.7)),
    "add_channel": lambda r: ([r.standard_normal((2, 3, 2, 2)), r.standard_normal((2, 3))], T.add_channel),
    "silu": lambda r: ([r.standard_normal((2, 5))], T.silu),
    "tanh": lambda r: ([r.standard_normal((2, 5))], T.tanh),
    "square": lambda r: ([r.standard_normal((2, 5))], T.square),
    "sum": lambda r: ([r.standard_normal((2, 3, 4))], lambda a: T.sum(a, axis=(1, 2))),
    "mean": lambda r: ([r.standard_normal((2, 3))], T.mean),
    "reshape": lambda r: ([r.standard_normal((2, 6))], lambda a: T.reshape(a, (3, 4))),
    "transpose": lambda r: ([r.standard_normal((2, 3, 4))], lambda a: T.transpose(a, (2, 0, 1))),
    "concat": lambda r: ([r.standard_normal((2, 1, 3)), r.standard_normal((2, 2, 3))], lambda a, b: T.concat([a, b], 1)),
    "take": lambda r: ([r.standard_normal((2, 5))], lambda a: T.take(a, [4, 0, 0, 2], axis=1)),
    "linear": lambda r: ([r.standard_normal((3, 4)), r.standard_normal((2, 4)), r.standard_normal(2)], T.linear),
    "matmul": lambda r: ([r.standard_normal((2, 3, 4)), r.standard_normal((2, 4, 2))], T.matmul),
    "softmax": lambda r: ([r.standard_normal((2, 5))], lambda a: T.softmax(a, axis=1)),
    "log_softmax": lambda r: ([r.standard_normal((2, 5))], lambda a: T.log_softmax(a, axis=1)),
    "scaled_dot_attention": lambda r: ([r.standard_normal((2, 3, 4)) for _ in range(3)], T.scaled_dot_attention),
    "conv2d": _conv_case,
    "group_norm": _gn_case,
    "upsample_nearest": _upsample_case,
    "attention": _attention_case,
    "quantum_node": _quantum_case,
}


def tensor_gradient_error(arrays, fn, rng, h: float = FD_STEP) -> float:
    """Backward of ``dot(fn(*inputs), R)`` against central differences on every input."""
    probe = None

    def scalar(*arrs):
        out = fn(*[T.constant(a) for a in arrs])
        return float(np.sum(out.data * probe))

    leaves = [T.leaf(np.array(a, dtype=np.float64), name=f"in{i}") for i, a in enumerate(arrays)]
    out = fn(*leaves)
    probe = rng.standard_normal(out.shape)
    grads = T.backward(T.dot(T.reshape(out, (-1,)), probe.reshape(-1)), {lf.name: lf for lf in leaves})
    err = 0.0
    for i, a in enumerate(arrays):
        def f_i(v, i=i):
            args = list(arrays)
            args[i] = v
            return scalar(*args)
        err = max(err, relative_error(grads[f"in{i}"], oracles.central_difference(f_i, a, h)))
    return err


def check_tensor(rng, scale: int = 1, instances: int = 3) -> list[CheckResult]:
    out = []
    for name, make in TENSOR_CASES.items():
        worst = 0.0
        n = instances * scale
        for _ in range(n):
            arrays, fn = make(rng)
            worst = max(worst, tensor_gradient_error(arrays, fn, rng))
        out.append(CheckResult(f"tensor.{name}", worst, REL_TOL, n))
    return out


# ------------------------------------------------------------------ unet


def tiny_model_config(**overrides):
    from .unet import ModelConfig

    base = dict(base_channels=4, time_embed_dim=8, blocks_per_level=1)
    return ModelConfig(**(base | overrides))


def directional_error(loss_fn, params, rng, n_dirs: int = 3, h: float = FD_STEP, names=None) -> float:
    """Compare ``grad . d`` with a central difference of ``loss`` along random unit directions ``d``."""
    P = params.leaves()
    grads = T.backward(loss_fn(P), P)
    keys = list(names or params.keys())
    err = 0.0
    for _ in range(n_dirs):
        d = {k: rng.standard_normal(params[k].shape) for k in keys}
        norm = np.sqrt(sum(float(np.sum(v * v)) for v in d.values()))
        d = {k: v / norm for k, v in d.items()}
        analytic = sum(float(np.sum(grads[k] * d[k])) for k in keys)

        def at(sign):
            moved = {k: T.constant(params[k] + sign * h * d[k]) if k in d else T.constant(params[k]) for k in params}
            return float(loss_fn(moved).data)

        numeric = (at(1) - at(-1)) / (2 * h)
        err = max(err, abs(analytic - numeric) / max(abs(numeric), REL_FLOOR))
    return err


def check_unet(rng, scale: int = 1) -> list[CheckResult]:
    from .unet import UNet

    out = []
    for label, cfg in (("classical", tiny_model_config()),
                       ("qvu", tiny_model_config(variant="qvu", replace_convs="first")),
                       ("quanvu", tiny_model_config(variant="quanvu"))):
        model = UNet(cfg)
        params = model.init(int(rng.integers(1 << 31)))
        x = rng.standard_normal((1, 1, 28, 28))
        t = rng.integers(0, 200, size=1)
        probe = rng.standard_normal((1, 1, 28, 28))

        def loss(P):
            y = model(P, T.constant(x), t)
            return T.dot(T.reshape(y, (-1,)), probe.reshape(-1))

        err = directional_error(loss, params, rng, n_dirs=2 * scale)
        out.append(CheckResult(f"unet.{label}.all_params", err, REL_TOL, 2 * scale))
        if cfg.hybrid:
            thetas = [k for k in params if k.endswith(".theta")]
            err = directional_error(loss, params, rng, n_dirs=scale, names=thetas)
            out.append(CheckResult(f"unet.{label}.circuit_params", err, REL_TOL, scale))
    return out


# ------------------------------------------------------------- diffusion


def check_diffusion(rng, scale: int = 1) -> list[CheckResult]:
    from .diffusion import make_schedule, training_loss
    from .tensor import ParamTree

    out = []
    worst = 0.0
    for steps in (1, 10, 200, 1000):
        s = make_schedule(steps)
        ratios = s.alpha_bar[1:] / s.alpha_bar[:-1]
        worst = max(worst, float(np.abs(ratios - s.alpha[1:]).max(initial=0.0)), abs(s.alpha_bar[0] - s.alpha[0]))
    out.append(CheckResult("diffusion.alpha_bar_ratio", worst, 1e-15, 4))
    s = make_schedule(50)
    x0 = rng.uniform(-1, 1, (4, 1, 3, 3))
    params = ParamTree(w=0.1 * rng.standard_normal((9, 9)), b=0.1 * rng.standard_normal(9))
    seed = int(rng.integers(1 << 31))

    def loss(P):
        def eps_fn(xt, t):
            h = T.linear(T.reshape(xt, (4, 9)), P["w"], P["b"])
            return T.reshape(T.tanh(h), (4, 1, 3, 3))
        return training_loss(eps_fn, x0, np.random.default_rng(seed), s)

    out.append(CheckResult("diffusion.weighted_loss", directional_error(loss, params, rng, 3 * scale), REL_TOL, 3 * scale))
    return out


SUITES = {"qsim": check_qsim, "tensor": check_tensor, "unet": check_unet, "diffusion": check_diffusion}


def run_checks(modules=MODULES, seed: int = 0, scale: int = 1) -> dict:
    """Run the named suites; each gets its own stream derived from ``(seed, suite index)``."""
    results = []
    for name in modules:
        if name not in SUITES:
            raise ValueError(f"unknown check module {name!r}; choose from {MODULES}")
        rng = np.random.default_rng([seed, MODULES.index(name)])
        results.extend(SUITES[name](rng, scale))
    rows = [r.to_dict() for r in results]
    return {"seed": seed, "modules": list(modules), "passed": all(r["passed"] for r in rows),
            "failed": [r["name"] for r in rows if not r["passed"]], "checks": rows}


def report_json(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=True)
