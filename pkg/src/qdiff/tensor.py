"""Small reverse-mode autodiff engine over numpy arrays.

Every op returns a :class:`Tensor` that remembers its parents and a closure
that pushes the output gradient back to them. The graph is the DAG formed by
those links; :func:`backward` walks it in reverse topological order, visiting
each node once. Tensors created from leaves that do not require gradients
record nothing, so inference runs without graph overhead.

Only the ops the U-Net needs are provided, and shapes must match exactly:
there is no implicit broadcasting except the explicit per-channel helpers.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from . import qsim

_DTYPE = np.float64


def set_precision(precision: str):
    """Switch the dtype used for new tensors: ``"double"`` (default) or ``"single"``."""
    global _DTYPE
    if precision not in ("double", "single"):
        raise ValueError(f"precision must be 'double' or 'single', got {precision!r}")
    _DTYPE = np.float64 if precision == "double" else np.float32


def get_dtype():
    return _DTYPE


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def constant(data) -> Tensor:
    return Tensor(data)


def leaf(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _node(data, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor, leaves: dict[str, Tensor] | None = None) -> dict[str, np.ndarray] | None:
    """Backpropagate from a scalar ``loss``.

    Gradients of earlier calls are cleared first, so repeated calls give
    identical results. When ``leaves`` is given, returns ``{name: grad}`` with
    zeros for leaves the loss does not depend on.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = topological_order(loss)
    for node in order:
        node.grad = None
    if leaves:
        for t in leaves.values():
            t.grad = None
    if loss.requires_grad:
        loss.grad = np.ones_like(loss.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                node.grad = None  # interior gradients are not needed once pushed to parents
    if leaves is None:
        return None
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}


def _same_shape(op: str, *ts: Tensor):
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise ShapeError(f"{op}: shapes differ {[t.shape for t in ts]}")


# ------------------------------------------------------------ elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _node(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _node(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)

    def bw(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _node(a.data * b.data, (a, b), bw)


def scale(a: Tensor, c) -> Tensor:
    """Multiply by a constant scalar or a constant array of the same shape."""
    c = np.asarray(c, dtype=a.data.dtype)
    if c.ndim and c.shape != a.shape:
        raise ShapeError(f"scale: constant shape {c.shape} vs tensor {a.shape}")
    return _node(a.data * c, (a,), lambda g: _accumulate(a, g * c))


def add_channel(x: Tensor, v: Tensor) -> Tensor:
    """Add a per-(batch, channel) vector ``v`` (N, C) to an image tensor ``x`` (N, C, H, W)."""
    if x.data.ndim != 4 or v.shape != x.shape[:2]:
        raise ShapeError(f"add_channel: {x.shape} + {v.shape}")

    def bw(g):
        _accumulate(x, g)
        _accumulate(v, g.sum(axis=(2, 3)))

    return _node(x.data + v.data[:, :, None, None], (x, v), bw)


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    return _node(x.data * sig, (x,), lambda g: _accumulate(x, g * sig * (1.0 + x.data * (1.0 - sig))))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: _accumulate(x, g * (1.0 - y * y)))


def square(x: Tensor) -> Tensor:
    return _node(x.data * x.data, (x,), lambda g: _accumulate(x, 2.0 * g * x.data))


# ------------------------------------------------------------- reductions


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.sum(x.data, axis=axis)

    def bw(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.shape))
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axes), x.shape))

    return _node(out, (x,), bw)


def mean(x: Tensor) -> Tensor:
    return scale(sum(x), 1.0 / x.data.size)


def dot(x: Tensor, w) -> Tensor:
    """Inner product of a 1-D tensor with a constant vector."""
    w = np.asarray(w, dtype=x.data.dtype)
    if x.data.ndim != 1 or w.shape != x.shape:
        raise ShapeError(f"dot: {x.shape} . {w.shape}")
    return _node(np.dot(x.data, w), (x,), lambda g: _accumulate(x, g * w))


# ---------------------------------------------------------------- shaping


def reshape(x: Tensor, shape) -> Tensor:
    return _node(x.data.reshape(shape), (x,), lambda g: _accumulate(x, g.reshape(x.shape)))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _node(np.transpose(x.data, axes), (x,), lambda g: _accumulate(x, np.transpose(g, inv)))


def concat(ts: Sequence[Tensor], axis: int = 1) -> Tensor:
    ref = ts[0].shape
    for t in ts:
        if len(t.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ShapeError(f"concat on axis {axis}: {[t.shape for t in ts]}")
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        for t, part in zip(ts, np.split(g, sizes, axis=axis)):
            _accumulate(t, part)

    return _node(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), bw)


def take(x: Tensor, indices, axis: int = 1) -> Tensor:
    """Gather along ``axis``; indices may repeat (gradients are summed)."""
    idx = np.asarray(indices, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (slice(None),) * axis + (idx,), g)
        _accumulate(x, full)

    return _node(np.take(x.data, idx, axis=axis), (x,), bw)


# ----------------------------------------------------------------- layers


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` over the last axis; ``w`` is (out, in)."""
    if x.shape[-1] != w.shape[1] or (b is not None and b.shape != (w.shape[0],)):
        raise ShapeError(f"linear: x {x.shape}, w {w.shape}, b {None if b is None else b.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def bw(g):
        _accumulate(x, g @ w.data)
        g2 = g.reshape(-1, g.shape[-1])
        _accumulate(w, g2.T @ x.data.reshape(-1, x.shape[-1]))
        if b is not None:
            _accumulate(b, g2.sum(axis=0))

    return _node(out, (x, w) if b is None else (x, w, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (leading axes must match)."""
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")

    def bw(g):
        _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    return _node(a.data @ b.data, (a, b), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _node(s, (x,), lambda g: _accumulate(x, s * (g - (g * s).sum(axis=axis, keepdims=True))))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    soft = np.exp(out)
    return _node(out, (x,), lambda g: _accumulate(x, g - soft * g.sum(axis=axis, keepdims=True)))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """``softmax(q k^T / sqrt(d)) v`` over the last two axes, saving only the attention weights."""
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    c = 1.0 / math.sqrt(q.shape[-1])
    z = (q.data @ np.swapaxes(k.data, -1, -2)) * c
    z -= z.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    probs = z

    def bw(g):
        _accumulate(v, np.swapaxes(probs, -1, -2) @ g)
        ds = g @ np.swapaxes(v.data, -1, -2)
        ds -= (ds * probs).sum(axis=-1, keepdims=True)
        ds *= probs * c
        _accumulate(q, ds @ k.data)
        _accumulate(k, np.swapaxes(ds, -1, -2) @ q.data)

    return _node(probs @ v.data, (q, k, v), bw)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW ``x`` with OIKK ``w``."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: x {x.shape}, w {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias {b.shape} for {w.shape[0]} output channels")
    N, C, H, W = x.shape
    O, K = w.shape[0], w.shape[2]
    Ho, Wo = conv_output_size(H, K, stride, padding), conv_output_size(W, K, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: kernel {K} does not fit {H}x{W} with padding {padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (K, K), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        if b is not None:
            _accumulate(b, g.sum(axis=(0, 2, 3)))
        _accumulate(w, np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])))
        if x.requires_grad and stride == 1 and padding <= K - 1:
            # full correlation of the output gradient with the flipped kernel
            q = K - 1 - padding
            gp = np.pad(g, ((0, 0), (0, 0), (q, q), (q, q))) if q else g
            gwin = np.lib.stride_tricks.sliding_window_view(gp, (K, K), axis=(2, 3))
            wf = w.data[:, :, ::-1, ::-1]
            _accumulate(x, np.tensordot(gwin, wf, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2))
        elif x.requires_grad:
            dwin = np.tensordot(g, w.data, axes=([1], [0]))  # N, Ho, Wo, C, K, K
            dxp = np.zeros_like(xp)
            for i in range(K):
                for j in range(K):
                    dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dwin[..., i, j].transpose(0, 3, 1, 2)
            _accumulate(x, dxp[:, :, padding : padding + H, padding : padding + W])

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, bw)


def group_norm(x: Tensor, groups: int, scale_: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    N, C = x.shape[:2]
    if C % groups:
        raise ShapeError(f"group_norm: {C} channels not divisible by {groups} groups")
    if scale_.shape != (C,) or shift.shape != (C,):
        raise ShapeError(f"group_norm: affine shapes {scale_.shape}, {shift.shape} for {C} channels")
    xg = x.data.reshape(N, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(xg.var(axis=2, keepdims=True) + eps)
    xhat = ((xg - mu) * inv).reshape(x.shape)
    bshape = (1, C) + (1,) * (x.data.ndim - 2)
    out = xhat * scale_.data.reshape(bshape) + shift.data.reshape(bshape)
    red = (0,) + tuple(range(2, x.data.ndim))

    def bw(g):
        _accumulate(shift, g.sum(axis=red))
        _accumulate(scale_, (g * xhat).sum(axis=red))
        if x.requires_grad:
            dxh = (g * scale_.data.reshape(bshape)).reshape(N, groups, -1)
            xh = xhat.reshape(N, groups, -1)
            dx = inv * (dxh - dxh.mean(axis=2, keepdims=True) - xh * (dxh * xh).mean(axis=2, keepdims=True))
            _accumulate(x, dx.reshape(x.shape))

    return _node(out, (x, scale_, shift), bw)


def default_groups(channels: int, max_groups: int = 8) -> int:
    """``min(max_groups, C)`` groups, falling back to one group when that does not divide C."""
    g = min(max_groups, channels)
    return g if channels % g == 0 else 1


def _nearest_matrix(n_out: int, n_in: int) -> np.ndarray:
    src = np.floor(np.arange(n_out) * (n_in / n_out)).astype(int)
    m = np.zeros((n_out, n_in), dtype=_DTYPE)
    m[np.arange(n_out), src] = 1.0
    return m


def upsample_nearest(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Nearest-neighbour resize of NCHW ``x`` to ``size`` (source index ``floor(i * in / out)``)."""
    Ay = _nearest_matrix(size[0], x.shape[2]).astype(x.data.dtype)
    Ax = _nearest_matrix(size[1], x.shape[3]).astype(x.data.dtype)
    out = np.einsum("yi,ncij,xj->ncyx", Ay, x.data, Ax, optimize=True)
    return _node(out, (x,), lambda g: _accumulate(x, np.einsum("yi,ncyx,xj->ncij", Ay, g, Ax, optimize=True)))


def attention(x: Tensor, norm_scale: Tensor, norm_shift: Tensor, w_qkv: Tensor, b_qkv: Tensor,
              w_out: Tensor, b_out: Tensor, heads: int = 4, groups: int | None = None) -> Tensor:
    """Multi-head self-attention over spatial positions with a residual connection.

    ``w_qkv`` is (3C, C) and ``w_out`` is (C, C). The input is group-normalized
    before the projections.
    """
    N, C, H, W = x.shape
    if C % heads:
        raise ShapeError(f"attention: {C} channels not divisible by {heads} heads")
    d = C // heads
    L = H * W
    h = group_norm(x, default_groups(C) if groups is None else groups, norm_scale, norm_shift)
    seq = transpose(reshape(h, (N, C, L)), (0, 2, 1))  # N, L, C
    qkv = linear(seq, w_qkv, b_qkv)  # N, L, 3C
    qkv = transpose(reshape(qkv, (N, L, 3, heads, d)), (2, 0, 3, 1, 4))  # 3, N, heads, L, d
    q = reshape(take(qkv, [0], axis=0), (N, heads, L, d))
    k = reshape(take(qkv, [1], axis=0), (N, heads, L, d))
    v = reshape(take(qkv, [2], axis=0), (N, heads, L, d))
    ctx = scaled_dot_attention(q, k, v)  # N, heads, L, d
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (N, L, C))
    out = linear(ctx, w_out, b_out)
    out = reshape(transpose(out, (0, 2, 1)), (N, C, H, W))
    return add(x, out)


def time_embedding(t, dim: int) -> Tensor:
    """Sinusoidal embedding ``[sin(t w_k), cos(t w_k)]`` with ``w_k = 10000**(-2k/dim)``."""
    if dim % 2:
        raise ShapeError(f"time embedding dim must be even, got {dim}")
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    freqs = 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)
    ang = t[:, None] * freqs[None, :]
    return constant(np.concatenate([np.sin(ang), np.cos(ang)], axis=1))


def quantum_node(x: Tensor, spec: qsim.CircuitSpec, theta: Tensor, workers: int = 1,
                 method: str = "param_shift") -> Tensor:
    """Run ``spec`` on each row of ``x`` (B, n_inputs); returns per-qubit <Z> (B, n_qubits).

    The backward pass uses parameter-shift gradients (``method="param_shift"``)
    or the equivalent adjoint sweep (``method="adjoint"``); both sum dtheta
    over rows and return dx per row.
    """
    if x.data.ndim != 2 or x.shape[1] != spec.n_inputs or theta.shape != (spec.n_trainable,):
        raise ShapeError(f"quantum_node: x {x.shape}, theta {theta.shape} for circuit "
                         f"({spec.n_inputs} inputs, {spec.n_trainable} params)")
    if method not in ("param_shift", "adjoint"):
        raise ValueError(f"unknown quantum gradient method {method!r}")
    X = x.data.astype(np.float64)
    th = theta.data.astype(np.float64)
    out = qsim.run_circuit_batch(spec, th, X, workers=workers)

    def bw(g):
        grad_fn = qsim.param_shift_batch if method == "param_shift" else qsim.adjoint_batch
        dth, dX = grad_fn(spec, th, X, np.asarray(g, dtype=np.float64), workers=workers)
        _accumulate(theta, dth)
        _accumulate(x, dX)

    return _node(out, (x, theta), bw)


class ParamTree(dict):
    """Flat mapping of dotted names to numpy arrays (classical weights and circuit parameters)."""

    def count(self) -> int:
        return int(np.sum([v.size for v in self.values()], dtype=np.int64)) if self else 0

    def copy(self) -> "ParamTree":
        return ParamTree({k: np.array(v, copy=True) for k, v in self.items()})

    def leaves(self) -> dict[str, Tensor]:
        return {k: leaf(v, name=k) for k, v in self.items()}

    def constants(self) -> dict[str, Tensor]:
        return {k: constant(v) for k, v in self.items()}

    def with_prefix(self, prefix: str) -> "ParamTree":
        return ParamTree({k: v for k, v in self.items() if k.startswith(prefix)})

    def same_topology(self, other: "ParamTree") -> bool:
        return list(self.keys()) == list(other.keys()) and all(self[k].shape == other[k].shape for k in self)


def tree_map(fn, *trees: ParamTree) -> ParamTree:
    first = trees[0]
    for t in trees[1:]:
        if list(t.keys()) != list(first.keys()):
            raise ValueError("parameter trees have different names")
    return ParamTree({k: fn(*(t[k] for t in trees)) for k in first})


def all_finite(arrays: Iterable[np.ndarray]) -> bool:
    return all(np.isfinite(a).all() for a in arrays)
