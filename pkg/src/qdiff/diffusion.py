"""DDPM training and sampling mechanics.

Time steps are 0-based: ``t`` in ``0..T-1`` indexes ``beta[t]`` and
``alpha_bar[t] = prod(alpha[:t+1])``. The network sees the raw integer ``t``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import ParamTree, Tensor

EpsFn = Callable[[Tensor, np.ndarray], Tensor]


class TrainingDivergence(FloatingPointError):
    """Raised when the loss or the gradients stop being finite."""


class IncompatibleCheckpoint(ValueError):
    """Raised when a source tree cannot seed the requested target model."""


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def snr(self, t) -> np.ndarray:
        ab = self.alpha_bar[np.asarray(t)]
        return ab / (1.0 - ab)

    def posterior_variance(self) -> np.ndarray:
        prev = np.concatenate([[1.0], self.alpha_bar[:-1]])
        return self.beta * (1.0 - prev) / (1.0 - self.alpha_bar)


def make_schedule(T_steps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule; ``alpha_bar`` is accumulated step by step so each ratio is exact."""
    if int(T_steps) != T_steps or T_steps < 1:
        raise ValueError(f"T must be a positive integer, got {T_steps!r}")
    T_steps = int(T_steps)
    beta = np.linspace(beta_start, beta_end, T_steps) if T_steps > 1 else np.array([beta_start])
    if not ((beta > 0) & (beta < 1)).all():
        raise ValueError("betas must lie strictly inside (0, 1)")
    alpha = 1.0 - beta
    alpha_bar = np.empty(T_steps)
    acc = 1.0
    for i, a in enumerate(alpha):
        acc = acc * a
        alpha_bar[i] = acc
    return NoiseSchedule(beta, alpha, alpha_bar)


def _check_t(t, s: NoiseSchedule) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64).reshape(-1)
    if t.size and (t.min() < 0 or t.max() >= s.T):
        raise ValueError(f"time steps must lie in [0, {s.T}), got range [{t.min()}, {t.max()}]")
    return t


def q_sample(x0: np.ndarray, t, eps: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    """Closed-form ``sqrt(alpha_bar) x0 + sqrt(1 - alpha_bar) eps`` for each batch row."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ValueError(f"noise shape {eps.shape} differs from data shape {x0.shape}")
    t = _check_t(t, s)
    if t.size != x0.shape[0]:
        raise ValueError(f"need one time step per row, got {t.size} for {x0.shape[0]}")
    bshape = (-1,) + (1,) * (x0.ndim - 1)
    ab = s.alpha_bar[t].reshape(bshape)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def q_step(x_prev: np.ndarray, t: int, eps: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    """One forward step ``sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps``."""
    return np.sqrt(1.0 - s.beta[t]) * x_prev + np.sqrt(s.beta[t]) * eps


def p2_weight(t, s: NoiseSchedule, k: float = 1.0, gamma: float = 1.0) -> np.ndarray:
    """``1 / (k + SNR_t) ** gamma``."""
    return 1.0 / (k + s.snr(_check_t(t, s))) ** gamma


def training_loss(eps_fn: EpsFn, x0: np.ndarray, rng: np.random.Generator, s: NoiseSchedule,
                  k: float = 1.0, gamma: float = 1.0) -> Tensor:
    """Mean over the batch of ``w_t * ||eps_fn(x_t, t) - eps||^2`` with random ``t`` and ``eps``."""
    x0 = np.asarray(x0, dtype=np.float64)
    B = x0.shape[0]
    t = rng.integers(0, s.T, size=B)
    eps = rng.standard_normal(x0.shape)
    xt = q_sample(x0, t, eps, s)
    pred = eps_fn(T.constant(xt), t)
    if pred.shape != x0.shape:
        raise ValueError(f"model output {pred.shape} differs from data {x0.shape}")
    err = T.sum(T.square(T.sub(pred, T.constant(eps))), axis=tuple(range(1, x0.ndim)))
    loss = T.dot(err, p2_weight(t, s, k, gamma) / B)
    if not np.isfinite(loss.data):
        raise TrainingDivergence(f"loss became {float(loss.data)}")
    return loss


def ddpm_sample(eps_fn: EpsFn, n_images: int, s: NoiseSchedule, seed: int = 0, shape=(1, 28, 28),
                batch_size: int = 64, variance: str = "beta", clip: bool = True, start: int = 0) -> np.ndarray:
    """Ancestral sampling from ``x_T ~ N(0, I)`` down to ``t = 0``.

    Image ``i`` draws all of its noise from its own stream seeded by
    ``(seed, start + i)``, so outputs do not depend on batching.
    """
    if variance not in ("beta", "posterior"):
        raise ValueError(f"variance must be 'beta' or 'posterior', got {variance!r}")
    out = np.zeros((n_images,) + tuple(shape))
    sigma = np.sqrt(s.beta if variance == "beta" else s.posterior_variance())
    for lo in range(0, n_images, batch_size):
        hi = min(lo + batch_size, n_images)
        rngs = [np.random.default_rng([seed, start + i]) for i in range(lo, hi)]
        x = np.stack([r.standard_normal(shape) for r in rngs])
        for t in range(s.T - 1, -1, -1):
            eps = eps_fn(T.constant(x), np.full(hi - lo, t)).data
            coef = (1.0 - s.alpha[t]) / np.sqrt(1.0 - s.alpha_bar[t])
            mean = (x - coef * eps) / np.sqrt(s.alpha[t])
            if t > 0:
                z = np.stack([r.standard_normal(shape) for r in rngs])
                x = mean + sigma[t] * z
            else:
                x = mean
            if not np.isfinite(x).all():
                raise TrainingDivergence(f"sampler produced non-finite values at t={t}")
        out[lo:hi] = np.clip(x, -1.0, 1.0) if clip else x
    return out


# ------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: ParamTree
    v: ParamTree
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8


def adam_init(params: ParamTree, lr=1e-3, beta1=0.9, beta2=0.99, eps=1e-8) -> AdamState:
    zeros = T.tree_map(np.zeros_like, params)
    return AdamState(zeros, zeros.copy(), 0, lr, beta1, beta2, eps)


def adam_step(params: ParamTree, grads, state: AdamState) -> tuple[ParamTree, AdamState]:
    """Bias-corrected Adam; returns new trees and leaves the inputs untouched."""
    if list(grads.keys()) != list(params.keys()) or list(state.m.keys()) != list(params.keys()):
        raise ValueError("parameter, gradient and optimizer trees do not match")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**step, 1.0 - b2**step
    new_p, new_m, new_v = ParamTree(), ParamTree(), ParamTree()
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        new_p[k] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, step, state.lr, b1, b2, state.eps)


@dataclass
class EmaState:
    shadow: ParamTree
    max_rate: float = 0.999
    updates: int = field(default=0)


def ema_rate(step: int, max_rate: float = 0.999) -> float:
    return min(max_rate, (1.0 + step) / (10.0 + step))


def ema_init(params: ParamTree, max_rate: float = 0.999) -> EmaState:
    return EmaState(params.copy(), max_rate)


def ema_update(ema: EmaState, params: ParamTree, step: int) -> EmaState:
    if not ema.shadow.same_topology(params):
        raise ValueError("EMA shadow and parameters have different topology")
    r = ema_rate(step, ema.max_rate)
    shadow = ParamTree({k: r * ema.shadow[k] + (1.0 - r) * params[k] for k in params})
    return EmaState(shadow, ema.max_rate, ema.updates + 1)


# ------------------------------------------------------------- transfer


def transfer_weights(source: ParamTree, target_cfg, seed: int = 0):
    """Seed a model of ``target_cfg`` from ``source`` outside the vertex.

    Every tensor outside the ``mid.`` scope is copied by name; vertex tensors
    take a fresh init of the target model. Returns ``(tree, report)`` where the
    report lists copied and re-initialised names.
    """
    from .unet import VERTEX_PREFIX, UNet

    model = UNet(target_cfg)
    fresh = model.init(seed)
    vertex = {k for k in fresh if k.startswith(VERTEX_PREFIX)}
    src_outside = {k for k in source if not k.startswith(VERTEX_PREFIX)}
    tgt_outside = set(fresh) - vertex
    if src_outside != tgt_outside:
        missing = sorted(tgt_outside - src_outside)[:5]
        extra = sorted(src_outside - tgt_outside)[:5]
        raise IncompatibleCheckpoint(f"non-vertex names differ: target needs {missing}, source has extra {extra}")
    tree = ParamTree()
    for k, v in fresh.items():
        if k in vertex:
            tree[k] = v
        else:
            if source[k].shape != v.shape:
                raise IncompatibleCheckpoint(f"{k}: source shape {source[k].shape} vs target {v.shape}")
            tree[k] = np.array(source[k], copy=True)
    report = {"copied": sorted(tgt_outside), "reinitialized": sorted(vertex),
              "copied_scalars": int(sum(tree[k].size for k in tgt_outside)),
              "reinitialized_scalars": int(sum(tree[k].size for k in vertex))}
    return tree, report
