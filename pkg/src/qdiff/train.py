"""Training loop, checkpoint bookkeeping and sampling helpers shared by the CLI and tests."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from . import tensor as T
from .data import Dataset, batches
from .diffusion import (NoiseSchedule, TrainingDivergence, adam_init, adam_step, ddpm_sample, ema_init,
                        ema_update, make_schedule, training_loss)
from .tensor import ParamTree
from .unet import ConfigError, ModelConfig, UNet

DESK_PROFILE = {"T": 200, "subset": 2000, "epochs": 2, "n_generate": 500}
FULL_PROFILE = {"T": 1000, "subset": None, "epochs": 20, "n_generate": 7000}


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    T: int = DESK_PROFILE["T"]
    batch_size: int = 64
    epochs: int = DESK_PROFILE["epochs"]
    subset: int | None = DESK_PROFILE["subset"]
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    ema_max_rate: float = 0.999
    p2_k: float = 1.0
    p2_gamma: float = 1.0
    max_steps: int | None = None  # stop early (smoke runs)

    def validate(self):
        if self.T < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("T and batch_size must be >= 1 and epochs >= 0")
        if self.subset is not None and self.subset < 1:
            raise ConfigError(f"subset must be positive, got {self.subset}")
        self.model.validate()
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        model = d.pop("model", {})
        return cls(model=model if isinstance(model, ModelConfig) else ModelConfig.from_dict(model), **d)


@dataclass
class TrainResult:
    params: ParamTree
    ema: ParamTree
    step_losses: list
    epoch_losses: list
    seconds: float


class JsonLog:
    """Append-only JSON-lines log (one record per call)."""

    def __init__(self, path):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def __call__(self, record: dict):
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def checkpoint_meta(cfg: TrainConfig, **extra) -> dict:
    return {"train": cfg.to_dict(), **extra}


def model_from_meta(meta: dict) -> tuple[TrainConfig, UNet]:
    cfg = TrainConfig.from_dict(meta["train"])
    return cfg, UNet(cfg.model)


def eps_fn(model: UNet, params: ParamTree):
    P = params.constants()
    return lambda x, t: model(P, x, t)


def train(cfg: TrainConfig, dataset: Dataset, out_dir=None, params: ParamTree | None = None,
          log=None, progress=None) -> TrainResult:
    """Train for ``cfg.epochs`` epochs; writes per-epoch checkpoints under ``out_dir`` when given."""
    cfg.validate()
    model = UNet(cfg.model)
    if params is None:
        params = model.init(cfg.seed)
    else:
        expected = model.param_specs()
        if list(params.keys()) != list(expected.keys()):
            raise ConfigError("initial parameters do not match the model layout")
    if cfg.subset is not None and cfg.subset < len(dataset):
        dataset = dataset.subset(cfg.subset)
    schedule = make_schedule(cfg.T)
    opt = adam_init(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    ema = ema_init(params, cfg.ema_max_rate)
    log = log or JsonLog(Path(out_dir) / "train_log.jsonl" if out_dir else None)
    out = Path(out_dir) if out_dir else None
    step_losses, epoch_losses = [], []
    start = time.time()
    step = 0
    for epoch in range(cfg.epochs):
        losses = []
        for x0 in batches(dataset, cfg.batch_size, cfg.seed, epoch):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            rng = np.random.default_rng([cfg.seed, 7, step])
            P = params.leaves()
            loss = training_loss(lambda x, t: model(P, x, t), x0, rng, schedule, cfg.p2_k, cfg.p2_gamma)
            grads = T.backward(loss, P)
            if not T.all_finite(grads.values()):
                raise TrainingDivergence(f"non-finite gradient at step {step}")
            params, opt = adam_step(params, grads, opt)
            ema = ema_update(ema, params, step)
            value = float(loss.data)
            losses.append(value)
            step_losses.append(value)
            log({"kind": "step", "epoch": epoch, "step": step, "loss": value, "elapsed": time.time() - start})
            if progress:
                progress(step, value)
            step += 1
        mean = float(np.mean(losses)) if losses else float("nan")
        epoch_losses.append(mean)
        log({"kind": "epoch", "epoch": epoch, "steps": len(losses), "mean_loss": mean, "elapsed": time.time() - start})
        if out:
            meta = checkpoint_meta(cfg, epoch=epoch, step=step)
            checkpoint.save(params, out / f"epoch_{epoch:03d}.qdck", meta)
            checkpoint.save(ema.shadow, out / f"ema_epoch_{epoch:03d}.qdck", meta)
    if out:
        meta = checkpoint_meta(cfg, epoch=cfg.epochs - 1, step=step)
        checkpoint.save(params, out / "final.qdck", meta)
        checkpoint.save(ema.shadow, out / "ema.qdck", meta)
    return TrainResult(params, ema.shadow, step_losses, epoch_losses, time.time() - start)


def sample(model: UNet, params: ParamTree, n: int, schedule: NoiseSchedule, seed: int = 0, batch_size: int = 64,
           variance: str = "beta") -> np.ndarray:
    cfg = model.cfg
    shape = (cfg.in_channels, cfg.image_size, cfg.image_size)
    return ddpm_sample(eps_fn(model, params), n, schedule, seed, shape, batch_size, variance)
