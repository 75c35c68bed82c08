"""``qdiff`` command line: train, sample, evaluate, transfer, grad-check, count-params, describe.

Option values resolve as: built-in default < ``--full`` profile < ``--config``
file (JSON or TOML) < explicit flags. Config keys use the flag names with
dashes or underscores; unknown keys are rejected before any compute.

Exit codes: 0 ok, 1 configuration error, 2 data error, 3 numerical
divergence, 4 check failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, checks, data, metrics
from . import tensor as T
from .checkpoint import CheckpointError
from .diffusion import IncompatibleCheckpoint, TrainingDivergence, make_schedule, transfer_weights
from .train import DESK_PROFILE, FULL_PROFILE, JsonLog, TrainConfig, model_from_meta, sample, train
from .unet import FULL_CIRCUITS, ConfigError, ModelConfig, UNet

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE, EXIT_CHECK = 0, 1, 2, 3, 4
DEFAULT_EXTRACTOR = data.default_data_dir().parent / "extractor" / "mnist_features.qdck"
COUNT_VARIANTS = {
    "classical": {"variant": "classical"},
    "1hqconv": {"variant": "qvu", "n_circuits": 1, "ansatz": "HQConv"},
    "7hqconv": {"variant": "qvu", "n_circuits": 7, "ansatz": "HQConv"},
    "fullhqconv": {"variant": "qvu", "n_circuits": FULL_CIRCUITS, "ansatz": "HQConv"},
    "quanvu": {"variant": "quanvu", "n_circuits": 1, "ansatz": "HQConv"},
    "1fqconv": {"variant": "qvu", "n_circuits": 1, "ansatz": "FQConv"},
}


class DataError(RuntimeError):
    """Input files missing or unreadable."""


class CheckFailure(RuntimeError):
    """A verification suite reported a failure."""


# ------------------------------------------------------------- parsing


class _Options:
    """Registers flags with suppressed argparse defaults so explicit flags can be told apart."""

    def __init__(self, parser):
        self.parser = parser
        self.defaults: dict = {}

    def add(self, flag, default=None, **kw):
        dest = flag.lstrip("-").replace("-", "_")
        self.defaults[dest] = default
        if kw.get("action") not in ("store_true",):
            kw.setdefault("metavar", dest.upper())
        help_text = kw.pop("help", "")
        self.parser.add_argument(flag, dest=dest, default=argparse.SUPPRESS,
                                 help=f"{help_text} (default: {default})".strip(), **kw)


def _model_flags(o: _Options):
    o.add("--variant", "classical", choices=["classical", "qvu", "quanvu"], help="network variant")
    o.add("--circuits", "1", help="vertex circuits per hybrid conv: 1, 7 or full")
    o.add("--ansatz", "hqconv", choices=["hqconv", "fqconv"], help="circuit ansatz")
    o.add("--replace-convs", "both", choices=["first", "second", "both"], help="vertex convs that get circuits")
    o.add("--full-fill", "overlap", choices=["overlap", "zero_pad"], help="input of the 14th full-variant circuit")
    o.add("--gradient-method", "param_shift", choices=["param_shift", "adjoint"], help="circuit gradient backend")


def _common_flags(o: _Options, seed=True):
    o.add("--out-dir", "qdiff-out", help="directory for every file the command writes")
    o.add("--config", None, help="JSON or TOML file with option values")
    o.add("--threads", 1, type=int, help="worker threads for circuit simulation")
    if seed:
        o.add("--seed", 0, type=int, help="random seed")


def _train_flags(o: _Options):
    o.add("--epochs", DESK_PROFILE["epochs"], type=int, help="training epochs")
    o.add("--t-steps", DESK_PROFILE["T"], type=int, help="diffusion steps T")
    o.add("--batch-size", 64, type=int, help="batch size")
    o.add("--subset", DESK_PROFILE["subset"], type=int, help="number of training images (0 = all)")
    o.add("--lr", 1e-3, type=float, help="Adam learning rate")
    o.add("--p2-k", 1.0, type=float, help="P2 weighting offset k")
    o.add("--p2-gamma", 1.0, type=float, help="P2 weighting exponent")
    o.add("--max-steps", None, type=int, help="stop after this many optimizer steps")
    o.add("--data-dir", str(data.default_data_dir()), help="directory with the IDX files")
    o.add("--precision", "double", choices=["double", "single"], help="floating point width of activations")
    o.add("--full", False, action="store_true", help="full-scale profile (T=1000, all images, 20 epochs)")


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(prog="qdiff", description="Hybrid quantum-classical diffusion models.")
    sub = parser.add_subparsers(dest="command", required=True)
    registry = {}

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        registry[name] = _Options(p)
        return registry[name]

    o = command("train", "Train a noise predictor.")
    _model_flags(o), _train_flags(o), _common_flags(o)

    o = command("sample", "Draw images from a trained checkpoint.")
    o.add("--checkpoint", None, help="checkpoint written by train (its .json sidecar is required)")
    o.add("--n", 64, type=int, help="number of images")
    o.add("--batch-size", 64, type=int, help="images per sampling batch")
    o.add("--variance", "beta", choices=["beta", "posterior"], help="reverse-step variance")
    o.add("--precision", "double", choices=["double", "single"], help="floating point width of activations")
    _common_flags(o)

    o = command("evaluate", "Score generated images with FID, KID and IS.")
    o.add("--checkpoint", None, help="checkpoint to sample from")
    o.add("--source", "model", choices=["model", "noise", "heldout"],
          help="score model samples, uniform noise, or held-out real images")
    o.add("--n-generate", DESK_PROFILE["n_generate"], type=int, help="number of images scored")
    o.add("--batch-size", 64, type=int, help="images per sampling batch")
    o.add("--extractor", str(DEFAULT_EXTRACTOR), help="feature extractor checkpoint")
    o.add("--train-extractor", False, action="store_true", help="train a fresh extractor into the out dir")
    o.add("--kid-subsets", 100, type=int, help="KID subset draws")
    o.add("--kid-subset-size", 1000, type=int, help="KID subset size (capped by sample count)")
    o.add("--is-splits", 10, type=int, help="inception score splits")
    o.add("--data-dir", str(data.default_data_dir()), help="directory with the IDX files")
    o.add("--precision", "double", choices=["double", "single"], help="floating point width of activations")
    o.add("--full", False, action="store_true", help="full-scale profile (7000 images)")
    _common_flags(o)

    o = command("transfer", "Seed a model from a classical checkpoint outside the vertex, then fine-tune.")
    o.add("--source", None, help="classical checkpoint")
    _model_flags(o), _train_flags(o), _common_flags(o)
    o.defaults["epochs"] = 1

    o = command("grad-check", "Run the finite-difference and oracle suites.")
    o.add("--module", "all", choices=["all", *checks.MODULES], help="suite to run")
    o.add("--scale", 1, type=int, help="instance multiplier")
    _common_flags(o)

    o = command("count-params", "Parameter counts of the standard variants.")
    o.add("--json", False, action="store_true", help="print JSON instead of a table")
    _common_flags(o, seed=False)

    o = command("describe", "Layer table of one variant.")
    _model_flags(o)
    o.add("--json", False, action="store_true", help="print JSON instead of a table")
    _common_flags(o, seed=False)
    return parser, registry


def read_config_file(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    try:
        if p.suffix == ".toml":
            return tomllib.loads(p.read_text())
        return json.loads(p.read_text())
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse config file {p}: {exc}") from exc


def resolve(argv=None) -> tuple[str, dict]:
    """Parse ``argv`` and merge defaults, profile, config file and flags."""
    parser, registry = build_parser()
    ns = vars(parser.parse_args(argv))
    command = ns.pop("command")
    defaults = registry[command].defaults
    opts = dict(defaults)
    if ns.get("full"):
        profile = {"t_steps": FULL_PROFILE["T"], "subset": 0, "epochs": FULL_PROFILE["epochs"],
                   "n_generate": FULL_PROFILE["n_generate"]}
        opts.update({k: v for k, v in profile.items() if k in defaults})
    if ns.get("config"):
        raw = read_config_file(ns["config"])
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a table of option values")
        file_opts = {str(k).replace("-", "_"): v for k, v in raw.items()}
        unknown = sorted(set(file_opts) - set(defaults) - {"config"})
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {unknown}")
        opts.update(file_opts)
    opts.update(ns)
    return command, opts


def model_config(opts: dict) -> ModelConfig:
    circuits = str(opts["circuits"]).lower()
    n = FULL_CIRCUITS if circuits == "full" else int(circuits) if circuits.isdigit() else None
    if n is None:
        raise ConfigError(f"--circuits must be 1, 7 or full, got {opts['circuits']!r}")
    return ModelConfig(variant=opts["variant"], n_circuits=n, ansatz=opts["ansatz"],
                       replace_convs=opts["replace_convs"], full_fill=opts["full_fill"],
                       gradient_method=opts["gradient_method"], workers=int(opts["threads"])).validate()


def train_config(opts: dict) -> TrainConfig:
    subset = opts["subset"]
    return TrainConfig(model=model_config(opts), T=int(opts["t_steps"]), batch_size=int(opts["batch_size"]),
                       epochs=int(opts["epochs"]), subset=int(subset) if subset else None, seed=int(opts["seed"]),
                       lr=float(opts["lr"]), p2_k=float(opts["p2_k"]), p2_gamma=float(opts["p2_gamma"]),
                       max_steps=opts["max_steps"]).validate()


# ------------------------------------------------------------- helpers


def _load_dataset(data_dir, split="train") -> data.Dataset:
    try:
        return data.load_split(data_dir, split)
    except (FileNotFoundError, data.IdxFormatError) as exc:
        raise DataError(str(exc)) from exc


def _load_checkpoint(path, need_meta=True):
    if not path:
        raise ConfigError("a checkpoint path is required")
    try:
        tree = checkpoint.load(path)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint {path} does not exist") from exc
    except CheckpointError as exc:
        raise DataError(f"checkpoint {path}: {exc}") from exc
    meta = checkpoint.load_meta(path)
    if need_meta and meta is None:
        raise DataError(f"checkpoint {path} has no {path}.json sidecar describing its model")
    return tree, meta


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _save_images(out: Path, stem: str, images: np.ndarray):
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / f"{stem}.npy", images)
    grid = metrics.image_grid(images[:64])
    metrics.write_pgm(out / f"{stem}.pgm", grid)
    metrics.write_png(out / f"{stem}.png", grid)


def _progress(step, loss):
    print(f"step {step:5d}  loss {loss:.5f}", flush=True)


# ------------------------------------------------------------- commands


def cmd_train(opts: dict) -> int:
    cfg = train_config(opts)
    T.set_precision(opts["precision"])
    ds = _load_dataset(opts["data_dir"])
    out = Path(opts["out_dir"])
    _write_json(out / "run_config.json", {"command": "train", **cfg.to_dict()})
    result = train(cfg, ds, out, progress=_progress)
    print(f"epoch mean losses: {[round(v, 5) for v in result.epoch_losses]}  ({result.seconds:.0f} s)")
    return EXIT_OK


def cmd_transfer(opts: dict) -> int:
    cfg = train_config(opts)
    T.set_precision(opts["precision"])
    source, meta = _load_checkpoint(opts["source"], need_meta=False)
    if meta is not None and meta.get("train", {}).get("model", {}).get("variant", "classical") != "classical":
        raise IncompatibleCheckpoint("transfer source must be a classical checkpoint")
    tree, report = transfer_weights(source, cfg.model, seed=cfg.seed)
    out = Path(opts["out_dir"])
    _write_json(out / "transfer_report.json", report | {"source": str(opts["source"]), "epochs": cfg.epochs})
    checkpoint.save(tree, out / "surgery.qdck", {"train": cfg.to_dict(), "epoch": -1, "step": 0})
    print(f"copied {len(report['copied'])} tensors ({report['copied_scalars']} values), "
          f"re-initialised {len(report['reinitialized'])} ({report['reinitialized_scalars']} values)")
    for name in report["reinitialized"]:
        print(f"  reinit {name}")
    if cfg.epochs > 0:
        ds = _load_dataset(opts["data_dir"])
        result = train(cfg, ds, out, params=tree, progress=_progress)
        print(f"epoch mean losses: {[round(v, 5) for v in result.epoch_losses]}")
    else:
        checkpoint.save(tree, out / "final.qdck", {"train": cfg.to_dict(), "epoch": -1, "step": 0})
    return EXIT_OK


def cmd_sample(opts: dict) -> int:
    T.set_precision(opts["precision"])
    tree, meta = _load_checkpoint(opts["checkpoint"])
    cfg, model = model_from_meta(meta)
    model.cfg.workers = int(opts["threads"])
    imgs = sample(model, tree, int(opts["n"]), make_schedule(cfg.T), int(opts["seed"]), int(opts["batch_size"]),
                  opts["variance"])
    _save_images(Path(opts["out_dir"]), "samples", imgs)
    print(f"wrote {imgs.shape[0]} samples to {opts['out_dir']}")
    return EXIT_OK


def _extractor(opts: dict, out: Path):
    net = metrics.FeatureExtractor()
    if opts["train_extractor"]:
        train_ds = _load_dataset(opts["data_dir"], "train")
        test_ds = _load_dataset(opts["data_dir"], "test")
        params, acc = metrics.train_feature_extractor(train_ds, test_ds, seed=int(opts["seed"]))
        checkpoint.save(params, out / "extractor.qdck", {"test_accuracy": acc})
        return net, params
    params, _ = _load_checkpoint(opts["extractor"], need_meta=False)
    return net, params


def cmd_evaluate(opts: dict) -> int:
    T.set_precision(opts["precision"])
    out = Path(opts["out_dir"])
    seed, n = int(opts["seed"]), int(opts["n_generate"])
    net, ext = _extractor(opts, out)
    real = _load_dataset(opts["data_dir"], "train")
    source = opts["source"]
    if source == "model":
        tree, meta = _load_checkpoint(opts["checkpoint"])
        cfg, model = model_from_meta(meta)
        model.cfg.workers = int(opts["threads"])
        sched = make_schedule(cfg.T)
        sample_fn = lambda k: sample(model, tree, k, sched, seed, int(opts["batch_size"]))
    elif source == "noise":
        sample_fn = lambda k: np.random.default_rng([seed, 99]).uniform(-1, 1, (k, 1, 28, 28))
    else:
        held = _load_dataset(opts["data_dir"], "test")
        sample_fn = lambda k: held.subset(k, seed=seed).images
    kw = dict(kid_subset=int(opts["kid_subset_size"]), kid_subsets=int(opts["kid_subsets"]),
              is_splits=int(opts["is_splits"]))
    report, gen = metrics.evaluate(sample_fn, n, real, net, ext, seed=seed, **kw)
    noise = np.random.default_rng([seed, 99]).uniform(-1, 1, (n, 1, 28, 28))
    baseline, _ = metrics.evaluate(lambda k: noise[:k], n, real, net, ext, seed=seed, **kw)
    result = {"source": source, "report": json.loads(report.to_json()),
              "uniform_noise_baseline": json.loads(baseline.to_json())}
    _write_json(out / "metrics.json", result)
    _save_images(out, "evaluated", gen)
    print(report.to_json())
    print(f"uniform-noise FID baseline: {baseline.fid:.4f}")
    return EXIT_OK


def cmd_gradcheck(opts: dict) -> int:
    modules = checks.MODULES if opts["module"] == "all" else (opts["module"],)
    report = checks.run_checks(modules, seed=int(opts["seed"]), scale=int(opts["scale"]))
    text = checks.report_json(report)
    out = Path(opts["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "gradcheck.json").write_text(text + "\n")
    for row in report["checks"]:
        status = "PASS" if row["passed"] else "FAIL"
        print(f"{status}  {row['name']:<36s} max deviation {row['max_deviation']:.3e} (tol {row['tolerance']:.0e})")
    if not report["passed"]:
        raise CheckFailure(f"failed checks: {', '.join(report['failed'])}")
    return EXIT_OK


def parameter_table() -> list[dict]:
    rows = []
    base = None
    for label, kw in COUNT_VARIANTS.items():
        n = sum(int(np.prod(s.shape)) for s in UNet(ModelConfig(**kw)).param_specs().values())
        base = n if base is None else base
        rows.append({"variant": label, "parameters": n, "delta": n - base, "relative_pct": 100.0 * (n - base) / base})
    return rows


def cmd_count_params(opts: dict) -> int:
    rows = parameter_table()
    if opts["json"]:
        print(json.dumps(rows, indent=1))
    else:
        for r in rows:
            print(f"{r['variant']:<12s} {r['parameters']:>8d} {r['delta']:>8d} {r['relative_pct']:>8.3f}%")
    return EXIT_OK


def describe_model(cfg: ModelConfig) -> dict:
    model = UNet(cfg)
    rows = model.describe()
    circuits = {name: [a.theta_name for a in plan.assignments] for name, plan in model.vertex_plans.items()}
    quanv = [k for k in model.param_specs() if k.endswith(".theta") and not k.startswith("mid.")]
    return {"config": cfg.to_dict(), "layers": rows, "hybrid_convs": circuits, "quanvolution": quanv,
            "quantum_nodes": sum(len(v) for v in circuits.values()) + len(quanv),
            "parameters": sum(r["params"] for r in rows)}


def cmd_describe(opts: dict) -> int:
    desc = describe_model(model_config(opts))
    if opts["json"]:
        print(json.dumps(desc, indent=1))
        return EXIT_OK
    for r in desc["layers"]:
        shape = "x".join(str(d) for d in r["out_shape"])
        print(f"{r['name']:<18s} {r['kind']:<12s} {shape:<14s} {r['params']:>7d}  q={r['quantum_nodes']}")
    for conv, names in desc["hybrid_convs"].items():
        print(f"{conv}: {len(names)} quantum nodes: {' '.join(names)}")
    for name in desc["quanvolution"]:
        print(f"quanvolution filter: {name}")
    print(f"total parameters {desc['parameters']}, quantum nodes {desc['quantum_nodes']}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "sample": cmd_sample, "evaluate": cmd_evaluate, "transfer": cmd_transfer,
            "grad-check": cmd_gradcheck, "count-params": cmd_count_params, "describe": cmd_describe}


def main(argv=None) -> int:
    try:
        command, opts = resolve(argv)
        return COMMANDS[command](opts)
    except (ConfigError, IncompatibleCheckpoint) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergence as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except CheckFailure as exc:
        print(f"check failure: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
