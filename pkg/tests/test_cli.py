import json
import os
import subprocess
import sys

import numpy as np
import pytest
from conftest import MNIST_DIR

from qdiff import checkpoint, cli, qsim
from qdiff.unet import ModelConfig, UNet

needs_mnist = pytest.mark.skipif(not any(MNIST_DIR.glob("train-images-idx3-ubyte*")), reason="MNIST files not present")


def run(*argv):
    return cli.main([str(a) for a in argv])


def files_under(root):
    return sorted(str(p.relative_to(root)) for p in root.rglob("*") if p.is_file())


@pytest.fixture
def in_tmp(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


# ------------------------------------------------------------ structure commands


def test_describe_lists_seven_quantum_nodes_per_hybrid_conv(capsys):
    assert run("describe", "--variant", "qvu", "--circuits", "7", "--ansatz", "hqconv") == 0
    lines = [ln for ln in capsys.readouterr().out.splitlines() if "quantum nodes:" in ln]
    assert len(lines) == 4
    assert all(": 7 quantum nodes:" in ln for ln in lines)
    assert all(len(ln.split("quantum nodes:")[1].split()) == 7 for ln in lines)


def test_describe_json_matches_model(capsys):
    assert run("describe", "--variant", "qvu", "--circuits", "1", "--replace-convs", "first", "--json") == 0
    desc = json.loads(capsys.readouterr().out)
    assert desc["hybrid_convs"] == {"mid.res0.conv1": ["mid.res0.conv1.q0.theta"],
                                    "mid.res1.conv1": ["mid.res1.conv1.q0.theta"]}
    assert desc["parameters"] == UNet(ModelConfig(variant="qvu", replace_convs="first")).init(0).count()


def test_describe_quanvolution(capsys):
    assert run("describe", "--variant", "quanvu", "--json") == 0
    desc = json.loads(capsys.readouterr().out)
    assert desc["quanvolution"] == ["enc.1.res0.conv1.theta"]


def test_count_params_table(capsys):
    assert run("count-params", "--json") == 0
    rows = {r["variant"]: r for r in json.loads(capsys.readouterr().out)}
    assert rows["classical"]["parameters"] == 483241
    assert rows["1hqconv"]["delta"] == -7992 and rows["7hqconv"]["delta"] == -42336


# ------------------------------------------------------------ config handling


def test_unknown_config_key_exits_1(in_tmp, capsys):
    (in_tmp / "c.json").write_text(json.dumps({"epochs": 1, "learning_rat": 0.1}))
    assert run("train", "--config", in_tmp / "c.json") == 1
    assert "learning_rat" in capsys.readouterr().err


def test_bad_values_exit_1(in_tmp):
    assert run("describe", "--circuits", "3", "--variant", "qvu") == 1
    assert run("train", "--config", in_tmp / "missing.toml") == 1
    (in_tmp / "bad.toml").write_text("epochs = = 2")
    assert run("train", "--config", in_tmp / "bad.toml") == 1


def test_config_precedence(in_tmp):
    (in_tmp / "c.toml").write_text('epochs = 5\nbatch-size = 16\nvariant = "qvu"\n')
    _, opts = cli.resolve(["train", "--config", str(in_tmp / "c.toml"), "--epochs", "3"])
    assert opts["epochs"] == 3 and opts["batch_size"] == 16 and opts["variant"] == "qvu"
    _, opts = cli.resolve(["train", "--full", "--config", str(in_tmp / "c.toml")])
    assert opts["epochs"] == 5 and opts["t_steps"] == 1000 and opts["subset"] == 0
    _, opts = cli.resolve(["train"])
    assert (opts["epochs"], opts["t_steps"], opts["subset"]) == (2, 200, 2000)


def test_full_profile_evaluate_size():
    _, opts = cli.resolve(["evaluate", "--full"])
    assert opts["n_generate"] == 7000


def test_missing_dataset_exits_2(in_tmp):
    assert run("train", "--data-dir", in_tmp / "nowhere", "--out-dir", in_tmp / "o") == 2


def test_missing_checkpoint_exits_2(in_tmp):
    assert run("sample", "--checkpoint", in_tmp / "none.qdck", "--out-dir", in_tmp / "o") == 2
    (in_tmp / "bad.qdck").write_bytes(b"QDCK" + bytes(20))
    assert run("sample", "--checkpoint", in_tmp / "bad.qdck", "--out-dir", in_tmp / "o") == 2


@needs_mnist
@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_3(in_tmp, capsys):
    code = run("train", "--subset", 64, "--batch-size", 32, "--epochs", 1, "--lr", 1e300, "--t-steps", 10,
               "--out-dir", in_tmp / "o")
    assert code == 3
    assert "divergence" in capsys.readouterr().err


# ------------------------------------------------------------ grad-check


def test_grad_check_report_is_byte_reproducible(in_tmp):
    assert run("grad-check", "--module", "diffusion", "--out-dir", in_tmp / "a") == 0
    assert run("grad-check", "--module", "diffusion", "--out-dir", in_tmp / "b") == 0
    a, b = (in_tmp / "a" / "gradcheck.json").read_bytes(), (in_tmp / "b" / "gradcheck.json").read_bytes()
    assert a == b
    assert run("grad-check", "--module", "diffusion", "--seed", 1, "--out-dir", in_tmp / "c") == 0
    assert (in_tmp / "c" / "gradcheck.json").read_bytes() != a


def test_grad_check_detects_sign_flip(in_tmp, monkeypatch, capsys):
    rules = dict(qsim.SHIFT_RULES)
    shifts, coeffs = rules["RX"]
    rules["RX"] = (shifts, tuple(-c for c in coeffs))
    monkeypatch.setattr(qsim, "SHIFT_RULES", rules)
    assert run("grad-check", "--module", "qsim", "--out-dir", in_tmp / "o") == 4
    captured = capsys.readouterr()
    assert "FAIL  qsim.param_shift.RX" in captured.out
    assert "qsim.param_shift.RX" in captured.err
    report = json.loads((in_tmp / "o" / "gradcheck.json").read_text())
    assert "qsim.param_shift.RX" in report["failed"] and not report["passed"]


# ------------------------------------------------------------ workflows


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    cwd = os.getcwd()
    os.chdir(root)
    try:
        code = cli.main(["train", "--variant", "classical", "--epochs", "1", "--subset", "256", "--out-dir", "run"])
    finally:
        os.chdir(cwd)
    return root, code


@needs_mnist
def test_train_smoke_reduces_loss(smoke_run):
    root, code = smoke_run
    assert code == 0
    log = [json.loads(ln) for ln in (root / "run" / "train_log.jsonl").read_text().splitlines()]
    steps = [r["loss"] for r in log if r["kind"] == "step"]
    (epoch,) = [r for r in log if r["kind"] == "epoch"]
    assert len(steps) == 4 and epoch["steps"] == 4
    assert steps[-1] < steps[0]
    assert epoch["mean_loss"] < steps[0]


@needs_mnist
def test_train_writes_only_under_out_dir(smoke_run):
    root, _ = smoke_run
    assert {p.name for p in root.iterdir()} == {"run"}
    names = files_under(root / "run")
    for stem in ("epoch_000", "ema_epoch_000", "final", "ema"):
        assert f"{stem}.qdck" in names and f"{stem}.qdck.json" in names
    assert "run_config.json" in names and "train_log.jsonl" in names


@needs_mnist
def test_sample_from_checkpoint(smoke_run, tmp_path):
    root, _ = smoke_run
    ckpt = root / "run" / "ema.qdck"
    argv = ["sample", "--checkpoint", ckpt, "--n", 2, "--batch-size", 1, "--seed", 3]
    # T=200 reverse steps for two images
    assert run(*argv, "--out-dir", tmp_path / "a") == 0
    assert run(*argv, "--out-dir", tmp_path / "b", "--batch-size", 2) == 0
    a, b = np.load(tmp_path / "a" / "samples.npy"), np.load(tmp_path / "b" / "samples.npy")
    assert a.shape == (2, 1, 28, 28) and np.abs(a).max() <= 1
    np.testing.assert_allclose(a, b, atol=1e-9)
    assert files_under(tmp_path / "a") == ["samples.npy", "samples.pgm", "samples.png"]


@needs_mnist
def test_transfer_zero_epochs_is_pure_surgery(smoke_run, tmp_path, capsys):
    root, _ = smoke_run
    src = root / "run" / "final.qdck"
    assert run("transfer", "--source", src, "--variant", "qvu", "--circuits", "1", "--ansatz", "fqconv",
               "--epochs", 0, "--out-dir", tmp_path / "t") == 0
    assert "reinit mid.res0.conv1.q0.theta" in capsys.readouterr().out
    source, final = checkpoint.load(src), checkpoint.load(tmp_path / "t" / "final.qdck")
    report = json.loads((tmp_path / "t" / "transfer_report.json").read_text())
    assert set(report["copied"]) | set(report["reinitialized"]) == set(final)
    assert all(final[k].tobytes() == source[k].tobytes() for k in report["copied"])
    assert all(k.startswith("mid.") for k in report["reinitialized"])
    surgery = checkpoint.load(tmp_path / "t" / "surgery.qdck")
    assert all(surgery[k].tobytes() == final[k].tobytes() for k in final)
    assert checkpoint.load_meta(tmp_path / "t" / "final.qdck")["train"]["model"]["ansatz"] == "FQConv"


@needs_mnist
def test_transfer_from_hybrid_source_exits_1(tmp_path):
    cfg = ModelConfig(variant="qvu")
    from qdiff.train import TrainConfig

    checkpoint.save(UNet(cfg).init(0), tmp_path / "h.qdck", {"train": TrainConfig(model=cfg).to_dict()})
    assert run("transfer", "--source", tmp_path / "h.qdck", "--epochs", 0, "--out-dir", tmp_path / "o") == 1


@needs_mnist
def test_evaluate_heldout_beats_noise(tmp_path):
    assert run("evaluate", "--source", "heldout", "--n-generate", 300, "--kid-subset-size", 100,
               "--kid-subsets", 5, "--out-dir", tmp_path / "e") == 0
    res = json.loads((tmp_path / "e" / "metrics.json").read_text())
    assert res["report"]["fid"] < res["uniform_noise_baseline"]["fid"]
    assert res["report"]["n_samples"] == 300
    assert set(files_under(tmp_path / "e")) == {"metrics.json", "evaluated.npy", "evaluated.pgm", "evaluated.png"}


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "qdiff.cli", "count-params"], capture_output=True, text=True,
                          cwd=tmp_path, timeout=120)
    assert proc.returncode == 0 and "classical" in proc.stdout
    assert list(tmp_path.iterdir()) == []
