import json
import os

import numpy as np
import pytest

from bsf.cli import main
from bsf.config import TrainConfig, parse_config, write_config
from bsf.datasets import write_digit_corpus
from bsf.sepfilter import FilterLut


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    write_digit_corpus(d, n_train=400, n_test=80, seed=77)
    return d


def small_config(tmp_path, corpus_dir, **overrides):
    cfg = TrainConfig(
        arch="conv:4 pool fc:10",
        input="1x28x28",
        dataset="mnist",
        data_dir=str(corpus_dir),
        epochs=2,
        batch_size=50,
        seed=3,
        train_limit=200,
        test_limit=50,
    )
    for k, v in overrides.items():
        setattr(cfg, k, v)
    path = tmp_path / "run.cfg"
    write_config(cfg, path)
    return path


# --- config parsing ---------------------------------------------------------------


def test_config_roundtrip(tmp_path):
    path = tmp_path / "a.cfg"
    write_config(TrainConfig(epochs=7, lr_start=1e-2), path)
    cfg = parse_config(path)
    assert cfg.epochs == 7
    assert cfg.lr_start == 1e-2


def test_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "b.cfg"
    path.write_text("nonsense = 1\n")
    with pytest.raises(ValueError, match="unknown config key"):
        parse_config(path)


def test_config_comments_and_validation(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# a comment\nepochs = 3\n\nmode = separable-method1\n")
    cfg = parse_config(path)
    assert cfg.epochs == 3 and cfg.mode == "separable-method1"
    path.write_text("mode = bogus\n")
    with pytest.raises(ValueError):
        parse_config(path)


# --- subcommands --------------------------------------------------------------------


def test_build_lut_command(tmp_path, capsys):
    out = tmp_path / "lut.bin"
    assert main(["build-lut", "--d", "3", "--out", str(out)]) == 0
    captured = capsys.readouterr().out
    assert "512 filter keys -> 32 separable filters" in captured
    assert captured.count("code ") == 32
    lut = FilterLut.load(out)
    assert lut.num_separable == 32


def test_build_gradtable_command(tmp_path, capsys):
    out = tmp_path / "grad.bin"
    assert main(["build-gradtable", "--d", "2", "--out", str(out)]) == 0
    assert "degenerate" in capsys.readouterr().out


def test_verify_grad_command(capsys):
    assert main(["verify-grad", "--trials", "40", "--seed", "5"]) == 0
    out = capsys.readouterr().out
    assert "max relative error" in out
    # an impossible tolerance must flip the exit code
    assert main(["verify-grad", "--trials", "5", "--tol", "1e-30"]) == 1


def test_cost_command(tmp_path, capsys):
    cfg = tmp_path / "cifar.cfg"
    cfg.write_text(
        "arch = conv:128 conv:128 pool conv:256 conv:256 pool conv:512 conv:512 pool"
        " fc:1024 fc:1024 fc:10\ninput = 3x32x32\n"
    )
    out_json = tmp_path / "cost.json"
    assert main(["cost", "--config", str(cfg), "--json", str(out_json)]) == 0
    report = json.loads(out_json.read_text())
    assert report["layers"][1]["weight_bits_full"] == 147_456
    assert report["layers"][1]["weight_bits_sep"] == 81_920
    assert report["weight_ratio"] == 5 / 9
    assert report["mac_ratio"] == 6 / 9


def test_unknown_flag_usage_error():
    assert main(["build-lut", "--bogus"]) == 2
    assert main(["no-such-command"]) == 2


def test_missing_file_graceful_error(capsys):
    assert main(["analyze", "--model", "/nonexistent/model.bsfn"]) == 1
    assert "error:" in capsys.readouterr().err


def test_ripple_command(tmp_path, capsys):
    path = tmp_path / "metrics.csv"
    rows = ["epoch,train_loss,val_error"]
    x = np.arange(80)
    series = 0.3 + 0.001 * x + 0.05 * np.sin(x / 2)
    rows += [f"{i},0.5,{v:.17g}" for i, v in enumerate(series)]
    path.write_text("\n".join(rows) + "\n")
    assert main(["ripple", "--csv", str(path), "--column", "val_error"]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert set(stats) == {"mean", "std", "max"}
    assert stats["std"] > 0
    assert main(["ripple", "--csv", str(path), "--column", "missing"]) == 1


def test_train_eval_analyze_pipeline(tmp_path, corpus_dir, capsys):
    cfg_path = small_config(
        tmp_path, corpus_dir, mode="separable-method1",
        metrics_csv=str(tmp_path / "metrics.csv"),
        curve_csv=str(tmp_path / "curve.csv"),
        model_out=str(tmp_path / "model.bsfn"),
        val_checks_per_epoch=2,
    )
    assert main(["train", "--config", str(cfg_path)]) == 0
    out = capsys.readouterr().out
    assert "test_error" in out

    metrics = (tmp_path / "metrics.csv").read_text().splitlines()
    assert metrics[0] == "epoch,train_loss,val_error"
    assert len(metrics) == 3  # header + 2 epochs
    curve = (tmp_path / "curve.csv").read_text().splitlines()
    assert len(curve) == 1 + 2 * 2

    assert main(["eval", "--model", str(tmp_path / "model.bsfn"), "--data-dir",
                 str(corpus_dir), "--split", "test", "--limit", "50"]) == 0
    assert "error_rate" in capsys.readouterr().out

    report_path = tmp_path / "analysis.json"
    assert main(["analyze", "--model", str(tmp_path / "model.bsfn"),
                 "--json", str(report_path)]) == 0
    report = json.loads(report_path.read_text())
    assert report["layers"][0]["total"] == 4  # M*C of the single conv layer


def test_train_determinism_byte_identical_csv(tmp_path, corpus_dir):
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    cfg_a = small_config(tmp_path, corpus_dir, metrics_csv=str(a))
    assert main(["train", "--config", str(cfg_a)]) == 0
    cfg_b = small_config(tmp_path, corpus_dir, metrics_csv=str(b))
    assert main(["train", "--config", str(cfg_b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_bsf_seed_env_override(tmp_path, corpus_dir):
    a = tmp_path / "s3.csv"
    b = tmp_path / "s9.csv"
    cfg = small_config(tmp_path, corpus_dir, metrics_csv=str(a))
    assert main(["train", "--config", str(cfg)]) == 0
    os.environ["BSF_SEED"] = "9"
    try:
        cfg = small_config(tmp_path, corpus_dir, metrics_csv=str(b))
        assert main(["train", "--config", str(cfg)]) == 0
    finally:
        del os.environ["BSF_SEED"]
    assert a.read_bytes() != b.read_bytes()
