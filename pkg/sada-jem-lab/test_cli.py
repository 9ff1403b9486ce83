"""
命令行测试：子命令、覆盖项与退出码
"""

import json

import pandas as pd
import pytest

from app.cli.commands.sweep import parse_axes
from app.core.errors import ConfigError, ExitCode
from app.main import main

DATA = "toy:gaussians8:n=256"
SMALL = ["--data", DATA, "--model.hidden", "16,16", "--train.batch_size", "64", "--sgld.k", "2",
         "--train.buffer_capacity", "256", "--eval.sample_n", "16"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    assert main(["train", *SMALL, "--epochs", "1", "--out", str(out)]) == ExitCode.SUCCESS
    return out


def read_json(path):
    return json.loads(path.read_text(encoding="utf-8"))


def test_train_writes_run_directory(trained):
    assert (trained / "config.json").exists() and (trained / "metrics.jsonl").exists()
    assert [p.name for p in (trained / "ckpt_").glob("epoch_*.jlab")] == ["epoch_0001.jlab"]
    assert read_json(trained / "config.json")["train"]["epochs"] == 1


def test_sample_command(trained, tmp_path):
    checkpoint = str(trained / "ckpt_" / "epoch_0001.jlab")
    out = tmp_path / "samples"
    code = main(["sample", "--data", DATA, "--checkpoint", checkpoint, "--n", "6", "--k", "2", "--class", "1",
                 "--out", str(out)])
    assert code == ExitCode.SUCCESS and (out / "samples.jlab").exists()
    assert main(["sample", "--data", DATA, "--checkpoint", checkpoint, "--n", "0", "--out", str(out)]) == 0
    assert main(["sample", "--data", DATA, "--checkpoint", checkpoint, "--class", "5",
                 "--out", str(out)]) == ExitCode.USAGE


def test_eval_command(trained, tmp_path):
    checkpoint = str(trained / "ckpt_" / "epoch_0001.jlab")
    assert main(["eval", "--data", DATA, "--checkpoint", checkpoint, "--out", str(tmp_path)]) == 0
    report = read_json(tmp_path / "report.json")
    assert 0.0 <= report["accuracy"] <= 1.0
    assert len(report["reliability"]["counts"]) == 20
    assert (tmp_path / "reliability.csv").exists()


def test_ood_against_same_distribution(trained, tmp_path):
    checkpoint = str(trained / "ckpt_" / "epoch_0001.jlab")
    code = main(["ood", "--data", DATA, "--checkpoint", checkpoint, "--eval.ood_data", DATA,
                 "--out", str(tmp_path)])
    assert code == ExitCode.SUCCESS
    frame = pd.read_csv(tmp_path / "ood.csv")
    assert frame["auroc"].iloc[0] == pytest.approx(0.5)
    assert (tmp_path / "ood_toy_gaussians8_n=256.json").exists()


def test_attack_at_zero_budget_matches_clean_accuracy(trained, tmp_path):
    checkpoint = str(trained / "ckpt_" / "epoch_0001.jlab")
    assert main(["attack", "--data", DATA, "--checkpoint", checkpoint, "--eval.eps", "[0]",
                 "--eval.pgd_steps", "2", "--out", str(tmp_path)]) == 0
    report = read_json(tmp_path / "report.json")
    assert len(report["robustness"]) == 1
    assert report["robustness"][0]["accuracy"] == pytest.approx(report["accuracy"])
    assert report["robustness"][0]["max_perturbation"] == 0.0


def test_landscape_command(trained, tmp_path):
    checkpoint = str(trained / "ckpt_" / "epoch_0001.jlab")
    assert main(["landscape", "--data", DATA, "--checkpoint", checkpoint, "--out", str(tmp_path)]) == 0
    result = read_json(tmp_path / "landscape_1d.json")
    assert len(result["energies"]) == 41
    assert result["energies"][20] == result["base_energy"]
    frame = pd.read_csv(tmp_path / "landscape_1d.csv", float_precision="round_trip")
    assert len(frame) == 41 and frame["energy"].iloc[20] == result["base_energy"]


def test_config_file_is_read(tmp_path):
    config = tmp_path / "run.conf"
    config.write_text(f"data = {DATA}\nsgld.k = 0\nepochs = 1\nmodel.hidden = 8,8\n", encoding="utf-8")
    out = tmp_path / "run"
    assert main(["train", "--config", str(config), "--train.baseline", "softmax", "--eval.sample_n", "0",
                 "--out", str(out)]) == 0
    saved = read_json(out / "config.json")
    assert saved["train"]["sgld"]["k"] == 0 and saved["train"]["baseline"] == "softmax"


@pytest.mark.parametrize("argv", [
    ["train", "--data", DATA, "--sgld.steps", "3"],
    ["train", "--data", DATA, "stray"],
    ["eval", "--data", DATA],
    ["sweep", "--data", DATA],
    ["sweep", "--data", DATA, "--axis", "sam.rho"],
])
def test_usage_errors_exit_two(argv, tmp_path):
    assert main([*argv, "--out", str(tmp_path)]) == ExitCode.USAGE


def test_missing_checkpoint_is_io_error(tmp_path):
    code = main(["eval", "--data", DATA, "--checkpoint", str(tmp_path / "absent.jlab"), "--out", str(tmp_path)])
    assert code == ExitCode.IO


def test_no_subcommand_prints_help(capsys):
    assert main([]) == ExitCode.USAGE
    assert "jemlab" in capsys.readouterr().out


def test_divergence_exits_one(tmp_path):
    out = tmp_path / "run"
    code = main(["train", *SMALL, "--epochs", "1", "--train.energy_bound", "1e-12", "--out", str(out)])
    assert code == ExitCode.DIVERGENCE
    assert (out / "diagnostic.json").exists()


def test_parse_axes():
    assert parse_axes(["sam.rho=0.05,0.2", "sam.variant=asam"]) == {"sam.rho": [0.05, 0.2], "sam.variant": ["asam"]}
    with pytest.raises(ConfigError):
        parse_axes(["sam.rho"])


def test_sweep_command(tmp_path):
    code = main(["sweep", *SMALL, "--epochs", "1", "--eval.sample_n", "0", "--axis", "sam.variant=none,asam",
                 "--out", str(tmp_path)])
    assert code == ExitCode.SUCCESS
    frame = pd.read_csv(tmp_path / "sweep.csv")
    assert list(frame["train.sam.variant"]) == ["none", "asam"]
    assert not frame["diverged"].any()
    assert (tmp_path / "point_000").is_dir() and (tmp_path / "point_001").is_dir()
