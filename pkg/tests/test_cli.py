"""Tests for the nerfreg command line: argument handling, exit codes and written outputs."""

import logging
from pathlib import Path

import pytest

from nerfreg.cli import build_parser, log_directory, main
from nerfreg.pipeline import write_json


@pytest.fixture(autouse=True)
def restore_root_logging():
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    for handler in root.handlers:
        if handler not in handlers:
            handler.close()
    root.handlers[:] = handlers
    root.setLevel(level)


def test_unknown_flag_writes_nothing(tmp_path):
    out = tmp_path / "out"
    with pytest.raises(SystemExit) as info:
        main(["plot", "--report", str(tmp_path / "r.json"), "--out", str(out), "--bogus"])
    assert info.value.code == 2
    assert not out.exists()


def test_missing_subcommand():
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 2


def test_train_nerf_needs_one_source():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["train-nerf", "--block", "a", "--manifest", "m.json"])


def test_missing_input_returns_one(tmp_path, capsys):
    out = tmp_path / "reg" / "registration.json"
    code = main(["register", "--source", str(tmp_path / "s.drgv"), "--target", str(tmp_path / "t.drgv"),
                 "--model", str(tmp_path / "absent.ckpt"), "--out", str(out)])
    assert code == 1
    assert "error:" in capsys.readouterr().err
    assert not out.exists()
    assert (tmp_path / "reg" / "nerfreg.log").exists()


def test_plot_empty_report(tmp_path):
    report = write_json(tmp_path / "report.json", {"objects": []})
    out = tmp_path / "plots"
    assert main(["plot", "--report", str(report), "--out", str(out)]) == 0
    assert (out / "nerfreg.log").exists()
    assert (out / "effective_config.txt").exists()
    assert not list(out.glob("*.png"))


def test_seed_and_config_file(tmp_path):
    config_file = tmp_path / "run.conf"
    config_file.write_text("reg.epochs=3\n")
    report = write_json(tmp_path / "report.json", {"objects": []})
    out = tmp_path / "plots"
    assert main(["plot", "--report", str(report), "--out", str(out), "--config", str(config_file),
                 "--seed", "42"]) == 0
    effective = (out / "effective_config.txt").read_text()
    assert "reg.epochs=3" in effective
    assert "synth.seed=42" in effective and "eval.seed=42" in effective


def test_bad_manifest_returns_one(tmp_path):
    manifest = tmp_path / "m.json"
    manifest.write_text("not json")
    assert main(["evaluate", "--manifest", str(manifest), "--out", str(tmp_path / "eval")]) == 1


def test_log_directory():
    assert log_directory(Path("runs/registration.json")) == Path("runs")
    assert log_directory(Path("runs/eval")) == Path("runs/eval")
