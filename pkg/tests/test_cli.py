import json
import subprocess
import sys

import pytest

from duplexfit.cli import dispatch
from duplexfit.config import validate_config

from test_harness import digest

TINY = """
n_frames = 4
image_size = 32
grid_spacing = 0.08
iterations = 4
minibatch = 2
photo_frames = 1
tex_resolution = 16
pose_width = 16
n_samples = 6
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "c.toml").write_text(TINY)
    return d


@pytest.fixture(scope="module")
def dataset(workdir):
    assert dispatch(["synth", "--config", str(workdir / "c.toml"), "--out", str(workdir / "d"), "--seed", "7"]) == 0
    return workdir / "d"


def test_synth_is_deterministic(workdir, dataset):
    assert dispatch(["synth", "--config", str(workdir / "c.toml"), "--out", str(workdir / "d2"), "--seed", "7"]) == 0
    assert digest(dataset) == digest(workdir / "d2")
    echoed = validate_config((dataset / "resolved_config.toml").read_text())
    assert echoed.seed == 7 and echoed.n_frames == 4
    assert validate_config(echoed.to_toml()) == echoed


def test_fit_then_eval(workdir, dataset, capsys):
    run = workdir / "run"
    assert dispatch(["fit", "--config", str(workdir / "c.toml"), "--data", str(dataset), "--out", str(run)]) == 0
    assert (run / "fit_report.json").exists() and (run / "losses.csv").exists()
    assert (run / "resolved_config.toml").exists()
    assert dispatch(["eval", "--run", str(run), "--split", "train"]) == 0
    rep = json.loads((run / "metrics_train.json").read_text())
    assert 0 <= rep["iou"] <= 1 and rep["split"] == "train"
    assert dispatch(["render", "--run", str(run), "--out", str(workdir / "views"), "--views", "2",
                     "--config", str(workdir / "c.toml")]) == 0
    assert len(list((workdir / "views").glob("view_*_alpha.png"))) == 2


def test_init_pose_dumps_diagnostics(workdir, dataset):
    out = workdir / "init"
    assert dispatch(["init-pose", "--config", str(workdir / "c.toml"), "--data", str(dataset), "--out", str(out)]) == 0
    d = json.loads((out / "init_pose.json").read_text())
    assert "g_pnp" in d and len(d["frames"]) == 4


def test_missing_run_is_runtime_error(tmp_path, capsys):
    assert dispatch(["eval", "--run", str(tmp_path / "nope")]) == 2
    assert "run.json" in capsys.readouterr().err


def test_usage_errors(tmp_path, capsys):
    assert dispatch([]) == 1
    assert dispatch(["fit", "--data", "x"]) == 1
    assert "usage" in capsys.readouterr().err
    bad = tmp_path / "bad.toml"
    bad.write_text("epsilon = -1\n")
    assert dispatch(["synth", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "epsilon" in capsys.readouterr().err


def test_check_grads_command(tmp_path, capsys):
    out = tmp_path / "grads.json"
    assert dispatch(["check-grads", "--probes", "3", "--out", str(out)]) == 0
    d = json.loads(out.read_text())
    assert all(r["passed"] for r in d.values()) and "total_objective" in d


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "duplexfit.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    assert "epsilon (default 0.05) [canonical units]" in r.stdout
    for cmd in ("synth", "init-pose", "fit", "render", "eval", "check-grads"):
        assert cmd in r.stdout
