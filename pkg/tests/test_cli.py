import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from latent_twins import cli


@pytest.fixture
def run_root(tmp_path, monkeypatch):
    monkeypatch.setenv("LT_RUN_DIR", str(tmp_path / "runs"))
    return tmp_path / "runs"


def _run(capsys, *argv) -> tuple[int, Path | None]:
    rc = cli.main(list(argv))
    out = capsys.readouterr().out.strip().splitlines()
    return rc, (Path(out[-1]) if rc == 0 and out else None)


def _summary(path: Path) -> dict:
    _, rows = cli.read_rows(path)
    return {k: v for k, v in rows}


def test_simulate_ode_writes_config_and_trajectory(run_root, capsys):
    rc, out = _run(capsys, "simulate", "--system", "sir", "--seed", "3")
    assert rc == 0
    assert out.parent == run_root and out.name == "simulate-sir-s3-000"
    cfg = (out / "config.txt").read_text()
    assert "system = sir" in cfg and "seed = 3" in cfg
    data = np.loadtxt(out / "trajectory.csv", delimiter=",", skiprows=1)
    assert data.shape[1] == 4
    np.testing.assert_allclose(data[:, 1:].sum(axis=1), data[0, 1:].sum(), atol=1e-8)
    assert (out / "trajectory.png").exists()


def test_run_dirs_are_fresh(run_root, capsys):
    _, a = _run(capsys, "simulate", "--system", "harmonic", "--no-plots")
    _, b = _run(capsys, "simulate", "--system", "harmonic", "--no-plots")
    assert a != b and a.name.endswith("-000") and b.name.endswith("-001")


def test_config_file_and_flag_precedence(run_root, tmp_path, capsys):
    conf = tmp_path / "c.txt"
    conf.write_text("# comment\nsystem = sir\nseed = 7\n")
    rc, out = _run(capsys, "simulate", "--config", str(conf), "--seed", "2", "--no-plots")
    assert rc == 0 and out.name.startswith("simulate-sir-s2")


@pytest.mark.parametrize("argv", [
    ["simulate", "--system", "pendulum"],
    ["train", "--system", "sir", "--mode", "fancy"],
    ["train", "--system", "sir", "--baseline", "deeponet"],
    ["train", "--system", "sir", "--mode", "structured"],
    ["nonsense"],
])
def test_config_errors_exit_2(run_root, capsys, argv):
    assert cli.main(argv) == cli.EXIT_CONFIG


def test_unknown_config_key_exit_2(run_root, tmp_path, capsys):
    conf = tmp_path / "c.txt"
    conf.write_text("sytsem = sir\n")
    assert cli.main(["simulate", "--config", str(conf)]) == 2
    conf.write_text("seed = abc\n")
    assert cli.main(["simulate", "--config", str(conf)]) == 2


def test_missing_files(run_root, tmp_path, capsys):
    # an unreadable config file is a configuration problem; missing data files are i/o
    assert cli.main(["simulate", "--config", str(tmp_path / "nope.txt")]) == 2
    assert cli.main(["eval", "--system", "sir", "--model", str(tmp_path / "nope.lttw")]) == 4


def test_corrupt_model_is_reported(run_root, tmp_path, capsys):
    bad = tmp_path / "bad.lttw"
    bad.write_bytes(b"junk")
    assert cli.main(["eval", "--system", "sir", "--model", str(bad)]) in (2, 4)


def test_train_eval_report_cycle(run_root, capsys):
    rc, tr = _run(capsys, "train", "--system", "sir", "--epochs", "3", "--pairs", "256", "--no-plots")
    assert rc == 0
    s = _summary(tr / "summary.csv")
    assert int(s["params"]) == 283 and float(s["direct_mse"]) >= 0
    assert (tr / "metrics.csv").exists() and (tr / "profile.csv").exists()
    rc, ev = _run(capsys, "eval", "--system", "sir", "--model", str(tr / "twin.lttw"), "--no-plots")
    assert rc == 0 and (ev / "profile.csv").exists()
    rc, rep = _run(capsys, "report", "--run", str(tr))
    assert rc == 0
    assert list(tr.glob("*.png"))
    _, rows = cli.read_rows(rep / "figures.csv")
    assert rows


def test_lstm_baseline_train(run_root, capsys):
    rc, out = _run(capsys, "train", "--system", "harmonic", "--baseline", "lstm", "--epochs", "2",
                   "--samples", "200", "--no-plots")
    assert rc == 0
    assert int(_summary(out / "summary.csv")["params"]) == 542
    header, rows = cli.read_rows(out / "loss.csv")
    assert header == ["epoch", "train_mse", "val_mse"] and len(rows) == 2


def test_deterministic_reruns_are_byte_identical(run_root, capsys):
    argv = ["train", "--system", "harmonic", "--epochs", "3", "--pairs", "256", "--deterministic", "--no-plots"]
    _, a = _run(capsys, *argv)
    _, b = _run(capsys, *argv)
    for name in ("metrics.csv", "profile.csv", "summary.csv", "twin.lttw"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_simulate_swe(run_root, capsys):
    rc, out = _run(capsys, "simulate", "--system", "swe", "--grid", "16", "--no-plots")
    assert rc == 0
    _, rows = cli.read_rows(out / "invariants.csv")
    mass = np.array([float(r[1]) for r in rows])
    assert np.max(np.abs(mass - mass[0])) <= 1e-6 * max(1.0, abs(mass[0])) + 1e-6


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "latent_twins.cli", "simulate", "--system", "bogus"],
                       capture_output=True, text=True, env={"LT_RUN_DIR": str(tmp_path), "PATH": ""})
    assert r.returncode == 2 and "bogus" in r.stderr
