import math
import os
from pathlib import Path

import numpy as np
import pytest

from vnspipe.cli import (
    EXIT_ERROR,
    EXIT_GATE,
    EXIT_OK,
    ConfigError,
    emit_plot_data,
    main,
    parse_config,
    parse_config_text,
)


def _write(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return p


def _manifest(out):
    rows = {}
    for line in (out / "manifest.txt").read_text().splitlines()[1:]:
        name, digest, size = line.split(" ")[:3]
        rows[name] = (digest, int(size))
    return rows


def test_minimal_config_defaults(tmp_path):
    cfg = parse_config(_write(tmp_path, "domain.L = 1\n"))
    assert cfg["domain.L"] == 1.0
    assert cfg["grid.nx"] == 32 and cfg["flow.nu"] == 1.0
    assert cfg.section("gronwall") == {"kappa": 1.0, "alpha": 0.0, "T": 1.0}


@pytest.mark.parametrize("text, needle", [
    ("grid.nx = 2\n", "grid.nx"),
    ("domain.L = 1\ndomain.L = 2\n", "duplicate key 'domain.L'"),
    ("# comment\nnot.a.key = 3\n", "unknown key 'not.a.key'"),
    ("flow.u_max = -1\n", "flow.u_max"),
    ("domain.L\n", "expected key = value"),
    ("egc.points_file = missing.csv\n", "does not exist"),
])
def test_config_errors_name_key_and_line(tmp_path, text, needle):
    with pytest.raises(ConfigError) as err:
        parse_config(_write(tmp_path, text))
    msg = str(err.value)
    assert needle in msg
    lineno = len(text.rstrip("\n").splitlines())
    assert f":{lineno}:" in msg


def test_points_file_relative_to_config(tmp_path):
    (tmp_path / "pts.csv").write_text("x1,x2,v1,v2\n0,0,1,0\n")
    cfg = parse_config(_write(tmp_path, "egc.points_file = pts.csv\n"))
    assert Path(cfg["egc.points_file"]).exists()


def test_gronwall_prints_kappa_for_zero_alpha(tmp_path, capsys):
    cfg = _write(tmp_path, "gronwall.kappa = 1\ngronwall.alpha = 0\ngronwall.T = 1\n")
    assert main(["gronwall", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    assert "lambda = 1.0" in capsys.readouterr().out
    txt = (tmp_path / "o" / "gronwall.txt").read_text()
    assert "lambda: 1.0" in txt


def test_gronwall_gate_failure(tmp_path):
    cfg = _write(tmp_path, "gronwall.alpha = 1.5\n")
    out = tmp_path / "o"
    assert main(["gronwall", "--config", str(cfg), "--out", str(out)]) == EXIT_GATE
    assert "alpha < kappa/T" in (out / "gate_failure.txt").read_text()


def test_egc_check_offender(tmp_path):
    (tmp_path / "pts.csv").write_text("x1,x2,v1,v2\n-1,0.4,0.5,0.6\n-1,0.0,3.0,0.0\n")
    cfg = _write(tmp_path, "flow.u_max = 0.05\negc.condition = lateral\negc.points_file = pts.csv\n"
                           "egc.T = 2\n")
    out = tmp_path / "o"
    assert main(["egc-check", "--config", str(cfg), "--out", str(out)]) == EXIT_GATE
    offs = (out / "offenders.csv").read_text().splitlines()
    assert offs[0] == "s,x1,x2,v1,v2" and len(offs) == 2
    assert "Trapped" in (out / "offender_reasons.txt").read_text()


def test_trace_friction_only(tmp_path):
    cfg = _write(tmp_path, "trace.field = zero\ntrace.start = 0, 0, 2, 0\n")
    out = tmp_path / "o"
    assert main(["trace", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    info = dict(line.split(": ", 1) for line in (out / "exit.txt").read_text().splitlines())
    assert float(info["tau"]) == pytest.approx(math.log(2), abs=1e-8)
    traj = np.loadtxt(out / "trajectory.csv", delimiter=",", skiprows=1)
    assert traj.shape[1] == 5 and (out / "trajectory.png").stat().st_size > 0


def test_bad_config_exit_status(tmp_path):
    cfg = _write(tmp_path, "grid.nx = 2\n")
    assert main(["trace", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_ERROR
    assert main(["trace", "--threads", "0", "--out", str(tmp_path / "o")]) == EXIT_ERROR


def test_module_error_exit_status(tmp_path):
    # start outside the pipe is a module error, not a gate failure
    cfg = _write(tmp_path, "trace.start = 3, 0, 1, 0\n")
    out = tmp_path / "o"
    assert main(["trace", "--config", str(cfg), "--out", str(out)]) == EXIT_ERROR
    assert (out / "error.txt").exists()


def test_determinism_and_manifest(tmp_path):
    cfg = _write(tmp_path, "grid.nx = 8\ngrid.ny = 4\ndiagnostics.n = 16\ndiagnostics.restarts = 2\n")
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["diagnostics", "--config", str(cfg), "--out", str(a), "--seed", "5"]) == EXIT_OK
    assert main(["diagnostics", "--config", str(cfg), "--out", str(b), "--seed", "5"]) == EXIT_OK
    ma, mb = _manifest(a), _manifest(b)
    assert ma == mb
    listed = set(ma) | {"manifest.txt"}
    assert listed == {p.name for p in a.iterdir()}
    for name, (digest, size) in ma.items():
        assert (a / name).stat().st_size == size


def test_out_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("VNSPIPE_OUT", str(tmp_path / "env_out"))
    assert main(["gronwall"]) == EXIT_OK
    assert (tmp_path / "env_out" / "gronwall.txt").exists()


def test_emit_plot_data(tmp_path):
    p = emit_plot_data([], tmp_path / "empty.csv", ("t", "E"))
    assert p.read_text() == "t,E\n"
    p = emit_plot_data([[0.0, 1.5], [1.0, 2.5]], tmp_path / "s.csv", ("t", "E"))
    assert np.array_equal(np.loadtxt(p, delimiter=",", skiprows=1), [[0.0, 1.5], [1.0, 2.5]])
    with pytest.raises(ValueError):
        emit_plot_data([[1.0, 2.0, 3.0]], tmp_path / "bad.csv", ("t", "E"))


def test_evolve_trivial_run(tmp_path):
    cfg = _write(tmp_path, "grid.nx = 16\ngrid.ny = 8\nphase.nx = 4\nphase.ny = 4\nphase.nv1 = 4\n"
                           "phase.nv2 = 4\nfluid.dt = 0.01\nevolve.steps = 20\n")
    out = tmp_path / "o"
    assert main(["evolve", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    head = (out / "ledger.csv").read_text().splitlines()[0]
    assert head == "t,E,grad_diss,drag_diss,residual,M0,M2,M4,f_max"
    led = np.loadtxt(out / "ledger.csv", delimiter=",", skiprows=1)
    assert led.shape[0] == 21 and np.abs(led[:, 1]).max() < 1e-25
