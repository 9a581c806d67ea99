"""Command line front end: flat key = value config, one subcommand per run,
CSV + figures + a hashed manifest in the output directory."""

from __future__ import annotations

import argparse
import hashlib
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_ERROR, EXIT_GATE = 0, 1, 2
SUBCOMMANDS = ("trace", "egc-check", "equilibrium", "evolve", "stability", "gronwall", "diagnostics")
OUT_ENV = "VNSPIPE_OUT"


class ConfigError(ValueError):
    pass


class GateFailure(RuntimeError):
    def __init__(self, gate: str, message: str = ""):
        super().__init__(f"gate failed: {gate}" + (f" ({message})" if message else ""))
        self.gate = gate


def _pair(s):
    vals = tuple(float(p) for p in s.split(","))
    if len(vals) != 2:
        raise ValueError("expected two comma separated numbers")
    return vals


def _quad(s):
    vals = tuple(float(p) for p in s.split(","))
    if len(vals) != 4:
        raise ValueError("expected four comma separated numbers")
    return vals


def _counts(s):
    vals = tuple(int(p) for p in s.split(","))
    if len(vals) not in (3, 4) or min(vals) < 1:
        raise ValueError("expected three or four positive integers")
    return vals


def _auto_float(s):
    return "auto" if s.strip() == "auto" else float(s)


def _bool(s):
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def _choice(*opts):
    def conv(s):
        if s not in opts:
            raise ValueError(f"expected one of {', '.join(opts)}")
        return s
    return conv


def _grid_int(s):
    n = int(s)
    if n < 4:
        raise ValueError("grid dimensions must be at least 4")
    return n


def _pos(conv):
    def f(s):
        v = conv(s)
        if not v > 0:
            raise ValueError("must be positive")
        return v
    return f


# key -> (converter, default)
SCHEMA = {
    "run.seed": (int, 0),
    "run.threads": (_pos(int), 1),
    "domain.L": (_pos(float), 1.0),
    "domain.tangency_tolerance": (float, 1e-12),
    "flow.u_max": (_pos(float), 0.05),
    "flow.lambda_profile": (float, 1.0),
    "flow.nu": (_pos(float), 1.0),
    "grid.nx": (_grid_int, 32),
    "grid.ny": (_grid_int, 16),
    "phase.nx": (_grid_int, 16),
    "phase.ny": (_grid_int, 12),
    "phase.nv1": (_grid_int, 16),
    "phase.nv2": (_grid_int, 16),
    "phase.v_box": (_pos(float), 8.0),
    "phase.trace_dt": (_pos(float), 1e-2),
    "kinetic.psi_amplitude": (float, 0.0),
    "kinetic.psi_x2_center": (float, 0.0),
    "kinetic.psi_x2_radius": (_pos(float), 0.7),
    "kinetic.psi_v_center": (_pair, (4.8, 0.0)),
    "kinetic.psi_v_radius": (_pos(float), 2.3),
    "kinetic.psi_omega": (float, 0.0),
    "kinetic.sl_safety": (_pos(float), 1.0),
    "kinetic.velocity_remap": (_choice("linear", "average", "point"), "linear"),
    "fluid.dt": (_pos(float), 1e-2),
    "fluid.cfl": (_pos(float), 1.0),
    "fluid.C_St": (_auto_float, "auto"),
    "trace.start": (_quad, (0.0, 0.0, 2.0, 0.0)),
    "trace.s": (float, 0.0),
    "trace.direction": (_choice("forward", "backward"), "forward"),
    "trace.horizon": (_pos(float), 10.0),
    "trace.dt": (_pos(float), 1e-3),
    "trace.field": (_choice("poiseuille", "zero"), "poiseuille"),
    "egc.condition": (_choice("lateral", "internal", "initial"), "initial"),
    "egc.x1": (_pair, (-0.5, 0.5)),
    "egc.x2": (_pair, (-0.5, 0.5)),
    "egc.v1": (_pair, (2.0, 4.0)),
    "egc.v2": (_pair, (-0.2, 0.2)),
    "egc.counts": (_counts, (5, 5, 5, 5)),
    "egc.points_file": (str, ""),
    "egc.T": (_pos(float), 2.0),
    "egc.times": (str, "0"),
    "egc.dt": (_pos(float), 1e-3),
    "egc.field": (_choice("poiseuille", "zero"), "poiseuille"),
    "equilibrium.T": (_pos(float), 2.0),
    "equilibrium.eps": (_auto_float, "auto"),
    "equilibrium.tol_fp": (_pos(float), 1e-10),
    "equilibrium.max_iter": (_pos(int), 50),
    "equilibrium.horizon": (_auto_float, "auto"),
    "equilibrium.egc_window": (_pos(float), 0.1),
    "evolve.steps": (int, 100),
    "evolve.snapshot_every": (int, 0),
    "evolve.start": (_choice("poiseuille", "equilibrium"), "poiseuille"),
    "stability.g0_amplitude": (float, 1e-7),
    "stability.w0_amplitude": (_auto_float, "auto"),
    "stability.horizon": (_pos(float), 8.0),
    "stability.dt": (_pos(float), 0.1),
    "stability.delta": (_auto_float, "auto"),
    "stability.K2_x1": (_pair, (-0.6, -0.2)),
    "stability.K2_x2": (_pair, (-0.3, 0.3)),
    "stability.K2_v1": (_pair, (3.0, 5.0)),
    "stability.K2_v2": (_pair, (-1.0, 1.0)),
    "stability.twin_reference": (_bool, True),
    "gronwall.kappa": (_pos(float), 1.0),
    "gronwall.alpha": (float, 0.0),
    "gronwall.T": (_pos(float), 1.0),
    "diagnostics.beta": (float, 0.0),
    "diagnostics.gamma": (float, 2.0),
    "diagnostics.n": (_grid_int, 64),
    "diagnostics.restarts": (_pos(int), 6),
}


@dataclass
class RunConfig:
    values: dict
    source: str | None = None
    lines: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def section(self, name: str) -> dict:
        pre = name + "."
        return {k[len(pre):]: v for k, v in self.values.items() if k.startswith(pre)}


def parse_config_text(text: str, source: str = "<string>") -> RunConfig:
    values = {k: d for k, (_, d) in SCHEMA.items()}
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} (first set on line {seen[key]})")
        seen[key] = lineno
        conv = SCHEMA[key][0]
        try:
            values[key] = conv(val)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    cfg = RunConfig(values, source, seen)
    pf = values["egc.points_file"]
    if pf:
        base = Path(source).parent if source and source != "<string>" else Path(".")
        p = Path(pf) if Path(pf).is_absolute() else base / pf
        if not p.exists():
            raise ConfigError(f"{source}:{seen['egc.points_file']}: referenced file {pf!r} does not exist")
        values["egc.points_file"] = str(p)
    return cfg


def parse_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, str(path))


# -------------------------------------------------------------------------
# output


class Output:
    """Collects written files for the manifest."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files = {}

    def path(self, name: str, note: str = "") -> Path:
        self.files[name] = note
        return self.root / name

    def text(self, name: str, body: str, note: str = ""):
        p = self.path(name, note)
        p.write_text(body if body.endswith("\n") else body + "\n")
        return p

    def manifest(self):
        lines = ["# file sha256 bytes note"]
        for name in sorted(self.files):
            data = (self.root / name).read_bytes()
            lines.append(f"{name} {hashlib.sha256(data).hexdigest()} {len(data)} {self.files[name]}")
        (self.root / "manifest.txt").write_text("\n".join(lines) + "\n")


def emit_plot_data(series, path, columns) -> Path:
    """CSV with one header line; an empty series gives a header-only file."""
    arr = np.asarray(series, dtype=float)
    if arr.size == 0:
        arr = arr.reshape(0, len(columns))
    if arr.ndim == 1:
        arr = arr.reshape(-1, len(columns))
    if arr.shape[1] != len(columns):
        raise ValueError(f"series has {arr.shape[1]} columns, header declares {len(columns)}")
    with open(path, "w") as fh:
        fh.write(",".join(columns) + "\n")
        for row in arr:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")
    return Path(path)


def _kv(d: dict) -> str:
    out = []
    for k, v in d.items():
        if isinstance(v, float):
            v = repr(v)
        out.append(f"{k}: {v}")
    return "\n".join(out)


# -------------------------------------------------------------------------
# building blocks from the config


def _domain(cfg):
    from vnspipe.geometry import PipeDomain
    return PipeDomain(cfg["domain.L"], cfg["domain.tangency_tolerance"])


def _flow(cfg):
    from vnspipe.geometry import PoiseuilleFlow
    return PoiseuilleFlow(cfg["flow.u_max"], cfg["flow.lambda_profile"], cfg["flow.nu"])


def _grid(cfg):
    from vnspipe.fields import MacGrid
    return MacGrid(_domain(cfg), cfg["grid.nx"], cfg["grid.ny"])


def _psi(cfg):
    from vnspipe.kinetic import InflowProfile, bump_profile
    amp = cfg["kinetic.psi_amplitude"]
    if amp == 0.0:
        return InflowProfile.zero()
    return bump_profile(amp, cfg["kinetic.psi_x2_center"], cfg["kinetic.psi_x2_radius"], cfg["kinetic.psi_v_center"],
                        cfg["kinetic.psi_v_radius"], cfg["kinetic.psi_omega"])


def _phase(cfg):
    from vnspipe.equilibrium import PhaseGrid
    dims = (cfg["phase.nx"], cfg["phase.ny"], cfg["phase.nv1"], cfg["phase.nv2"])
    return PhaseGrid(dims, cfg["phase.v_box"], cfg["phase.trace_dt"])


def _ext_field(cfg, kind):
    from vnspipe.fields import DiscreteVelocityField, extend_field
    g = _grid(cfg)
    u = DiscreteVelocityField.zeros(g) if kind == "zero" else DiscreteVelocityField.poiseuille(g, _flow(cfg))
    return extend_field(u)


def _stationary(cfg, out: Output | None, write=True):
    """Budget + fixed point. Returns (state, budget)."""
    from vnspipe import equilibrium as eq
    from vnspipe import fluid
    from vnspipe.fields import DiscreteVelocityField, field_norms

    g = _grid(cfg)
    flow = _flow(cfg)
    nu = cfg["flow.nu"]
    us = DiscreteVelocityField.poiseuille(g, flow)
    psi = _psi(cfg)
    T = cfg["equilibrium.T"]
    budget = None
    if psi.sup > 0:
        delta, _ = eq.egc_delta(us, psi, T, cfg["phase.trace_dt"], cfg["equilibrium.egc_window"])
        C = cfg["fluid.C_St"]
        if C == "auto":
            C = fluid.stokes_constant_estimate(g, nu, seed=cfg["run.seed"])
        eps = cfg["equilibrium.eps"]
        if eps == "auto":
            eps = 0.5 * min(1.0, delta / T, 1.0 / (6.0 * C))
        budget = eq.smallness_budget(T, eps, psi.R, C, field_norms(us).w1inf, psi.sup, delta)
        if out is not None:
            out.text("gates.txt", budget.report(), "smallness budget and gate status")
        if not budget.satisfied:
            raise GateFailure(",".join(budget.failed_gates()), "see gates.txt")
    hz = cfg["equilibrium.horizon"]
    st = eq.fixed_point(us, psi, _phase(cfg), budget, cfg["equilibrium.tol_fp"], cfg["equilibrium.max_iter"],
                        None if hz == "auto" else hz, nu, T)
    return st, budget


# -------------------------------------------------------------------------
# subcommands


def cmd_trace(cfg, out: Output, rng):
    from vnspipe.characteristics import PhaseState, entry_backward, exit_forward, trajectory
    from vnspipe.plotting import plot_trajectory

    fld = _ext_field(cfg, cfg["trace.field"])
    x1, x2, v1, v2 = cfg["trace.start"]
    st = PhaseState([x1, x2], [v1, v2], cfg["trace.s"])
    fwd = cfg["trace.direction"] == "forward"
    rec = (exit_forward if fwd else entry_backward)(st.t, st, fld, cfg["trace.horizon"], dt=cfg["trace.dt"])
    dur = (rec.tau - st.t) if not rec.trapped else (cfg["trace.horizon"] if fwd else -cfg["trace.horizon"])
    traj = trajectory(st, fld, dur, cfg["trace.dt"])
    emit_plot_data(traj, out.path("trajectory.csv", "columns t,x1,x2,v1,v2"), ("t", "x1", "x2", "v1", "v2"))
    plot_trajectory(traj, cfg["domain.L"], out.path("trajectory.png", "figure"))
    info = {"direction": rec.direction, "trapped": rec.trapped, "tau": rec.tau,
            "duration": abs(rec.tau - st.t) if not rec.trapped else math.inf,
            "boundary_class": str(rec.boundary_class) if rec.boundary_class else "none",
            "transversality": rec.transversality}
    out.text("exit.txt", _kv(info), "exit record")
    print(str(rec))
    return EXIT_OK


def cmd_egc_check(cfg, out: Output, rng):
    from vnspipe.characteristics import PhaseBox, check_initial_egc, check_internal_egc, check_lateral_egc
    from vnspipe.plotting import plot_egc

    fld = _ext_field(cfg, cfg["egc.field"])
    cond = cfg["egc.condition"]
    if cfg["egc.points_file"]:
        K = np.loadtxt(cfg["egc.points_file"], delimiter=",", skiprows=1, ndmin=2)[:, :4]
    else:
        counts = cfg["egc.counts"]
        if cond == "lateral":
            K = PhaseBox.lateral(_domain(cfg), cfg["egc.x2"], cfg["egc.v1"], cfg["egc.v2"], counts[-3:])
        else:
            counts = counts if len(counts) == 4 else (1,) + counts
            K = PhaseBox(cfg["egc.x1"], cfg["egc.x2"], cfg["egc.v1"], cfg["egc.v2"], counts)
    T = cfg["egc.T"]
    if cond == "lateral":
        times = [float(s) for s in cfg["egc.times"].split(",")]
        rep = check_lateral_egc(fld, K, T, times, dt=cfg["egc.dt"])
    elif cond == "internal":
        times = [float(s) for s in cfg["egc.times"].split(",")]
        rep = check_internal_egc(fld, K, T, times, dt=cfg["egc.dt"])
    else:
        rep = check_initial_egc(fld, K, T, dt=cfg["egc.dt"])
    out.text("egc_report.txt", rep.summary(), "EGC report")
    offs = np.array([[o["s"], *o["x"], *o["v"]] for o in rep.offenders]).reshape(-1, 5)
    emit_plot_data(offs, out.path("offenders.csv", "columns s,x1,x2,v1,v2"), ("s", "x1", "x2", "v1", "v2"))
    with open(out.path("offender_reasons.txt", "one line per offender"), "w") as fh:
        for o in rep.offenders:
            fh.write(o["reason"] + "\n")
    samples = K.samples() if isinstance(K, PhaseBox) else K
    plot_egc(samples, offs[:, 1:], out.path("egc.png", "figure"))
    print(rep.summary())
    if not rep.satisfied:
        raise GateFailure(f"{cond} EGC", f"{len(rep.offenders)} offenders")
    return EXIT_OK


def _write_state(out: Output, st, prefix=""):
    from vnspipe import kinetic
    from vnspipe.fields import write_field_csv, write_field_snapshot

    write_field_snapshot(st.u, out.path(prefix + "u_bar.vnsfld", "fluid snapshot"))
    write_field_csv(st.u, out.path(prefix + "u_bar.csv", "columns x,y,u1,u2"))
    kinetic.write_snapshot(st.f, out.path(prefix + "f_bar.vnssnap", "kinetic snapshot"))
    kinetic.write_moments_csv(st.f, out.path(prefix + "moments.csv", "columns x,y,m0,j1,j2,m2,m4"))


def cmd_equilibrium(cfg, out: Output, rng):
    from vnspipe import kinetic
    from vnspipe.plotting import plot_fixed_point

    st, budget = _stationary(cfg, out)
    emit_plot_data(np.column_stack([np.arange(1, len(st.trace) + 1), st.trace]),
                   out.path("iterations.csv", "columns iteration,update_sup"), ("iteration", "update_sup"))
    _write_state(out, st)
    m = dict(st.metrics)
    m.update({"converged": st.converged, "iterations": st.iterations, "horizon": st.horizon,
              "conclusion_bound": st.conclusion_bound})
    if budget is not None:
        m["eps"] = budget.eps
        m["conclusion_ok"] = st.conclusion_bound <= budget.eps
    out.text("equilibrium.txt", _kv(m), "conclusion metrics")
    L = cfg["domain.L"]
    m0 = kinetic.moments(st.f, (0,)).m0
    plot_fixed_point(np.asarray(st.trace), m0, (-L, L, -1, 1), out.path("equilibrium.png", "figure"))
    print(_kv({"iterations": st.iterations, "conclusion_bound": st.conclusion_bound}))
    return EXIT_OK


def cmd_evolve(cfg, out: Output, rng):
    from vnspipe import fluid, kinetic
    from vnspipe.fields import DiscreteVelocityField, write_field_snapshot
    from vnspipe.plotting import plot_ledger, plot_series
    from vnspipe.stability import CoupledStepper

    flow = _flow(cfg)
    if cfg["evolve.start"] == "equilibrium":
        st, _ = _stationary(cfg, out)
        u0, f0, psi = st.u, st.f, st.psi
    else:
        g = _grid(cfg)
        u0 = DiscreteVelocityField.poiseuille(g, flow)
        ph = _phase(cfg)
        f0 = kinetic.PhaseDistribution.zeros(_domain(cfg), ph.dims, ph.v_box)
        psi = _psi(cfg)
    stepper = CoupledStepper(u0, f0, psi, u0.bc, cfg["fluid.dt"], cfg["flow.nu"], cfg["kinetic.sl_safety"],
                             flow=flow, ns_cfl=cfg["fluid.cfl"])
    hist = kinetic.MassHistory()
    hist.record(stepper.t, stepper.f.l1_norm(), stepper.tally)
    k_snap = cfg["evolve.snapshot_every"]
    drift = [(0.0, 0.0, 0.0)]
    for n in range(cfg["evolve.steps"]):
        stepper.step()
        hist.record(stepper.t, stepper.f.l1_norm(), stepper.tally)
        drift.append((stepper.t, fluid.l2_norm(stepper.u - u0), kinetic.max_principle_residual(stepper.f, f0, psi, stepper.t)))
        if k_snap > 0 and (n + 1) % k_snap == 0:
            write_field_snapshot(stepper.u, out.path(f"u_{n + 1:06d}.vnsfld", "fluid snapshot"))
            kinetic.write_snapshot(stepper.f, out.path(f"f_{n + 1:06d}.vnssnap", "kinetic snapshot"))
    rows = stepper.ledger.as_array()
    emit_plot_data(rows, out.path("ledger.csv", "columns " + ",".join(fluid.LEDGER_COLUMNS)), fluid.LEDGER_COLUMNS)
    dr = np.asarray(drift)
    M0 = np.asarray(hist.M0)
    mb = M0 - M0[0] - (np.asarray(hist.injected) - np.asarray(hist.absorbed))
    mass = np.column_stack([hist.t, M0, hist.injected, hist.absorbed, mb])
    emit_plot_data(mass, out.path("mass.csv", "columns t,M0,injected,absorbed,residual"),
                   ("t", "M0", "injected", "absorbed", "residual"))
    emit_plot_data(dr, out.path("drift.csv", "columns t,u_drift_l2,max_principle_residual"),
                   ("t", "u_drift_l2", "max_principle_residual"))
    plot_ledger(rows, fluid.LEDGER_COLUMNS, out.path("ledger.png", "figure"))
    plot_series(dr[:, 0], {"|u - u0|_2": np.maximum(dr[:, 1], 1e-300)}, out.path("drift.png", "figure"), logy=True)
    summary = {"steps": cfg["evolve.steps"], "t_end": stepper.t, "max_u_drift": float(dr[:, 1].max()),
               "max_energy_residual": stepper.ledger.max_abs_residual,
               "max_mass_residual_rel": kinetic.mass_balance_residual(hist, relative=True),
               "max_principle_worst": float(dr[:, 2].max()), "f_max": stepper.f.sup_norm()}
    out.text("evolve.txt", _kv(summary), "run summary")
    print(_kv(summary))
    return EXIT_OK


def cmd_stability(cfg, out: Output, rng):
    from vnspipe.characteristics import PhaseBox
    from vnspipe.plotting import plot_decay
    from vnspipe.stability import SERIES_COLUMNS, StabilityConfig, run_stability

    st, budget = _stationary(cfg, out)
    T = cfg["equilibrium.T"]
    K2 = PhaseBox(cfg["stability.K2_x1"], cfg["stability.K2_x2"], cfg["stability.K2_v1"], cfg["stability.K2_v2"],
                  (4, 4, 4, 4))
    delta = cfg["stability.delta"]
    delta = None if delta == "auto" else delta
    if delta is None and budget is not None:
        delta = budget.delta
    w0 = cfg["stability.w0_amplitude"]
    if w0 == "auto":
        if delta is None:
            from vnspipe.characteristics import egc_perturbation_radius
            from vnspipe.fields import extend_field
            delta = egc_perturbation_radius(extend_field(st.u_sharp), T, "auto", K2)[0]
        w0 = 0.3 * delta / T
    scfg = StabilityConfig(st, K2, cfg["stability.g0_amplitude"], w0, T, cfg["stability.horizon"],
                           cfg["stability.dt"], _flow(cfg), seed=cfg["run.seed"], sl_safety=cfg["kinetic.sl_safety"],
                           delta=delta, twin_reference=cfg["stability.twin_reference"])
    res = run_stability(scfg)
    emit_plot_data(res.series(), out.path("decay.csv", "columns " + ",".join(SERIES_COLUMNS)), SERIES_COLUMNS)
    from vnspipe import fluid
    emit_plot_data(res.ledger.as_array(), out.path("ledger.csv", "columns " + ",".join(fluid.LEDGER_COLUMNS)),
                   fluid.LEDGER_COLUMNS)
    info = {
        "lambda_fit": res.fit.lambda_fit, "H_fit": res.fit.H_fit, "fit_residual": res.fit.residual,
        "window": res.fit.window, "n_samples": res.fit.n_samples, "lambda_gronwall": res.fit.lambda_gronwall,
        "kappa": res.fit.kappa, "alpha": res.fit.alpha, "T": T, "delta": res.delta, "R_hat": res.R_hat,
        "hv": res.hv, "window_integral_max": float(res.window_integral.max()), "delta_breach": res.breach,
        "support_ok": res.support_ok, "delay_check_max_excess": float(res.delay_check["max_excess"]),
        "rate_ok": res.fit.lambda_fit >= 0.5 * res.fit.lambda_gronwall,
    }
    out.text("decay_fit.txt", _kv(info), "DecayFit and monitors")
    out.text("egc_reports.txt", "\n\n".join(r.summary() for r in res.egc_reports), "EGC gate reports")
    plot_decay(res.t, res.u_hat, res.fit, out.path("decay.png", "figure"), raw=res.u_hat_raw)
    print(_kv(info))
    if res.breach:
        raise GateFailure("sliding-window delta monitor")
    return EXIT_OK


def cmd_gronwall(cfg, out: Output, rng):
    from vnspipe.plotting import plot_phi
    from vnspipe.stability import DelayRateProblem, GateError, gronwall_rate

    p = DelayRateProblem(cfg["gronwall.kappa"], cfg["gronwall.alpha"], cfg["gronwall.T"])
    try:
        lam = gronwall_rate(p)
    except GateError as exc:
        raise GateFailure(exc.gate, exc.detail) from None
    out.text("gronwall.txt", _kv({"kappa": p.kappa, "alpha": p.alpha, "T": p.T, "lambda": lam,
                                  "phi_at_root": float(p.phi(lam))}), "root of the delay characteristic function")
    x = np.linspace(0.0, 1.2 * p.kappa, 121)
    emit_plot_data(np.column_stack([x, p.phi(x)]), out.path("phi.csv", "columns lambda,phi"), ("lambda", "phi"))
    plot_phi(p, lam, out.path("phi.png", "figure"))
    print(f"lambda = {lam!r}")
    return EXIT_OK


def cmd_diagnostics(cfg, out: Output, rng):
    from vnspipe import fluid, kinetic
    from vnspipe.fields import DiscreteVelocityField, field_norms
    from vnspipe.plotting import plot_series
    from vnspipe.stability import k_omega

    dom = _domain(cfg)
    g = _grid(cfg)
    nu = cfg["flow.nu"]
    u_p = DiscreteVelocityField.poiseuille(g, _flow(cfg))
    nrm = field_norms(u_p)
    C = fluid.stokes_constant_estimate(g, nu, restarts=cfg["diagnostics.restarts"], seed=cfg["run.seed"])
    n = cfg["diagnostics.n"]
    ratio = kinetic.interpolation_ratio(
        kinetic.PhaseDistribution.from_function(dom, (4, 4, n, n), 1.25,
                                                lambda X1, X2, V1, V2: (V1 ** 2 + V2 ** 2 <= 1.0).astype(float)),
        cfg["diagnostics.beta"], cfg["diagnostics.gamma"])
    info = {"poincare_constant": fluid.poincare_constant(dom), "K_Omega": k_omega(dom),
            "dirichlet_eigenvalue": fluid.dirichlet_eigenvalue(dom), "C_St_estimate": C,
            "C1": 1.0 / (12.0 * C), "u_p_sup": nrm.sup_norm, "u_p_lipschitz": nrm.lipschitz,
            "u_p_weighted_sup": nrm.weighted_sup, "u_p_E_norm": nrm.e_norm, "u_p_W1inf": nrm.w1inf,
            "interpolation_ratio": ratio, "sqrt_2pi": math.sqrt(2 * math.pi)}
    out.text("diagnostics.txt", _kv(info), "constants and norms")
    x2 = np.linspace(-1, 1, 101)
    prof = np.column_stack([x2, _flow(cfg).u1(x2)])
    emit_plot_data(prof, out.path("profile.csv", "columns x2,u1"), ("x2", "u1"))
    plot_series(x2, {"u1": prof[:, 1]}, out.path("profile.png", "figure"), xlabel="x2")
    print(_kv(info))
    return EXIT_OK


COMMANDS = {
    "trace": cmd_trace,
    "egc-check": cmd_egc_check,
    "equilibrium": cmd_equilibrium,
    "evolve": cmd_evolve,
    "stability": cmd_stability,
    "gronwall": cmd_gronwall,
    "diagnostics": cmd_diagnostics,
}


def run(subcommand: str, cfg: RunConfig, out_dir) -> int:
    """Dispatch; every file in out_dir ends up in manifest.txt."""
    from vnspipe.characteristics import EgcFailure
    from vnspipe.stability import GateError

    out = Output(out_dir)
    rng = np.random.default_rng(cfg["run.seed"])
    try:
        import numba
        numba.set_num_threads(min(cfg["run.threads"], numba.config.NUMBA_NUM_THREADS))
    except ImportError:
        pass
    status = EXIT_OK
    t0 = time.perf_counter()
    try:
        status = COMMANDS[subcommand](cfg, out, rng)
    except GateFailure as exc:
        out.text("gate_failure.txt", f"gate: {exc.gate}\n{exc}", "failed gate")
        print(str(exc), file=sys.stderr)
        status = EXIT_GATE
    except (GateError, EgcFailure) as exc:
        gate = getattr(exc, "gate", "exit condition")
        out.text("gate_failure.txt", f"gate: {gate}\n{exc}", "failed gate")
        print(f"gate failed: {exc}", file=sys.stderr)
        status = EXIT_GATE
    except Exception as exc:  # noqa: BLE001
        out.text("error.txt", f"{type(exc).__name__}: {exc}", "error")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        status = EXIT_ERROR
    # wall time goes to stderr only, so reruns hash identically
    out.text("run.log", f"command: {subcommand}\nstatus: {status}\nconfig: {cfg.source}", "command and status")
    print(f"[{subcommand}] status {status} in {time.perf_counter() - t0:.2f}s", file=sys.stderr)
    out.manifest()
    return status


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="vnspipe", description=__doc__)
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", help="flat key = value file")
    ap.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./out)")
    ap.add_argument("--threads", type=int, help="worker threads for the kinetic kernels")
    ap.add_argument("--seed", type=int, help="rng seed")
    args = ap.parse_args(argv)
    try:
        cfg = parse_config(args.config) if args.config else parse_config_text("", "<defaults>")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    if args.threads is not None:
        if args.threads < 1:
            print("config error: --threads must be positive", file=sys.stderr)
            return EXIT_ERROR
        cfg.values["run.threads"] = args.threads
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            print("config error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
            return EXIT_ERROR
        cfg.values["run.seed"] = args.seed
    out_dir = args.out or os.environ.get(OUT_ENV) or "out"
    return run(args.subcommand, cfg, out_dir)


if __name__ == "__main__":
    sys.exit(main())
