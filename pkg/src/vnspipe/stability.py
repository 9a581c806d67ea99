"""Coupled time evolution, the delayed Gronwall rate and perturbation
experiments around stationary states."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize

from vnspipe import fluid, kinetic
from vnspipe.characteristics import (
    EgcFailure,
    PhaseBox,
    check_initial_egc,
    check_lateral_egc,
    egc_perturbation_radius,
)
from vnspipe.fields import BoundaryData, DiscreteVelocityField, extend_field, field_norms
from vnspipe.geometry import PipeDomain, PoiseuilleFlow
from vnspipe.kinetic import InflowProfile, PhaseDistribution


class GateError(RuntimeError):
    """A stated smallness or geometric gate does not hold."""

    def __init__(self, gate: str, message: str):
        super().__init__(f"{gate}: {message}")
        self.gate = gate
        self.detail = message


# -------------------------------------------------------------------------
# constants and the delayed Gronwall rate


def k_omega(domain: PipeDomain) -> float:
    """1 / (2 C_Po^2), i.e. half the first Dirichlet eigenvalue."""
    return 0.5 / fluid.poincare_constant(domain) ** 2


def delay_coefficients(R: float, T: float, grad_v_fbar: float, ubar_sup: float, up_sup: float, delta: float):
    """(R_hat, alpha) with R_hat = R + T |u_p| + 2 delta and
    alpha = R pi e^{2T} |grad_v f-bar| R_hat (|u-bar| + R_hat)."""
    R_hat = R + T * up_sup + 2.0 * delta
    alpha = R * math.pi * math.exp(2.0 * T) * grad_v_fbar * R_hat * (ubar_sup + R_hat)
    return R_hat, alpha


@dataclass(frozen=True)
class DelayRateProblem:
    kappa: float
    alpha: float
    T: float

    @property
    def admissible(self) -> bool:
        return self.alpha < self.kappa / self.T

    def phi(self, lam):
        return lam * lam - lam * self.kappa + self.alpha * np.expm1(lam * self.T)


def gronwall_rate(p: DelayRateProblem, xtol: float = 1e-12) -> float:
    """Positive root of lam^2 - lam kappa + alpha (e^{lam T} - 1) in (0, kappa).

    phi is convex with phi(0) = 0 and phi'(0) = alpha T - kappa < 0, so the
    positive root is unique and bracketed by (0, kappa].
    """
    if not (p.kappa > 0 and p.T > 0 and p.alpha >= 0):
        raise ValueError("need kappa > 0, T > 0, alpha >= 0")
    if not p.admissible:
        raise GateError("alpha < kappa/T", f"alpha={p.alpha:g} >= kappa/T={p.kappa / p.T:g}")
    if p.alpha == 0.0:
        return float(p.kappa)
    lo = min(1e-3 * p.kappa, 0.5 * (p.kappa - p.alpha * p.T))
    while p.phi(lo) >= 0.0:
        lo *= 0.5
        if lo < 1e-300:
            raise RuntimeError("failed to bracket the Gronwall root")
    return float(optimize.bisect(p.phi, lo, p.kappa, xtol=xtol, rtol=4 * np.finfo(float).eps, maxiter=400))


def delay_identity_residual(lam: float, p: DelayRateProblem, t: float) -> float:
    """y' + kappa y - alpha int_{t-T}^t y for y = e^{-lam t}, with the integral
    done by adaptive quadrature; zero exactly at the Gronwall root."""
    y = lambda s: math.exp(-lam * s)
    integral, _ = integrate.quad(y, t - p.T, t, epsabs=1e-14, epsrel=1e-13)
    return -lam * y(t) + p.kappa * y(t) - p.alpha * integral


def simulate_delay_inequality(p: DelayRateProblem, history, t_end: float, margin: float = 0.05,
                              n_per_T: int = 2000):
    """Integrate y' = -kappa y + alpha int_{t-T}^t y - margin y for t >= 3T/2
    from a prescribed history on [0, 3T/2] (Heun steps, trapezoid window)."""
    h = p.T / n_per_T
    n_hist = int(round(1.5 * n_per_T))
    n = int(math.ceil(t_end / h))
    t = np.arange(n + 1) * h
    y = np.empty(n + 1)
    y[: n_hist + 1] = history(t[: n_hist + 1])
    w = n_per_T  # window length in steps

    def window(k, yk):
        seg = y[k - w: k + 1].copy()
        seg[-1] = yk
        return h * (seg.sum() - 0.5 * (seg[0] + seg[-1]))

    for k in range(n_hist, n):
        f0 = -(p.kappa + margin) * y[k] + p.alpha * window(k, y[k])
        pred = y[k] + h * f0
        y[k + 1] = pred
        f1 = -(p.kappa + margin) * pred + p.alpha * window(k + 1, pred)
        y[k + 1] = y[k] + 0.5 * h * (f0 + f1)
    return t, y


def comparison_check(p: DelayRateProblem, history, gamma: float = 1.01, horizon_T: float = 10.0,
                     margin: float = 0.05) -> dict:
    lam = gronwall_rate(p)
    t, y = simulate_delay_inequality(p, history, horizon_T * p.T, margin)
    early = t <= 1.5 * p.T + 1e-12
    H = float(np.max(y[early] * np.exp(lam * t[early])))
    bound = gamma * H * np.exp(-lam * t)
    ratio = float(np.max(y / bound))
    return {"lambda": lam, "H": H, "max_ratio": ratio, "ok": ratio <= 1.0}


# -------------------------------------------------------------------------
# decay fits


@dataclass
class DecayFit:
    lambda_fit: float
    H_fit: float
    residual: float
    window: tuple
    n_samples: int
    lambda_gronwall: float = math.nan
    kappa: float = math.nan
    alpha: float = math.nan
    T: float = math.nan

    def as_text(self) -> str:
        keys = ("lambda_fit", "H_fit", "residual", "window", "n_samples", "lambda_gronwall", "kappa", "alpha", "T")
        return "\n".join(f"{k}: {getattr(self, k)}" for k in keys)


def fit_decay(t, y, window, floor: float = 1e-300) -> DecayFit:
    """Least-squares line through (t, log y) over the window."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    lo, hi = window
    m = (t >= lo - 1e-12) & (t <= hi + 1e-12)
    if m.sum() < 4:
        raise ValueError(f"decay window {window} holds fewer than 4 samples")
    ly = np.log(np.maximum(y[m], floor))
    A = np.column_stack([np.ones(m.sum()), t[m]])
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    res = ly - A @ coef
    return DecayFit(float(-coef[1]), float(math.exp(coef[0])), float(np.sqrt(np.mean(res ** 2))),
                    (float(lo), float(hi)), int(m.sum()))


# -------------------------------------------------------------------------
# coupled evolution


class CoupledStepper:
    """Drag from f, projection step for u, then the semi-Lagrangian step for f
    under the fluid fields at both ends of the step."""

    def __init__(self, u: DiscreteVelocityField, f: PhaseDistribution, psi: InflowProfile, bc: BoundaryData,
                 dt: float, nu: float = 1.0, sl_safety: float = 1.0, flow: PoiseuilleFlow | None = None,
                 ns_cfl: float = 1.0):
        self.u = u.copy()
        self.u.analytic = None
        self.f = f.copy()
        self.psi = psi
        self.dt = dt
        self.nu = nu
        self.sl_safety = sl_safety
        self.t = float(f.t)
        self.ns = fluid.NavierStokesStepper(u.grid, nu, dt, bc, cfl=ns_cfl)
        self.ns.init_pressure(self.u, kinetic.drag_force(self.f, self.u))
        self.tally = kinetic.StepTally()
        self.ledger = fluid.EnergyLedger(flow) if flow is not None else None
        if self.ledger is not None:
            fluid.energy_ledger_update(self.ledger, self.u, self.f, {"t": self.t}, nu)

    def step(self):
        force = kinetic.drag_force(self.f, self.u)
        u_new = self.ns.step(self.u, force)
        before = (self.tally.in_M2, self.tally.out_M2)
        f_new = kinetic.sl_step(self.f, self.u, u_new, self.dt, self.psi, self.sl_safety, self.tally)
        self.u, self.f = u_new, f_new
        self.t = f_new.t
        if self.ledger is not None:
            diag = {"t": self.t, "dt": self.dt, "in_M2": self.tally.in_M2 - before[0],
                    "out_M2": self.tally.out_M2 - before[1]}
            fluid.energy_ledger_update(self.ledger, self.u, self.f, diag, self.nu)
        return self


# -------------------------------------------------------------------------
# perturbation experiment


def bump_perturbation(f_like: PhaseDistribution, K2: PhaseBox, amplitude: float) -> np.ndarray:
    """Product of (1 - s^2)^2 profiles filling the box K2, sup = amplitude."""
    X1, X2, V1, V2 = f_like.mesh()
    val = np.ones_like(X1)
    for X, (lo, hi) in zip((X1, X2, V1, V2), (K2.x1, K2.x2, K2.v1, K2.v2)):
        c, r = 0.5 * (lo + hi), 0.5 * (hi - lo)
        s = (X - c) / r
        val *= np.where(np.abs(s) < 1, (1 - s * s) ** 2, 0.0)
    m = val.max()
    return amplitude * val / m if m > 0 else val


def divergence_free_perturbation(u: DiscreteVelocityField, amplitude: float, rng, nu: float = 1.0):
    """Random trigonometric field, projected onto discrete solenoidal fields
    with zero trace (through a Stokes solve), scaled to sup = amplitude."""
    from vnspipe.equilibrium import random_ball_field

    w = random_ball_field(DiscreteVelocityField.zeros(u.grid), 1.0, rng, nu)
    return w.scaled(amplitude / max(w.sup_face(), 1e-300))


@dataclass
class StabilityConfig:
    base: object  # StationaryState
    K2: PhaseBox
    g0_amplitude: float
    w0_amplitude: float
    T: float
    horizon: float
    dt: float
    flow: PoiseuilleFlow
    seed: int = 0
    sl_safety: float = 1.0
    delta: float | None = None
    twin_reference: bool = True
    record_every: int = 1
    check_delay_every: int = 10


@dataclass
class StabilityResult:
    t: np.ndarray
    u_hat: np.ndarray  # |u - u_ref|_2
    u_hat_raw: np.ndarray  # |u - u-bar|_2
    f_hat_l2: np.ndarray
    f_hat_inf: np.ndarray
    support_radius: np.ndarray
    window_integral: np.ndarray
    fit: DecayFit
    R_hat: float
    hv: float
    delta: float
    breach: bool
    support_ok: bool
    delay_check: dict
    ledger: fluid.EnergyLedger | None
    egc_reports: list = field(default_factory=list)

    def series(self) -> np.ndarray:
        return np.column_stack([self.t, self.u_hat, self.u_hat_raw, self.f_hat_l2, self.f_hat_inf,
                                self.support_radius, self.window_integral])


SERIES_COLUMNS = ("t", "u_hat_l2", "u_hat_raw_l2", "f_hat_l2", "f_hat_inf", "supp_v_radius", "window_integral")


def run_stability(cfg: StabilityConfig) -> StabilityResult:
    """Perturb the base state by (w0, g0) and follow the coupled dynamics.

    With twin_reference the unperturbed state is stepped alongside and
    u_hat is measured against it, which removes the discrete stationarity drift
    of the base pair from the decay series; the raw distance to u-bar is
    reported as well.
    """
    st = cfg.base
    u_p = DiscreteVelocityField.poiseuille(st.u.grid, cfg.flow)
    domain = st.u.grid.domain
    ext_p = extend_field(u_p)
    reports = []
    rep0 = check_initial_egc(ext_p, cfg.K2, cfg.T, dt=min(cfg.dt, 1e-2))
    reports.append(rep0)
    if not rep0.satisfied:
        raise GateError("initial EGC", f"perturbation support K2 fails ({len(rep0.offenders)} offenders)")
    from vnspipe.equilibrium import inflow_box

    if st.psi.sup > 0:
        K1 = inflow_box(st.psi, domain)
        rep1 = check_lateral_egc(ext_p, K1, cfg.T, dt=min(cfg.dt, 1e-2))
        reports.append(rep1)
        if not rep1.satisfied:
            raise GateError("lateral EGC", f"inflow support fails ({len(rep1.offenders)} offenders)")
        delta = cfg.delta if cfg.delta is not None else egc_perturbation_radius(ext_p, cfg.T, "auto", K1)[0]
    else:
        delta = cfg.delta if cfg.delta is not None else egc_perturbation_radius(ext_p, cfg.T, "auto", cfg.K2)[0]
    fbar = st.f
    lip_v = kinetic.lipschitz_estimate(fbar)["v"]
    R = max(st.psi.R, max(abs(cfg.K2.v1[0]), abs(cfg.K2.v1[1])) + max(abs(cfg.K2.v2[0]), abs(cfg.K2.v2[1])))
    R_hat, alpha = delay_coefficients(R, cfg.T, lip_v, st.u.sup_face(), cfg.flow.u_max, delta)
    if fbar.v_box * 1.0 < R_hat:
        raise GateError("velocity box", f"V_box={fbar.v_box:g} does not cover R_hat={R_hat:g}")
    kappa = st.nu * k_omega(domain)
    if cfg.flow.grad_sup_norm > kappa:
        raise GateError("|grad u_p| <= nu K_Omega", f"{cfg.flow.grad_sup_norm:g} > {kappa:g}")
    prob = DelayRateProblem(kappa, alpha, cfg.T)
    lam_g = gronwall_rate(prob)

    rng = np.random.default_rng(cfg.seed)
    w0 = divergence_free_perturbation(st.u, cfg.w0_amplitude, rng, st.nu)
    f0 = fbar.copy()
    f0.values = f0.values + bump_perturbation(fbar, cfg.K2, cfg.g0_amplitude)
    u0 = st.u + w0
    run = CoupledStepper(u0, f0, st.psi, st.u_sharp.bc, cfg.dt, st.nu, cfg.sl_safety, flow=cfg.flow)
    ref = CoupledStepper(st.u, fbar, st.psi, st.u_sharp.bc, cfg.dt, st.nu, cfg.sl_safety) if cfg.twin_reference else None

    n_steps = int(round(cfg.horizon / cfg.dt))
    ts, uh, uraw, fl2, finf, srad, wint = [], [], [], [], [], [], []
    sup_hist = []  # |u - u_p|_inf per step, for the sliding window

    def record():
        uref = ref.u if ref is not None else st.u
        fref = ref.f if ref is not None else fbar
        fh = run.f.values - fref.values
        ts.append(run.t)
        uh.append(fluid.l2_norm(run.u - uref))
        uraw.append(fluid.l2_norm(run.u - st.u))
        fl2.append(float(np.sqrt((fh ** 2).sum() * fbar.cell_volume)))
        finf.append(float(np.abs(fh).max()))
        tol = 1e-12 * max(cfg.g0_amplitude, fbar.sup_norm(), 1e-300)
        srad.append(kinetic.velocity_support_radius(fh, fbar, tol))

    record()
    sup_hist.append((run.u - u_p).sup_face())
    wint.append(0.0)
    wsteps = max(1, int(round(cfg.T / cfg.dt)))
    for n in range(n_steps):
        run.step()
        if ref is not None:
            ref.step()
        sup_hist.append((run.u - u_p).sup_face())
        seg = np.asarray(sup_hist[-(wsteps + 1):])
        wint.append(float(cfg.dt * (seg.sum() - 0.5 * (seg[0] + seg[-1]))))
        if (n + 1) % cfg.record_every == 0 or n == n_steps - 1:
            record()
    wint_rec = np.interp(ts, np.arange(len(wint)) * cfg.dt, wint)
    t = np.asarray(ts)
    u_hat = np.asarray(uh)
    fit = fit_decay(t, u_hat, (1.5 * cfg.T, cfg.horizon))
    fit.lambda_gronwall, fit.kappa, fit.alpha, fit.T = lam_g, kappa, alpha, cfg.T

    # delay inequality spot check on the fit window
    dcheck = {"max_excess": -math.inf, "n": 0}
    wl = max(1, int(round(cfg.T / (t[1] - t[0])))) if len(t) > 1 else 1
    for k in range(wl + 1, len(t) - 1, max(1, cfg.check_delay_every)):
        if t[k] < 1.5 * cfg.T:
            continue
        dy = (u_hat[k + 1] - u_hat[k - 1]) / (t[k + 1] - t[k - 1])
        seg = u_hat[k - wl: k + 1]
        integ = float((t[1] - t[0]) * (seg.sum() - 0.5 * (seg[0] + seg[-1])))
        excess = dy + kappa * u_hat[k] - alpha * integ
        dcheck["max_excess"] = max(dcheck["max_excess"], excess / max(u_hat[k], 1e-300))
        dcheck["n"] += 1
    srad_a = np.asarray(srad)
    return StabilityResult(
        t, u_hat, np.asarray(uraw), np.asarray(fl2), np.asarray(finf), srad_a, np.asarray(wint_rec), fit,
        R_hat, fbar.hv, delta, bool(np.max(wint) > delta), bool(np.all(srad_a <= R_hat + fbar.hv)), dcheck,
        run.ledger, reports,
    )
