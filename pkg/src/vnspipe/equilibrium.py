"""Nontrivial stationary states by Picard iteration of the map
Lambda: u -> Stokes(-(u.grad)u + drag of the stationary transport under u)."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from vnspipe import fluid, kinetic
from vnspipe.characteristics import (
    EgcFailure,
    PhaseBox,
    check_lateral_egc,
    egc_perturbation_radius,
    exit_time_bound,
)
from vnspipe.fields import (
    BoundaryData,
    DiscreteVelocityField,
    extend_field,
    field_norms,
)
from vnspipe.kinetic import InflowProfile, PhaseDistribution


class FixedPointError(RuntimeError):
    pass


# -------------------------------------------------------------------------
# smallness constants


@dataclass
class SmallnessBudget:
    T: float
    eps: float
    R: float
    C_St: float
    C1: float
    M: float
    C2: float
    delta: float = math.nan
    u_sharp_w1inf: float = math.nan
    psi_sup: float = math.nan
    eps_bound: float = math.nan
    gate_u_sharp: bool | None = None
    gate_psi: bool | None = None
    gate_eps: bool | None = None

    @property
    def satisfied(self) -> bool:
        return bool(self.gate_u_sharp) and bool(self.gate_psi) and bool(self.gate_eps)

    def failed_gates(self) -> list[str]:
        out = []
        for name in ("gate_u_sharp", "gate_psi", "gate_eps"):
            if not getattr(self, name):
                out.append(name)
        return out

    def report(self) -> str:
        keys = ("T", "eps", "R", "C_St", "C1", "M", "C2", "delta", "eps_bound", "u_sharp_w1inf", "psi_sup",
                "gate_u_sharp", "gate_psi", "gate_eps")
        return "\n".join(f"{k}: {getattr(self, k)}" for k in keys)


def smallness_budget(T: float, eps: float, R: float, C_St: float, u_sharp_w1inf: float | None = None,
                     psi_sup: float | None = None, delta: float | None = None) -> SmallnessBudget:
    """C1 = 1/(12 C_St), M = R + T(1 + C1),
    C2 = e^{-2T} min(eps, 2 pi M^3) / (6 C_St); gates compare the data with
    these and eps with min(1, delta/T, 1/(6 C_St))."""
    if not (T > 1 and eps > 0 and R > 0 and C_St > 0):
        raise ValueError("need T > 1 and positive eps, R, C_St")
    C1 = 1.0 / (12.0 * C_St)
    M = R + T * (1.0 + C1)
    C2 = math.exp(-2.0 * T) * min(eps, 2.0 * math.pi * M ** 3) / (6.0 * C_St)
    b = SmallnessBudget(T, eps, R, C_St, C1, M, C2)
    if u_sharp_w1inf is not None:
        b.u_sharp_w1inf = float(u_sharp_w1inf)
        b.gate_u_sharp = b.u_sharp_w1inf <= C1
    if psi_sup is not None:
        b.psi_sup = float(psi_sup)
        b.gate_psi = b.psi_sup <= C2
    if delta is not None:
        b.delta = float(delta)
        b.eps_bound = min(1.0, delta / T, 1.0 / (6.0 * C_St))
        b.gate_eps = eps < b.eps_bound
    return b


# -------------------------------------------------------------------------
# the map


@dataclass
class PhaseGrid:
    dims: tuple
    v_box: float
    trace_dt: float = 1e-2


def inflow_box(psi: InflowProfile, domain, counts=(8, 8, 8)) -> PhaseBox:
    """Lateral sample box covering the declared support of psi."""
    v1lo, v1hi, v2lo, v2hi = psi.v_support or (psi.a, psi.R, -psi.R, psi.R)
    return PhaseBox.lateral(domain, psi.x2_support, (max(v1lo, psi.a), v1hi), (v2lo, v2hi), counts)


def kinetic_source(g: PhaseDistribution, u: DiscreteVelocityField):
    """-(u.grad)u + int g (v - u) dv on the fluid faces."""
    a1, a2 = fluid.advection(u)
    d1, d2 = kinetic.drag_force(g, u)
    return -a1 + d1, -a2 + d2


def lambda_apply(u: DiscreteVelocityField, psi: InflowProfile, u_sharp: DiscreteVelocityField, horizon: float,
                 phase: PhaseGrid, nu: float = 1.0, eps: float | None = None, return_g: bool = False):
    """Lambda(u): stationary transport under u, then the Stokes solve with the
    advective and drag source and the boundary data of u_sharp."""
    if eps is not None:
        dist = field_norms(u - u_sharp).e_norm
        if dist > eps:
            warnings.warn(f"Lambda applied outside the eps-ball (|u - u#|_E = {dist:.3g} > {eps:.3g})",
                          stacklevel=2)
    grid = u.grid
    g = kinetic.stationary_transport(psi, u, grid.domain, phase.dims, phase.v_box, horizon, phase.trace_dt)
    if psi.sup == 0.0:
        a1, a2 = fluid.advection(u)
        s1, s2 = -a1, -a2
    else:
        s1, s2 = kinetic_source(g, u)
    prob = fluid.StokesProblem(grid, s1, s2, u_sharp.bc, nu)
    out, p = fluid.solve_steady_stokes(prob)
    out.meta["pressure"] = p
    return (out, g) if return_g else out


# -------------------------------------------------------------------------
# iteration


@dataclass
class StationaryState:
    u: DiscreteVelocityField
    f: PhaseDistribution
    u_sharp: DiscreteVelocityField
    psi: InflowProfile
    phase: PhaseGrid
    horizon: float
    nu: float
    trace: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0
    metrics: dict = field(default_factory=dict)

    @property
    def conclusion_bound(self) -> float:
        return self.metrics.get("u_dist_E", math.nan) + self.metrics.get("f_sup", math.nan)


def default_horizon(u_sharp: DiscreteVelocityField, psi: InflowProfile, dt: float = 1e-2) -> float:
    if psi.sup == 0.0:
        return 1.0
    tb = exit_time_bound(extend_field(u_sharp), inflow_box(psi, u_sharp.grid.domain), dt=dt)
    if not math.isfinite(tb):
        raise EgcFailure("inflow support has trapped lateral characteristics under u_sharp")
    return 1.5 * tb


def fixed_point(u_sharp: DiscreteVelocityField, psi: InflowProfile, phase: PhaseGrid, budget: SmallnessBudget | None = None,
                tol_fp: float = 1e-10, max_iter: int = 200, horizon: float | None = None, nu: float = 1.0,
                egc_T: float | None = None, raise_on_nonconvergence: bool = True) -> StationaryState:
    """Picard iteration u_{k+1} = Lambda(u_k) from u_sharp until the sup-norm
    update drops below tol_fp."""
    domain = u_sharp.grid.domain
    if psi.sup > 0:
        T = egc_T if egc_T is not None else (budget.T if budget is not None else None)
        if T is not None:
            rep = check_lateral_egc(extend_field(u_sharp), inflow_box(psi, domain), T, dt=phase.trace_dt)
            if not rep.satisfied:
                raise EgcFailure(f"lateral exit condition fails for u_sharp: {len(rep.offenders)} offenders, "
                                 f"worst exit {rep.worst_exit_duration:.4g} vs T={T:g}")
    if horizon is None:
        horizon = default_horizon(u_sharp, psi, phase.trace_dt)
    eps = budget.eps if budget is not None else None
    u = u_sharp.copy()
    u.analytic = None
    trace = []
    converged = False
    k = 0
    for k in range(1, max_iter + 1):
        new = lambda_apply(u, psi, u_sharp, horizon, phase, nu, eps)
        diff = (new - u).sup_face()
        trace.append(diff)
        u = new
        if diff < tol_fp:
            converged = True
            break
    if not converged and raise_on_nonconvergence:
        raise FixedPointError(f"fixed point did not converge in {max_iter} iterations (last update {trace[-1]:.3g})")
    g = kinetic.stationary_transport(psi, u, domain, phase.dims, phase.v_box, horizon, phase.trace_dt)
    g.t = 0.0
    st = StationaryState(u, g, u_sharp, psi, phase, horizon, nu, trace, converged, k)
    st.metrics = conclusion_metrics(st)
    return st


def _jump_band(f: PhaseDistribution) -> np.ndarray:
    """Nodes adjacent (in any phase direction) to a change between zero and
    nonzero values."""
    nz = f.values != 0
    band = np.zeros_like(nz)
    for ax in range(4):
        d = np.diff(nz, axis=ax)
        sl0 = [slice(None)] * 4
        sl1 = [slice(None)] * 4
        sl0[ax] = slice(None, -1)
        sl1[ax] = slice(1, None)
        band[tuple(sl0)] |= d
        band[tuple(sl1)] |= d
    return band


def conclusion_metrics(st: StationaryState) -> dict:
    diff = st.u - st.u_sharp
    nrm = field_norms(diff)
    f = st.f
    lip = kinetic.lipschitz_estimate(f, _jump_band(f))
    psi_w1 = st.psi.sup + (st.psi.lipschitz if math.isfinite(st.psi.lipschitz) else 0.0)
    nz = np.argwhere(f.values > 0)
    if nz.size:
        axes = f.axes()
        lo = [float(axes[a][nz[:, a].min()]) for a in range(4)]
        hi = [float(axes[a][nz[:, a].max()]) for a in range(4)]
    else:
        lo = hi = [0.0] * 4
    grad = field_norms(diff, weighted=False).lipschitz
    return {
        "u_dist_E": nrm.e_norm,
        "u_dist_sup": nrm.sup_norm,
        "u_dist_lip": nrm.lipschitz,
        "u_dist_weighted": nrm.weighted_sup,
        "u_dist_w1inf": nrm.w1inf,
        "hardy_ok": nrm.weighted_sup <= grad + 1e-14,
        "f_sup": f.sup_norm(),
        "f_lip_x": lip["x"],
        "f_lip_v": lip["v"],
        "f_lip_ratio": (max(lip["x"], lip["v"]) / psi_w1) if psi_w1 > 0 else 0.0,
        "support_lo": lo,
        "support_hi": hi,
        "shell_clear": f.support_ok,
    }


# -------------------------------------------------------------------------
# checks on a converged state


def stationary_values(psi: InflowProfile, u, pts, horizon: float, dt: float = 1e-2) -> np.ndarray:
    """Exact stationary-transport value at arbitrary phase points."""
    ext = u if not isinstance(u, DiscreteVelocityField) else extend_field(u)
    from vnspipe.characteristics import field_pack
    pts = np.ascontiguousarray(np.asarray(pts, dtype=float).reshape(-1, 4))
    res = np.empty((pts.shape[0], 6))
    kinetic._trace_points(field_pack(ext), 0.0, pts, -1.0, float(dt), float(horizon), res)
    domain = ext.source.grid.domain
    vals = kinetic._inflow_values(res, domain, psi, -res[:, 1])
    return vals * np.exp(2.0 * res[:, 1])


@dataclass
class InvarianceReport:
    max_deviation: float
    interpolation_error: float
    n_samples: int
    ok: bool


def g_level_invariance(st: StationaryState, n_samples: int = 50, times=(0.1, 0.2, 0.3), seed: int = 0,
                       dt: float = 1e-3) -> InvarianceReport:
    """Along sampled characteristics of u-bar, e^{-2t} f-bar(X_t, V_t) should
    stay at f-bar(X_0, V_0); the allowance is twice the observed interpolation
    error of f-bar at the sampled points (interpolant vs exact value)."""
    from vnspipe.characteristics import field_pack, trace_kernel, advance_kernel

    rng = np.random.default_rng(seed)
    f = st.f
    cand = np.argwhere(f.values > 0.5 * f.sup_norm())
    if cand.size == 0:
        return InvarianceReport(0.0, 0.0, 0, True)
    pick = cand[rng.choice(len(cand), size=min(n_samples, len(cand)), replace=False)]
    axes = f.axes()
    starts = np.array([[axes[a][p[a]] for a in range(4)] for p in pick])
    ext = extend_field(st.u)
    fp = field_pack(ext)
    L = f.domain.L
    dev = 0.0
    ierr = 0.0
    for x in starts:
        base = float(f.values[tuple(np.searchsorted(axes[a], x[a]) for a in range(4))])
        for t in times:
            found, el, *_ = trace_kernel(fp, 0.0, x[0], x[1], x[2], x[3], 1.0, dt, t)
            if found:
                break
            y = np.array(advance_kernel(fp, 0.0, x[0], x[1], x[2], x[3], t, dt))
            interp = float(kinetic.interpolate(f, y[None, :], st.psi)[0])
            exact = float(stationary_values(st.psi, ext, y[None, :], st.horizon, st.phase.trace_dt)[0])
            dev = max(dev, abs(math.exp(-2.0 * t) * interp - base))
            ierr = max(ierr, abs(math.exp(-2.0 * t) * (interp - exact)))
    ok = dev <= 2.0 * ierr + 1e-14 * max(1.0, f.sup_norm())
    return InvarianceReport(dev, ierr, len(starts), ok)


def random_ball_field(u_sharp: DiscreteVelocityField, radius: float, rng, nu: float = 1.0) -> DiscreteVelocityField:
    """u_sharp plus a random solenoidal zero-trace perturbation of E-norm
    radius (Stokes response to a random trigonometric source)."""
    g = u_sharp.grid
    k = rng.integers(1, 4, size=(2, 2))
    ph = rng.uniform(0, 2 * np.pi, size=4)

    def src(pts):
        x, y = pts[..., 0], pts[..., 1]
        out = np.zeros(pts.shape)
        out[..., 0] = np.sin(k[0, 0] * x + ph[0]) * np.cos(k[0, 1] * y + ph[1])
        out[..., 1] = np.cos(k[1, 0] * x + ph[2]) * np.sin(k[1, 1] * y + ph[3])
        return out

    s1 = src(g.u1_points())[..., 0]
    s2 = src(g.u2_points())[..., 1]
    w, _ = fluid.solve_steady_stokes(fluid.StokesProblem(g, s1, s2, BoundaryData.zeros(g), nu))
    scale = radius / max(field_norms(w).e_norm, 1e-300)
    out = u_sharp + w.scaled(scale)
    out.analytic = None
    return out


def stationarity_residual(st: StationaryState, dt: float, n_steps: int, sl_safety: float = 1.0,
                          perturb_f: float = 1.0, record_every: int = 1) -> dict:
    """Run the coupled dynamics from (u-bar, f-bar) and report the drifts
    max_t |u(t) - u-bar|_2 and max_t |f(t) - f-bar|_1 with their histories."""
    from vnspipe.stability import CoupledStepper

    f0 = st.f.copy()
    f0.values = f0.values * perturb_f
    stepper = CoupledStepper(st.u.copy(), f0, st.psi, st.u_sharp.bc, dt, st.nu, sl_safety=sl_safety)
    ts, du, df = [0.0], [0.0], [float(np.abs(f0.values - st.f.values).sum() * st.f.cell_volume)]
    for n in range(n_steps):
        stepper.step()
        if (n + 1) % record_every == 0 or n == n_steps - 1:
            ts.append(stepper.t)
            du.append(fluid.l2_norm(stepper.u - st.u))
            df.append(float(np.abs(stepper.f.values - st.f.values).sum() * st.f.cell_volume))
    return {"t": np.array(ts), "u_drift": np.array(du), "f_drift": np.array(df),
            "max_u_drift": float(max(du)), "max_f_drift": float(max(df))}


def egc_delta(u_sharp: DiscreteVelocityField, psi: InflowProfile, T: float, dt: float = 1e-2, window: float = 0.1):
    """delta for the budget from sampled margins of the inflow support."""
    return egc_perturbation_radius(extend_field(u_sharp), T, "auto", inflow_box(psi, u_sharp.grid.domain),
                                   window=window, dt=dt)
