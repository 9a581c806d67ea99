"""Damped characteristics  X' = V,  V' = (Pu)(t, X) - V.

The integrator is an exponential midpoint rule: variation of constants on the
-V term with the drive frozen at the predicted midpoint. It is exact when the
drive is constant along a step and second order otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit

from vnspipe.fields import ExtendedField, eval_extended, field_norms
from vnspipe.geometry import BoundaryClass, PipeDomain, Side, Tag, classify_boundary

POSITION_TOL = 1e-10
# a point counts as outside only beyond this; absorbs roundoff for orbits
# that creep towards a wall without reaching it
EXIT_TOL = 1e-12


@dataclass
class PhaseState:
    x: np.ndarray
    v: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).reshape(2)
        self.v = np.asarray(self.v, dtype=float).reshape(2)
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.v)) and math.isfinite(self.t)):
            raise ValueError("phase state must be finite")

    def as_array(self):
        return np.array([self.x[0], self.x[1], self.v[0], self.v[1]])


class TimeDependentField:
    """Piecewise-linear-in-time blend of two extended snapshots."""

    def __init__(self, ext_a: ExtendedField, ext_b: ExtendedField, t_a: float, t_b: float):
        if ext_a.source.grid != ext_b.source.grid or ext_a.margin != ext_b.margin:
            raise ValueError("snapshots must share grid and margin")
        self.a, self.b, self.t_a, self.t_b = ext_a, ext_b, float(t_a), float(t_b)

    @property
    def L(self):
        return self.a.L

    def pack(self):
        pa = self.a.pack()
        pb = self.b.pack()
        return (pa[0], pa[1], pa[2], pb[1], pb[2], self.t_a, self.t_b) + pa[3:]


def field_pack(fld):
    """Uniform 15-slot tuple for the kernels (static fields repeat the arrays)."""
    if isinstance(fld, TimeDependentField):
        return fld.pack()
    p = fld.pack()
    return (p[0], p[1], p[2], p[1], p[2], 0.0, 0.0) + p[3:]


# -------------------------------------------------------------------------
# kernels


@njit(cache=True)
def drive(fp, t, x1, x2):
    kind, A1, A2, B1, B2, ta, tb, L, hx, hy, nx, ny, umax, lam, margin = fp
    a1, a2 = eval_extended(kind, A1, A2, L, hx, hy, nx, ny, umax, lam, margin, x1, x2)
    if tb > ta:
        w = (t - ta) / (tb - ta)
        if w < 0.0:
            w = 0.0
        if w > 1.0:
            w = 1.0
        if w > 0.0:
            b1, b2 = eval_extended(kind, B1, B2, L, hx, hy, nx, ny, umax, lam, margin, x1, x2)
            a1 = (1 - w) * a1 + w * b1
            a2 = (1 - w) * a2 + w * b2
    return a1, a2


@njit(cache=True)
def exp_mid_step(fp, t, x1, x2, v1, v2, h):
    hh = 0.5 * h
    ah = -math.expm1(-hh)
    U1, U2 = drive(fp, t, x1, x2)
    m1 = x1 + ah * v1 + (hh - ah) * U1
    m2 = x2 + ah * v2 + (hh - ah) * U2
    W1, W2 = drive(fp, t + hh, m1, m2)
    a = -math.expm1(-h)
    e = math.exp(-h)
    b = h + math.expm1(-h)
    return (x1 + a * v1 + b * W1, x2 + a * v2 + b * W2, e * v1 + a * W1, e * v2 + a * W2)


@njit(cache=True)
def outside_measure(L, x1, x2):
    return max(abs(x1) - L, abs(x2) - 1.0)


@njit(cache=True)
def advance_kernel(fp, t, x1, x2, v1, v2, duration, dt):
    n = int(math.ceil(abs(duration) / dt - 1e-12))
    if n < 1:
        n = 1
    h = duration / n
    for _ in range(n):
        x1, x2, v1, v2 = exp_mid_step(fp, t, x1, x2, v1, v2, h)
        t += h
    return x1, x2, v1, v2


@njit(cache=True)
def trace_kernel(fp, s, x1, x2, v1, v2, direction, dt, horizon):
    """First crossing of the pipe boundary along direction (+1 or -1).

    Returns (found, elapsed, x1, x2, v1, v2) with the state at the crossing, or
    the state at the horizon when no crossing happened.
    """
    L = fp[7]
    t = s
    elapsed = 0.0
    while elapsed < horizon:
        hmag = min(dt, horizon - elapsed)
        n1, n2, w1, w2 = exp_mid_step(fp, t, x1, x2, v1, v2, direction * hmag)
        g_hi = outside_measure(L, n1, n2)
        if g_hi > EXIT_TOL:
            # Illinois regula falsi on the outside measure over the substep;
            # plain halving when the bracket is not sign-definite
            lo = 0.0
            hi = hmag
            g_lo = outside_measure(L, x1, x2)
            b1, b2, c1, c2 = n1, n2, w1, w2
            side = 0
            for _ in range(200):
                if g_lo < 0.0 and g_hi > 0.0:
                    mid = lo + (hi - lo) * (-g_lo) / (g_hi - g_lo)
                    if not (lo < mid < hi):
                        mid = 0.5 * (lo + hi)
                else:
                    mid = 0.5 * (lo + hi)
                if mid <= lo or mid >= hi:
                    break
                m1, m2, q1, q2 = exp_mid_step(fp, t, x1, x2, v1, v2, direction * mid)
                gm = outside_measure(L, m1, m2)
                if abs(gm) <= 1e-14:
                    # on the boundary to rounding
                    hi = mid
                    b1, b2, c1, c2 = m1, m2, q1, q2
                    break
                if gm > 0.0:
                    hi = mid
                    g_hi = gm
                    b1, b2, c1, c2 = m1, m2, q1, q2
                    if side == 1:
                        g_lo *= 0.5
                    side = 1
                else:
                    lo = mid
                    g_lo = gm
                    if side == -1:
                        g_hi *= 0.5
                    side = -1
                if hi - lo <= 1e-15 * (1.0 + abs(t)):
                    break
            return True, elapsed + hi, b1, b2, c1, c2
        x1, x2, v1, v2 = n1, n2, w1, w2
        t += direction * hmag
        elapsed += hmag
    return False, elapsed, x1, x2, v1, v2


@njit(cache=True)
def trace_many(fp, s, pts, direction, dt, horizon, out):
    for k in range(pts.shape[0]):
        found, el, a, b, c, d = trace_kernel(fp, s, pts[k, 0], pts[k, 1], pts[k, 2], pts[k, 3], direction, dt, horizon)
        out[k, 0] = 1.0 if found else 0.0
        out[k, 1] = el
        out[k, 2] = a
        out[k, 3] = b
        out[k, 4] = c
        out[k, 5] = d


@njit(cache=True)
def trajectory_kernel(fp, s, x1, x2, v1, v2, duration, dt, out):
    n = out.shape[0] - 1
    h = duration / n
    t = s
    out[0, 0] = t
    out[0, 1] = x1
    out[0, 2] = x2
    out[0, 3] = v1
    out[0, 4] = v2
    for k in range(n):
        x1, x2, v1, v2 = exp_mid_step(fp, t, x1, x2, v1, v2, h)
        t = s + (k + 1) * h
        out[k + 1, 0] = t
        out[k + 1, 1] = x1
        out[k + 1, 2] = x2
        out[k + 1, 3] = v1
        out[k + 1, 4] = v2


# -------------------------------------------------------------------------
# public API


def advance(state: PhaseState, fld, t_target: float, dt: float) -> PhaseState:
    """Integrate from state.t to t_target (either direction) with steps <= dt."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    dur = float(t_target) - state.t
    if dur == 0.0:
        return PhaseState(state.x.copy(), state.v.copy(), state.t)
    x1, x2, v1, v2 = advance_kernel(field_pack(fld), state.t, state.x[0], state.x[1], state.v[0], state.v[1], dur, dt)
    return PhaseState([x1, x2], [v1, v2], float(t_target))


def trajectory(state: PhaseState, fld, duration: float, dt: float) -> np.ndarray:
    """Sampled path as rows (t, x1, x2, v1, v2)."""
    n = max(1, int(math.ceil(abs(duration) / dt - 1e-12)))
    out = np.empty((n + 1, 5))
    trajectory_kernel(field_pack(fld), state.t, state.x[0], state.x[1], state.v[0], state.v[1], float(duration), dt, out)
    return out


@dataclass
class ExitRecord:
    direction: str  # "forward" | "backward"
    tau: float  # +-inf when trapped
    boundary_state: PhaseState | None
    boundary_class: BoundaryClass | None
    transversality: float
    in_A_K: bool = False
    horizon: float = math.inf

    @property
    def trapped(self) -> bool:
        return not math.isfinite(self.tau)

    def __str__(self):
        if self.trapped:
            return f"Trapped(horizon={self.horizon:g})"
        return f"{self.direction} tau={self.tau:.12g} at {tuple(self.boundary_state.x)} [{self.boundary_class}]"


def _domain_of(fld) -> PipeDomain:
    src = fld.a.source if isinstance(fld, TimeDependentField) else fld.source
    return src.grid.domain


def _record(direction, s, found, elapsed, st, domain, horizon, K=None):
    sign = 1.0 if direction == "forward" else -1.0
    if not found:
        return ExitRecord(direction, sign * math.inf, None, None, 0.0, False, horizon)
    x = np.array([st[0], st[1]])
    v = np.array([st[2], st[3]])
    xb = np.clip(x, [-domain.L, -1.0], [domain.L, 1.0])
    bc = classify_boundary(xb, v, domain, atol=max(POSITION_TOL, 1e-9))
    trans = 0.0 if bc.tag is Tag.Singular else abs(bc.v_dot_n)
    tau = s + sign * elapsed
    in_ak = False
    if K is not None and direction == "backward":
        in_ak = bc.tag is Tag.GammaL and K.contains(xb, v)
    return ExitRecord(direction, tau, PhaseState(xb, v, tau), bc, trans, in_ak, horizon)


def _check_start(state: PhaseState, domain: PipeDomain):
    if domain.signed_distance(state.x) > POSITION_TOL:
        raise ValueError(f"start point {tuple(state.x)} is outside the closed pipe")


def exit_forward(s: float, state: PhaseState, fld, horizon: float, dt: float = 1e-3) -> ExitRecord:
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    domain = _domain_of(fld)
    _check_start(state, domain)
    found, el, *st = trace_kernel(field_pack(fld), float(s), *state.as_array(), 1.0, dt, float(horizon))
    return _record("forward", s, found, el, st, domain, horizon)


def entry_backward(s: float, state: PhaseState, fld, horizon: float, K=None, dt: float = 1e-3) -> ExitRecord:
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    domain = _domain_of(fld)
    _check_start(state, domain)
    found, el, *st = trace_kernel(field_pack(fld), float(s), *state.as_array(), -1.0, dt, float(horizon))
    return _record("backward", s, found, el, st, domain, horizon, K)


def trace_batch(fld, s: float, pts: np.ndarray, direction: int, dt: float, horizon: float) -> np.ndarray:
    """Vectorised tracing; rows (found, elapsed, x1, x2, v1, v2)."""
    pts = np.ascontiguousarray(np.asarray(pts, dtype=float).reshape(-1, 4))
    out = np.empty((pts.shape[0], 6))
    trace_many(field_pack(fld), float(s), pts, float(direction), float(dt), float(horizon), out)
    return out


# -------------------------------------------------------------------------
# compact sample sets


@dataclass
class PhaseBox:
    """Product of closed intervals sampled on a per-axis uniform lattice.

    A degenerate interval (lo == hi) is a single value; velocity membership can
    be restricted further by a ball (center, radius).
    """

    x1: tuple[float, float]
    x2: tuple[float, float]
    v1: tuple[float, float]
    v2: tuple[float, float]
    counts: tuple[int, int, int, int] = (1, 1, 1, 1)
    v_ball: tuple[float, float, float] | None = None

    @classmethod
    def lateral(cls, domain: PipeDomain, x2, v1, v2, counts=(8, 8, 4), v_ball=None) -> "PhaseBox":
        return cls((-domain.L, -domain.L), tuple(x2), tuple(v1), tuple(v2), (1,) + tuple(counts), v_ball)

    def axes(self):
        out = []
        for (lo, hi), n in zip((self.x1, self.x2, self.v1, self.v2), self.counts):
            out.append(np.array([lo]) if (n <= 1 or lo == hi) else np.linspace(lo, hi, n))
        return out

    def samples(self) -> np.ndarray:
        grids = np.meshgrid(*self.axes(), indexing="ij")
        pts = np.stack([g.ravel() for g in grids], axis=-1)
        if self.v_ball is not None:
            c1, c2, r = self.v_ball
            keep = (pts[:, 2] - c1) ** 2 + (pts[:, 3] - c2) ** 2 <= r * r + 1e-12
            pts = pts[keep]
        return pts

    def contains(self, x, v, atol: float = 1e-9) -> bool:
        vals = (x[0], x[1], v[0], v[1])
        for val, (lo, hi) in zip(vals, (self.x1, self.x2, self.v1, self.v2)):
            if val < lo - atol or val > hi + atol:
                return False
        if self.v_ball is not None:
            c1, c2, r = self.v_ball
            if (v[0] - c1) ** 2 + (v[1] - c2) ** 2 > (r + atol) ** 2:
                return False
        return True

    @property
    def density(self) -> dict:
        return {"x1": self.counts[0], "x2": self.counts[1], "v1": self.counts[2], "v2": self.counts[3]}


def _as_samples(K) -> np.ndarray:
    if isinstance(K, PhaseBox):
        return K.samples()
    return np.asarray(K, dtype=float).reshape(-1, 4)


@dataclass
class EgcReport:
    condition: str
    satisfied: bool
    worst_exit_duration: float
    min_transversality: float
    offenders: list = field(default_factory=list)
    sample_counts: dict = field(default_factory=dict)
    T: float = math.nan

    def summary(self) -> str:
        lines = [
            f"condition: {self.condition}",
            f"satisfied: {self.satisfied}",
            f"T: {self.T:.6g}",
            f"worst_exit_duration: {self.worst_exit_duration:.12g}",
            f"min_transversality: {self.min_transversality:.12g}",
            f"offenders: {len(self.offenders)}",
        ]
        lines += [f"samples.{k}: {v}" for k, v in self.sample_counts.items()]
        return "\n".join(lines)


def _egc(condition, fld, K, T, J, horizon, dt, require_left=False):
    domain = _domain_of(fld)
    pts = _as_samples(K)
    if pts.shape[0] == 0:
        raise ValueError("sample set K is empty")
    if require_left:
        if np.any(np.abs(pts[:, 0] + domain.L) > POSITION_TOL) or np.any(pts[:, 2] <= 0):
            raise ValueError("lateral samples must lie on Gamma^l (x1 = -L, v1 > 0)")
    elif np.any(domain.signed_distance(pts[:, :2]) > POSITION_TOL):
        raise ValueError("samples must lie in the closed pipe")
    J = [0.0] if J is None else list(J)
    horizon = 10.0 * T if horizon is None else horizon
    worst = 0.0
    min_tr = math.inf
    offenders = []
    for s in J:
        res = trace_batch(fld, s, pts, +1, dt, horizon)
        for k in range(pts.shape[0]):
            found, el = res[k, 0] > 0, res[k, 1]
            x, v = pts[k, :2], pts[k, 2:]
            if not found:
                worst = math.inf
                min_tr = 0.0
                offenders.append({"s": s, "x": x.tolist(), "v": v.tolist(), "reason": f"Trapped(horizon={horizon:g})"})
                continue
            xb = np.clip(res[k, 2:4], [-domain.L, -1.0], [domain.L, 1.0])
            bc = classify_boundary(xb, res[k, 4:6], domain, atol=1e-9)
            tr = 0.0 if bc.tag is Tag.Singular else abs(bc.v_dot_n)
            worst = max(worst, el)
            min_tr = min(min_tr, tr)
            if el >= T:
                offenders.append({"s": s, "x": x.tolist(), "v": v.tolist(), "reason": f"exit after {el:.6g} >= T"})
            elif bc.tag is not Tag.SigmaPlus:
                offenders.append({"s": s, "x": x.tolist(), "v": v.tolist(), "reason": f"exit class {bc}"})
    counts = {"points": int(pts.shape[0]), "times": len(J)}
    if isinstance(K, PhaseBox):
        counts.update(K.density)
    ok = not offenders and worst < T and min_tr > domain.tangency_tolerance
    return EgcReport(condition, ok, worst, min_tr, offenders, counts, T)


def check_lateral_egc(fld, K, T: float, J: Sequence[float] | None = None, horizon=None, dt=1e-3) -> EgcReport:
    """Sampled lateral exit condition: every trajectory issued from K on the
    inflow side leaves transversally through Sigma+ before time T."""
    return _egc("lateral", fld, K, T, J, horizon, dt, require_left=True)


def check_internal_egc(fld, K, T: float, J: Sequence[float] | None = None, horizon=None, dt=1e-3) -> EgcReport:
    return _egc("internal", fld, K, T, J, horizon, dt)


def check_initial_egc(fld, K, T: float, horizon=None, dt=1e-3) -> EgcReport:
    return _egc("initial", fld, K, T, [0.0], horizon, dt)


class EgcFailure(RuntimeError):
    pass


def perturbation_radius(eta: float, grad_norm: float, T: float) -> float:
    return (eta / 4.0) / math.exp(4.0 * (1.0 + grad_norm) * T)


def egc_perturbation_radius(u_sharp, T: float, margins="auto", K=None, window: float = 0.1,
                            dt: float = 1e-3, grad_norm: float | None = None):
    """delta such that sliding-window L1-in-time perturbations of size <= delta
    keep the lateral exit condition in time T.

    margins is (eta, kappa) or "auto"; auto samples K and measures the
    clearance of each trajectory a time `window` before and after its exit,
    and the transversality over that window. Returns (delta, info).
    """
    if grad_norm is None:
        grad_norm = field_norms(u_sharp.source, weighted=False).lipschitz
    if margins == "auto":
        if K is None:
            raise ValueError("auto margins need the sample set K")
        eta, kappa = _sample_margins(u_sharp, _as_samples(K), T, window, dt)
    else:
        eta, kappa = margins
    if not (eta > 0 and kappa > 0):
        raise EgcFailure(f"sampled margins eta={eta:g}, kappa={kappa:g} are not positive; the exit condition fails")
    delta = perturbation_radius(eta, grad_norm, T)
    return delta, {"eta": eta, "kappa": kappa, "grad_norm": grad_norm, "T": T}


def _sample_margins(fld, pts, T, window, dt):
    domain = _domain_of(fld)
    fp = field_pack(fld)
    res = trace_batch(fld, 0.0, pts, +1, dt, 10.0 * T)
    eta = math.inf
    kappa = math.inf
    for k in range(pts.shape[0]):
        if res[k, 0] <= 0:
            return 0.0, 0.0
        tau = res[k, 1]
        a = pts[k]
        if tau > window:
            b = advance_kernel(fp, 0.0, a[0], a[1], a[2], a[3], tau - window, dt)
            eta = min(eta, -outside_measure(domain.L, b[0], b[1]))
        c = advance_kernel(fp, 0.0, a[0], a[1], a[2], a[3], tau + window, dt)
        r1, r2 = np.clip(c[0], -domain.L, domain.L), np.clip(c[1], -1.0, 1.0)
        eta = min(eta, math.hypot(c[0] - r1, c[1] - r2))
        xb = np.clip(res[k, 2:4], [-domain.L, -1.0], [domain.L, 1.0])
        side = domain.side_of(xb, 1e-9)
        if side in (Side.CORNER, Side.NONE):
            return eta, 0.0
        n = {Side.LEFT: (-1, 0), Side.RIGHT: (1, 0), Side.UP: (0, 1), Side.DOWN: (0, -1)}[side]
        for tt in np.linspace(max(0.0, tau - window), tau + window, 9):
            st = advance_kernel(fp, 0.0, a[0], a[1], a[2], a[3], tt, dt) if tt > 0 else tuple(a)
            kappa = min(kappa, st[2] * n[0] + st[3] * n[1])
    return eta, kappa


def exit_time_bound(fld, K, dt=1e-3, horizon=100.0) -> float:
    """Largest sampled lateral exit duration (inf if any sample is trapped)."""
    res = trace_batch(fld, 0.0, _as_samples(K), +1, dt, horizon)
    if np.any(res[:, 0] <= 0):
        return math.inf
    return float(res[:, 1].max())
