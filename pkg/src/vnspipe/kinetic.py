"""Phase-space densities on a 4D grid: stationary transport along backward
characteristics, the backward semi-Lagrangian step with inflow/absorbing
boundaries, velocity moments and the a-priori monitors."""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from numba import njit, prange

from vnspipe.characteristics import TimeDependentField, field_pack, trace_kernel
from vnspipe.fields import DiscreteVelocityField, ExtendedField, eval_field, extend_field
from vnspipe.geometry import PipeDomain, PoiseuilleFlow

SNAP_MAGIC = b"VNSSNAP1"
SIDE_TOL = 1e-9


class CFLError(ValueError):
    pass


class VelocityBoxWarning(UserWarning):
    pass


# -------------------------------------------------------------------------
# data types


@dataclass
class PhaseDistribution:
    """Cell-centred values f[i, j, k, l] on Omega x [-V, V]^2."""

    domain: PipeDomain
    values: np.ndarray  # (nx, ny, nvx, nvy)
    v_box: float
    t: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 4:
            raise ValueError("phase values must be a 4D array")
        if not self.v_box > 0:
            raise ValueError("velocity box half-width must be positive")

    @classmethod
    def zeros(cls, domain: PipeDomain, dims, v_box: float, t: float = 0.0) -> "PhaseDistribution":
        return cls(domain, np.zeros(tuple(int(d) for d in dims)), v_box, t)

    @classmethod
    def from_function(cls, domain: PipeDomain, dims, v_box: float, func, t: float = 0.0) -> "PhaseDistribution":
        f = cls.zeros(domain, dims, v_box, t)
        X1, X2, V1, V2 = f.mesh()
        f.values = np.asarray(func(X1, X2, V1, V2), dtype=float) * np.ones_like(X1)
        return f

    @property
    def dims(self):
        return self.values.shape

    @property
    def hx(self):
        return 2.0 * self.domain.L / self.dims[0]

    @property
    def hy(self):
        return 2.0 / self.dims[1]

    @property
    def hv1(self):
        return 2.0 * self.v_box / self.dims[2]

    @property
    def hv2(self):
        return 2.0 * self.v_box / self.dims[3]

    @property
    def hv(self):
        return min(self.hv1, self.hv2)

    @property
    def cell_volume(self):
        return self.hx * self.hy * self.hv1 * self.hv2

    def axes(self):
        nx, ny, n1, n2 = self.dims
        L, V = self.domain.L, self.v_box
        return (
            -L + (np.arange(nx) + 0.5) * self.hx,
            -1.0 + (np.arange(ny) + 0.5) * self.hy,
            -V + (np.arange(n1) + 0.5) * self.hv1,
            -V + (np.arange(n2) + 0.5) * self.hv2,
        )

    def mesh(self):
        return np.meshgrid(*self.axes(), indexing="ij")

    def copy(self) -> "PhaseDistribution":
        return PhaseDistribution(self.domain, self.values.copy(), self.v_box, self.t)

    def shell_max(self) -> float:
        """Largest value on the outermost velocity shell."""
        v = self.values
        return float(max(np.abs(v[:, :, 0, :]).max(), np.abs(v[:, :, -1, :]).max(),
                         np.abs(v[:, :, :, 0]).max(), np.abs(v[:, :, :, -1]).max()))

    @property
    def support_ok(self) -> bool:
        return self.shell_max() == 0.0

    def sup_norm(self) -> float:
        return float(np.abs(self.values).max(initial=0.0))

    def l1_norm(self) -> float:
        return float(np.abs(self.values).sum() * self.cell_volume)

    def l2_norm(self) -> float:
        return float(np.sqrt((self.values ** 2).sum() * self.cell_volume))


@dataclass
class InflowProfile:
    """psi(t, x2, v1, v2) >= 0 on the left inlet.

    func is vectorised; x2_support is the declared support in x2, R a bound on
    |v| and a a lower bound on v1 over the support.
    """

    func: Callable
    x2_support: tuple[float, float]
    R: float
    a: float
    sup: float
    lipschitz: float = math.nan
    time_dependent: bool = False
    v_support: tuple[float, float, float, float] | None = None  # v1lo, v1hi, v2lo, v2hi

    def __post_init__(self):
        lo, hi = self.x2_support
        if self.sup > 0:
            if not (-1.0 < lo <= hi < 1.0):
                raise ValueError("inflow support in x2 must lie strictly inside (-1, 1)")
            if not self.a > 0:
                raise ValueError("inflow velocities must satisfy v1 >= a > 0 on the support")
            if not self.R > 0:
                raise ValueError("velocity support radius must be positive")

    def __call__(self, t, x2, v1, v2):
        x2 = np.asarray(x2, dtype=float)
        v1 = np.asarray(v1, dtype=float)
        v2 = np.asarray(v2, dtype=float)
        if self.sup == 0.0:
            return np.zeros(np.broadcast(x2, v1, v2).shape)
        val = np.asarray(self.func(t, x2, v1, v2), dtype=float) * np.ones(np.broadcast(x2, v1, v2).shape)
        return np.where(v1 > 0, np.maximum(val, 0.0), 0.0)

    @classmethod
    def zero(cls) -> "InflowProfile":
        return cls(lambda t, x2, v1, v2: 0.0, (0.0, 0.0), 0.0, 0.0, 0.0, 0.0)

    def scaled(self, c: float) -> "InflowProfile":
        f = self.func
        return InflowProfile(lambda t, x2, v1, v2: c * f(t, x2, v1, v2), self.x2_support, self.R, self.a,
                             c * self.sup, c * self.lipschitz, self.time_dependent, self.v_support)

    def flux(self, t: float = 0.0, n: int = 64) -> float:
        """Injected mass rate int int psi v1 dv dx2 by tensor midpoint rule."""
        if self.sup == 0.0:
            return 0.0
        lo, hi = self.x2_support
        v1lo, v1hi, v2lo, v2hi = self.v_support or (self.a, self.R, -self.R, self.R)
        xs = lo + (np.arange(n) + 0.5) * (hi - lo) / n
        a1 = v1lo + (np.arange(n) + 0.5) * (v1hi - v1lo) / n
        a2 = v2lo + (np.arange(n) + 0.5) * (v2hi - v2lo) / n
        X, V1, V2 = np.meshgrid(xs, a1, a2, indexing="ij")
        w = (hi - lo) * (v1hi - v1lo) * (v2hi - v2lo) / n ** 3
        return float(np.sum(self(t, X, V1, V2) * V1) * w)


def _bump(s):
    s = np.asarray(s, dtype=float)
    return np.where(np.abs(s) < 1.0, (1.0 - s * s) ** 2, 0.0)


BUMP_SLOPE = 8.0 / (3.0 * math.sqrt(3.0))  # max |d/ds (1 - s^2)^2|


def bump_profile(amplitude: float, x2_center: float, x2_radius: float, v_center, v_radius: float,
                 omega: float = 0.0) -> InflowProfile:
    """Smooth product bump in x2 and in |v - v_center|; optionally modulated
    in time by (1 + sin(omega t)) / 2 when omega != 0."""
    c1, c2 = float(v_center[0]), float(v_center[1])

    def func(t, x2, v1, v2):
        r = np.hypot(v1 - c1, v2 - c2) / v_radius
        val = amplitude * _bump((x2 - x2_center) / x2_radius) * _bump(r)
        if omega:
            val = val * 0.5 * (1.0 + np.sin(omega * np.asarray(t)))
        return val

    return InflowProfile(
        func,
        (x2_center - x2_radius, x2_center + x2_radius),
        R=math.hypot(abs(c1) + v_radius, abs(c2) + v_radius) if c2 else abs(c1) + v_radius,
        a=c1 - v_radius,
        sup=amplitude,
        lipschitz=amplitude * BUMP_SLOPE * (1.0 / x2_radius + 1.0 / v_radius),
        time_dependent=bool(omega),
        v_support=(c1 - v_radius, c1 + v_radius, c2 - v_radius, c2 + v_radius),
    )


@dataclass
class MomentSet:
    m0: np.ndarray
    j: np.ndarray  # (nx, ny, 2)
    m: dict = field(default_factory=dict)  # order -> local moment
    M: dict = field(default_factory=dict)  # order -> global moment

    @property
    def m2(self):
        return self.m.get(2)

    @property
    def m3(self):
        return self.m.get(3)

    @property
    def m4(self):
        return self.m.get(4)


# -------------------------------------------------------------------------
# kernels


@njit(parallel=True, cache=True)
def _trace_nodes(fp, s, ax, ay, av1, av2, direction, dt, horizon, out):
    nx, ny, n1, n2 = ax.size, ay.size, av1.size, av2.size
    N = nx * ny * n1 * n2
    for idx in prange(N):
        l = idx % n2
        r = idx // n2
        k = r % n1
        r //= n1
        j = r % ny
        i = r // ny
        found, el, a, b, c, d = trace_kernel(fp, s, ax[i], ay[j], av1[k], av2[l], direction, dt, horizon)
        out[idx, 0] = 1.0 if found else 0.0
        out[idx, 1] = el
        out[idx, 2] = a
        out[idx, 3] = b
        out[idx, 4] = c
        out[idx, 5] = d


@njit(parallel=True, cache=True)
def _trace_points(fp, s, pts, direction, dt, horizon, out):
    for k in prange(pts.shape[0]):
        found, el, a, b, c, d = trace_kernel(fp, s, pts[k, 0], pts[k, 1], pts[k, 2], pts[k, 3], direction, dt, horizon)
        out[k, 0] = 1.0 if found else 0.0
        out[k, 1] = el
        out[k, 2] = a
        out[k, 3] = b
        out[k, 4] = c
        out[k, 5] = d


@njit(cache=True)
def _axis_weights_aug(s, lo, h, n):
    """Neighbours and weight on a wall-augmented cell-centred axis: index 0 is
    the wall at lo, 1..n the centres, n+1 the wall at lo + n h."""
    p = (s - lo) / h - 0.5
    if p < 0.0:
        w = (s - lo) / (0.5 * h)
        return 0, 1, min(max(w, 0.0), 1.0)
    if p >= n - 1:
        w = (s - (lo + (n - 0.5) * h)) / (0.5 * h)
        return n, n + 1, min(max(w, 0.0), 1.0)
    i0 = int(math.floor(p))
    return i0 + 1, i0 + 2, p - i0


@njit(cache=True)
def _v_weights(c, V, h, n, width, idx, wts, swts):
    """Weights of the velocity cells for the value at c.

    width == 0: point evaluation of the hat basis. width > 0: average over
    [c - width/2, c + width/2] of the cellwise-linear reconstruction; wts
    multiply the cell values and swts the cell slopes.
    Returns the number of entries written."""
    m = 0
    if width <= 0.0:
        p = (c + V) / h - 0.5
        k0 = int(math.floor(p))
        w = p - k0
        for d in range(2):
            k = k0 + d
            wk = w if d else 1.0 - w
            if 0 <= k < n and wk != 0.0:
                idx[m] = k
                wts[m] = wk
                swts[m] = 0.0
                m += 1
        return m
    lo = c - 0.5 * width
    hi = c + 0.5 * width
    k_lo = int(math.floor((lo + V) / h))
    k_hi = int(math.floor((hi + V) / h))
    for k in range(k_lo, k_hi + 1):
        if k < 0 or k >= n:
            continue
        a = max(lo, -V + k * h)
        b = min(hi, -V + (k + 1) * h)
        if b > a:
            idx[m] = k
            wts[m] = (b - a) / width
            swts[m] = wts[m] * (0.5 * (a + b) - (-V + (k + 0.5) * h))
            m += 1
    return m


@njit(cache=True)
def _interp_one(G, S1, S2, slopes, L, hx, hy, V, hv1, hv2, x1, x2, v1, v2, vwidth, ka, kw, ks, la, lw, ls):
    nx = G.shape[0] - 2
    ny = G.shape[1] - 2
    n1, n2 = G.shape[2], G.shape[3]
    i0, i1, wx = _axis_weights_aug(x1, -L, hx, nx)
    j0, j1, wy = _axis_weights_aug(x2, -1.0, hy, ny)
    mk = _v_weights(v1, V, hv1, n1, vwidth * hv1, ka, kw, ks)
    ml = _v_weights(v2, V, hv2, n2, vwidth * hv2, la, lw, ls)
    acc = 0.0
    for a in range(2):
        ia = i1 if a else i0
        fa = wx if a else 1.0 - wx
        if fa == 0.0:
            continue
        for b in range(2):
            jb = j1 if b else j0
            fb = wy if b else 1.0 - wy
            if fb == 0.0:
                continue
            f = fa * fb
            for c in range(mk):
                for d in range(ml):
                    val = kw[c] * lw[d] * G[ia, jb, ka[c], la[d]]
                    if slopes:
                        val += ks[c] * lw[d] * S1[ia, jb, ka[c], la[d]] + kw[c] * ls[d] * S2[ia, jb, ka[c], la[d]]
                    acc += f * val
    return acc


@njit(cache=True)
def interp4(G, L, hx, hy, V, hv1, hv2, x1, x2, v1, v2, vwidth=0.0):
    """Reconstruction on the wall-augmented array G of shape (nx+2, ny+2,
    nvx, nvy): bilinear in space at (x1, x2); in velocity either bilinear at
    (v1, v2) or, when vwidth > 0, the cell average of the cellwise-constant
    data over a square of side vwidth * h_v centred there.
    Velocity nodes outside the box count as zero."""
    ka = np.empty(8, np.int64)
    la = np.empty(8, np.int64)
    kw = np.empty(8)
    ks = np.empty(8)
    lw = np.empty(8)
    ls = np.empty(8)
    return _interp_one(G, G, G, False, L, hx, hy, V, hv1, hv2, x1, x2, v1, v2, vwidth, ka, kw, ks, la, lw, ls)


@njit(parallel=True, cache=True)
def _interp_feet(G, S1, S2, slopes, L, hx, hy, V, hv1, hv2, feet, scale, vwidth, out):
    N = feet.shape[0]
    chunk = 4096
    nchunks = (N + chunk - 1) // chunk
    for ci in prange(nchunks):
        ka = np.empty(8, np.int64)
        la = np.empty(8, np.int64)
        kw = np.empty(8)
        ks = np.empty(8)
        lw = np.empty(8)
        ls = np.empty(8)
        for k in range(ci * chunk, min(N, (ci + 1) * chunk)):
            if feet[k, 0] > 0.0:
                out[k] = 0.0
            else:
                out[k] = scale * _interp_one(G, S1, S2, slopes, L, hx, hy, V, hv1, hv2, feet[k, 2], feet[k, 3],
                                             feet[k, 4], feet[k, 5], vwidth, ka, kw, ks, la, lw, ls)


@njit(cache=True)
def _scatter_feet(nx, ny, n1, n2, L, hx, hy, V, hv1, hv2, feet, scale, vwidth, W, B1, B2):
    """Adjoint of _interp_feet: W, B1, B2 accumulate the total weight with
    which each augmented node's value and slopes feed the new values."""
    ka = np.empty(8, np.int64)
    la = np.empty(8, np.int64)
    kw = np.empty(8)
    ks = np.empty(8)
    lw = np.empty(8)
    ls = np.empty(8)
    for k in range(feet.shape[0]):
        if feet[k, 0] > 0.0:
            continue
        i0, i1, wx = _axis_weights_aug(feet[k, 2], -L, hx, nx)
        j0, j1, wy = _axis_weights_aug(feet[k, 3], -1.0, hy, ny)
        mk = _v_weights(feet[k, 4], V, hv1, n1, vwidth * hv1, ka, kw, ks)
        ml = _v_weights(feet[k, 5], V, hv2, n2, vwidth * hv2, la, lw, ls)
        for a in range(2):
            ia = i1 if a else i0
            fa = wx if a else 1.0 - wx
            if fa == 0.0:
                continue
            for b in range(2):
                jb = j1 if b else j0
                fb = wy if b else 1.0 - wy
                if fb == 0.0:
                    continue
                f = scale * fa * fb
                for c in range(mk):
                    for d in range(ml):
                        W[ia, jb, ka[c], la[d]] += f * kw[c] * lw[d]
                        B1[ia, jb, ka[c], la[d]] += f * ks[c] * lw[d]
                        B2[ia, jb, ka[c], la[d]] += f * kw[c] * ls[d]


def _axis_diffs(G, axis):
    pad = [(0, 0)] * G.ndim
    pad[axis] = (1, 1)
    P = np.pad(G, pad)
    n = G.shape[axis]
    up = np.take(P, np.arange(2, n + 2), axis=axis)
    dn = np.take(P, np.arange(0, n), axis=axis)
    return up, dn


def minmod_slopes(G: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Minmod-limited cell slopes along a velocity axis, with zero outside the
    box."""
    up, dn = _axis_diffs(G, axis)
    fwd, bwd = up - G, G - dn
    out = np.where(fwd * bwd > 0.0, np.sign(fwd) * np.minimum(np.abs(fwd), np.abs(bwd)), 0.0)
    return out / h


def limited_slopes(G: np.ndarray, h1: float, h2: float):
    """Monotonized-central slopes in both velocity directions, scaled jointly
    so the cell corners of f + s1 (v1 - c1) + s2 (v2 - c2) stay inside the
    min/max over the five-point velocity stencil. Nonnegative data keep
    nonnegative reconstructions and no new extrema appear."""
    slopes = []
    hi = G.copy()
    lo = G.copy()
    for axis, h in ((2, h1), (3, h2)):
        up, dn = _axis_diffs(G, axis)
        fwd, bwd = up - G, G - dn
        mag = np.minimum(np.minimum(2.0 * np.abs(fwd), 2.0 * np.abs(bwd)), 0.5 * np.abs(fwd + bwd))
        slopes.append(np.where(fwd * bwd > 0.0, np.sign(fwd) * mag, 0.0) / h)
        np.maximum(hi, np.maximum(up, dn), out=hi)
        np.minimum(lo, np.minimum(up, dn), out=lo)
    S1, S2 = slopes
    dev = 0.5 * (np.abs(S1) * h1 + np.abs(S2) * h2)
    room = np.minimum(hi - G, G - lo)
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = np.where(dev > room, room / dev, 1.0)
    phi = np.clip(phi, 0.0, 1.0)
    return S1 * phi, S2 * phi


def wall_traces(f: PhaseDistribution, psi: InflowProfile | None = None, t: float | None = None) -> np.ndarray:
    """f extended by wall layers: psi on the inlet for v1 > 0, zero on the
    other incoming sets, and the adjacent cell value for outgoing velocities."""
    nx, ny, n1, n2 = f.dims
    _, ay, a1, a2 = f.axes()
    G = np.zeros((nx + 2, ny + 2, n1, n2))
    G[1:-1, 1:-1] = f.values
    up, down = a2 > 0, a2 < 0
    G[1:-1, -1][:, :, up] = f.values[:, -1][:, :, up]
    G[1:-1, 0][:, :, down] = f.values[:, 0][:, :, down]
    # left/right use the y-augmented columns so the corners are filled too
    pos, neg = a1 > 0, a1 < 0
    G[-1][:, pos] = G[-2][:, pos]
    G[0][:, neg] = G[1][:, neg]
    if psi is not None and psi.sup > 0:
        ya = np.concatenate([[-1.0], ay, [1.0]])
        Y, V1, V2 = np.meshgrid(ya, a1[pos], a2, indexing="ij")
        G[0][:, pos, :] = psi(f.t if t is None else t, Y, V1, V2)
    return G


def interpolate(f: PhaseDistribution, pts, psi: InflowProfile | None = None) -> np.ndarray:
    """Multilinear interpolation of f at phase points (..., 4)."""
    pts = np.asarray(pts, dtype=float)
    flat = pts.reshape(-1, 4)
    feet = np.zeros((flat.shape[0], 6))
    feet[:, 2:] = flat
    out = np.empty(flat.shape[0])
    G = wall_traces(f, psi)
    _interp_feet(G, G, G, False, f.domain.L, f.hx, f.hy, f.v_box, f.hv1, f.hv2, feet, 1.0, 0.0, out)
    return out.reshape(pts.shape[:-1])


def boundary_fluxes(f: PhaseDistribution, psi: InflowProfile | None = None, t: float | None = None) -> dict:
    """Mass and |v|^2 fluxes through the walls from the wall traces:
    'in' sums psi v1 over the inlet, 'out' sums f v.n over outgoing sets."""
    G = wall_traces(f, psi, t)
    _, _, a1, a2 = f.axes()
    V1, V2 = np.meshgrid(a1, a2, indexing="ij")
    sp2 = V1 ** 2 + V2 ** 2
    wv = f.hv1 * f.hv2
    wy = np.full(f.dims[1] + 2, f.hy)
    wy[0] = wy[-1] = 0.0  # wall rows are corner points of the vertical sides
    wx = np.full(f.dims[0], f.hx)
    res = {"in": 0.0, "out": 0.0, "in_M2": 0.0, "out_M2": 0.0}
    for col, sign, key in ((G[0], -1.0, None), (G[-1], 1.0, None)):
        vn = sign * V1
        o = np.clip(vn, 0.0, None)
        i = np.clip(-vn, 0.0, None)
        res["out"] += float(np.einsum("j,jkl,kl->", wy, col, o) * wv)
        res["out_M2"] += float(np.einsum("j,jkl,kl->", wy, col, o * sp2) * wv)
        res["in"] += float(np.einsum("j,jkl,kl->", wy, col, i) * wv)
        res["in_M2"] += float(np.einsum("j,jkl,kl->", wy, col, i * sp2) * wv)
    for row, sign in ((G[1:-1, 0], -1.0), (G[1:-1, -1], 1.0)):
        vn = sign * V2
        o = np.clip(vn, 0.0, None)
        res["out"] += float(np.einsum("i,ikl,kl->", wx, row, o) * wv)
        res["out_M2"] += float(np.einsum("i,ikl,kl->", wx, row, o * sp2) * wv)
    return res


# -------------------------------------------------------------------------
# boundary evaluation shared by the stationary and time-dependent solvers


def _inflow_values(res, domain: PipeDomain, psi: InflowProfile, t_cross) -> np.ndarray:
    """psi at crossings that land on the left inlet with v1 above the
    tangency tolerance; zero elsewhere (absorbing sides, corners, tangency)."""
    out = np.zeros(res.shape[0])
    hit = res[:, 0] > 0
    if not hit.any() or psi.sup == 0.0:
        return out
    x1 = res[:, 2]
    x2 = np.clip(res[:, 3], -1.0, 1.0)
    v1, v2 = res[:, 4], res[:, 5]
    left = hit & (np.abs(x1 + domain.L) <= SIDE_TOL) & (np.abs(np.abs(x2) - 1.0) > SIDE_TOL)
    left &= v1 > domain.tangency_tolerance
    if left.any():
        tc = t_cross[left] if np.ndim(t_cross) else t_cross
        out[left] = psi(tc, x2[left], v1[left], v2[left])
    return out


def _as_extended(u) -> ExtendedField | TimeDependentField:
    if isinstance(u, (ExtendedField, TimeDependentField)):
        return u
    if isinstance(u, DiscreteVelocityField):
        return extend_field(u)
    raise TypeError("expected a velocity field")


def _field_sup(u) -> float:
    if isinstance(u, TimeDependentField):
        return max(u.a.source.sup_face(), u.b.source.sup_face())
    src = u.source if isinstance(u, ExtendedField) else u
    if src.analytic is not None:
        return src.analytic.u_max
    return src.sup_face()


@dataclass
class TransportInfo:
    trapped: int = 0
    entered_left: int = 0
    absorbed: int = 0
    box_warning: bool = False


def stationary_transport(psi: InflowProfile, u, domain: PipeDomain, dims, v_box: float, horizon: float,
                         dt: float = 1e-2, info: TransportInfo | None = None) -> PhaseDistribution:
    """g = exp(-2 tau) psi(entry) where tau <= 0 is the backward entry time
    through the left inlet, and 0 for every other entry or trapped node."""
    ext = _as_extended(u)
    f = PhaseDistribution.zeros(domain, dims, v_box)
    need = psi.R + horizon * _field_sup(ext)
    info = info if info is not None else TransportInfo()
    if psi.sup > 0 and v_box < need:
        info.box_warning = True
        warnings.warn(f"velocity box {v_box:g} does not cover B(0, {need:g})", VelocityBoxWarning, stacklevel=2)
    if psi.sup == 0.0:
        return f
    ax = f.axes()
    N = int(np.prod(dims))
    res = np.empty((N, 6))
    _trace_nodes(field_pack(ext), 0.0, *ax, -1.0, float(dt), float(horizon), res)
    vals = _inflow_values(res, domain, psi, -res[:, 1])
    vals *= np.exp(2.0 * res[:, 1])
    info.trapped += int(np.sum(res[:, 0] == 0))
    info.entered_left += int(np.sum(vals > 0))
    f.values = vals.reshape(dims)
    return f


# -------------------------------------------------------------------------
# time-dependent semi-Lagrangian step


@dataclass
class StepTally:
    """Cumulative boundary exchange over the steps it was passed to.

    injected/absorbed are the scheme's own exchange with the walls: mass read
    from inlet ghost values or set from crossings, and the old mass that no
    new value draws on. With detailed=True the absorbed part is split by an
    adjoint pass into the wall-adjacent layer (absorbed) and the interior
    (interior_defect, which should vanish to rounding). flux_in/flux_out and
    the M2 entries are trapezoid-in-time integrals of the wall traces.
    """

    injected: float = 0.0
    absorbed: float = 0.0
    interior_defect: float = 0.0
    flux_in: float = 0.0
    flux_out: float = 0.0
    in_M2: float = 0.0
    out_M2: float = 0.0
    crossings: int = 0
    detailed: bool = False


def _tally_step(tally: StepTally, f, new, psi, G, S1, S2, res, bvals, vwidth, dt):
    nx, ny, n1, n2 = f.dims
    vol = f.cell_volume
    _, _, a1, a2 = f.axes()
    up, down, pos, neg = a2 > 0, a2 < 0, a1 > 0, a1 < 0
    scale = math.exp(2.0 * dt)
    if not tally.detailed:
        # gather restricted to the inlet ghost entries; the rest follows from
        # the exact identity new = kept + injected
        mask = np.zeros(G.shape, dtype=bool)
        mask[0][:, pos] = True
        Gm = np.where(mask, G, 0.0)
        slopes = S1 is not None
        S1m = np.where(mask, S1, 0.0) if slopes else Gm
        S2m = np.where(mask, S2, 0.0) if slopes else Gm
        part = np.empty(res.shape[0])
        _interp_feet(Gm, S1m, S2m, slopes, f.domain.L, f.hx, f.hy, f.v_box, f.hv1, f.hv2, res, scale, vwidth, part)
        injected = float(part.sum() + np.sum(bvals)) * vol
        tally.injected += injected
        tally.absorbed += float(f.values.sum() - new.values.sum()) * vol + injected
    else:
        W = np.zeros(G.shape)
        B1 = np.zeros(G.shape)
        B2 = np.zeros(G.shape)
        _scatter_feet(nx, ny, n1, n2, f.domain.L, f.hx, f.hy, f.v_box, f.hv1, f.hv2, res, scale, vwidth, W, B1, B2)
        # what each augmented entry hands to the new values
        C = W * G
        if S1 is not None:
            C += B1 * S1 + B2 * S2
        # ghost entries that copy a cell hand their share back to it, undoing
        # wall_traces in reverse order: vertical columns, then horizontal rows
        C[-2][:, pos] += C[-1][:, pos]
        C[1][:, neg] += C[0][:, neg]
        C[1:-1, -2][:, :, up] += C[1:-1, -1][:, :, up]
        C[1:-1, 1][:, :, down] += C[1:-1, 0][:, :, down]
        injected = float(np.sum(C[0][:, pos]) + np.sum(bvals)) * vol
        d = f.values - C[1:-1, 1:-1]
        layer = np.zeros(f.dims, dtype=bool)
        layer[0] = layer[-1] = True
        layer[:, 0] = layer[:, -1] = True
        tally.injected += injected
        tally.absorbed += float(d[layer].sum()) * vol
        tally.interior_defect += float(d[~layer].sum()) * vol
    a0 = boundary_fluxes(f, psi)
    b0 = boundary_fluxes(new, psi)
    tally.flux_in += 0.5 * dt * (a0["in"] + b0["in"])
    tally.flux_out += 0.5 * dt * (a0["out"] + b0["out"])
    tally.in_M2 += 0.5 * dt * (a0["in_M2"] + b0["in_M2"])
    tally.out_M2 += 0.5 * dt * (a0["out_M2"] + b0["out_M2"])
    tally.crossings += int((res[:, 0] > 0).sum())


def cfl_number(f: PhaseDistribution, u_sup: float, dt: float, domain: PipeDomain | None = None) -> float:
    vmax = math.sqrt(2.0) * f.v_box
    speed = max(vmax, vmax + u_sup)
    return dt * speed / min(f.hx, f.hy, f.hv)


def sl_step(f: PhaseDistribution, u_now, u_next, dt: float, psi: InflowProfile, safety: float = 1.0,
            tally: StepTally | None = None, velocity_remap: str = "linear") -> PhaseDistribution:
    """One backward semi-Lagrangian step from f.t to f.t + dt.

    u_now/u_next are the fluid fields at the two ends; the characteristics see
    their linear interpolation in time. Space is bilinear at the foot. In
    velocity, "linear" (default) and "average" take the exact average over the
    preimage of the velocity cell (side e^{dt} h_v) of a cellwise reconstruction,
    limited linear or constant; both conserve mass where friction
    compresses f below grid scale. "point" evaluates the multilinear
    interpolant at the foot.
    """
    if velocity_remap not in ("linear", "average", "point"):
        raise ValueError("velocity_remap must be 'linear', 'average' or 'point'")
    if not dt > 0:
        raise ValueError("dt must be positive")
    a = _as_extended(u_now)
    b = _as_extended(u_next)
    fld = TimeDependentField(a, b, f.t, f.t + dt) if a is not b else a
    usup = max(_field_sup(a), _field_sup(b))
    c = cfl_number(f, usup, dt)
    if c > safety:
        raise CFLError(f"semi-Lagrangian CFL number {c:.3g} exceeds safety {safety:g}")
    fp = field_pack(fld)
    ax = f.axes()
    N = f.values.size
    s = f.t + dt
    res = np.empty((N, 6))
    _trace_nodes(fp, s, *ax, -1.0, float(dt), float(dt), res)
    out = np.empty(N)
    G = wall_traces(f, psi)
    vwidth = 0.0 if velocity_remap == "point" else math.exp(dt)
    if velocity_remap == "linear":
        S1, S2 = limited_slopes(G, f.hv1, f.hv2)
        _interp_feet(G, S1, S2, True, f.domain.L, f.hx, f.hy, f.v_box, f.hv1, f.hv2, res, math.exp(2.0 * dt),
                     vwidth, out)
    else:
        S1 = S2 = None
        _interp_feet(G, G, G, False, f.domain.L, f.hx, f.hy, f.v_box, f.hv1, f.hv2, res, math.exp(2.0 * dt),
                     vwidth, out)
    bvals = _inflow_values(res, f.domain, psi, s - res[:, 1]) * np.exp(2.0 * res[:, 1])
    hit = res[:, 0] > 0
    out[hit] = bvals[hit]
    np.maximum(out, 0.0, out=out)
    new = PhaseDistribution(f.domain, out.reshape(f.dims), f.v_box, s)

    if tally is not None:
        _tally_step(tally, f, new, psi, G, S1, S2, res, bvals, vwidth, dt)
    return new


# -------------------------------------------------------------------------
# moments and coupling terms


def moments(f: PhaseDistribution, orders=(0, 2, 4)) -> MomentSet:
    """Midpoint quadrature in v, then in x."""
    _, _, a1, a2 = f.axes()
    V1, V2 = np.meshgrid(a1, a2, indexing="ij")
    wv = f.hv1 * f.hv2
    wx = f.hx * f.hy
    m0 = f.values.sum(axis=(2, 3)) * wv
    j = np.stack([np.tensordot(f.values, V1, axes=([2, 3], [0, 1])),
                  np.tensordot(f.values, V2, axes=([2, 3], [0, 1]))], axis=-1) * wv
    speed = np.sqrt(V1 ** 2 + V2 ** 2)
    loc, glob = {0: m0}, {0: float(m0.sum() * wx)}
    for a in orders:
        if a == 0:
            continue
        ma = np.tensordot(f.values, speed ** a, axes=([2, 3], [0, 1])) * wv
        loc[a] = ma
        glob[a] = float(ma.sum() * wx)
    return MomentSet(m0, j, loc, glob)


def _u_at_centers(f: PhaseDistribution, u) -> np.ndarray:
    ax, ay, _, _ = f.axes()
    X, Y = np.meshgrid(ax, ay, indexing="ij")
    return eval_field(_as_extended(u), np.stack([X, Y], axis=-1))


def drag_density(f: PhaseDistribution, u) -> np.ndarray:
    """j_f - m0 u on the kinetic cells, shape (nx, ny, 2)."""
    ms = moments(f, (0,))
    return ms.j - ms.m0[..., None] * _u_at_centers(f, u)


def _cells_to_points(f: PhaseDistribution, cell_vals, pts):
    """Bilinear interpolation of cell-centred data, constant beyond the
    outermost centres."""
    ax, ay, _, _ = f.axes()
    px = np.clip((pts[..., 0] - ax[0]) / f.hx, 0.0, len(ax) - 1.0)
    py = np.clip((pts[..., 1] - ay[0]) / f.hy, 0.0, len(ay) - 1.0)
    i0 = np.minimum(np.floor(px).astype(int), len(ax) - 2) if len(ax) > 1 else np.zeros_like(px, dtype=int)
    j0 = np.minimum(np.floor(py).astype(int), len(ay) - 2) if len(ay) > 1 else np.zeros_like(py, dtype=int)
    wx = px - i0
    wy = py - j0
    i1 = np.minimum(i0 + 1, len(ax) - 1)
    j1 = np.minimum(j0 + 1, len(ay) - 1)
    c = cell_vals
    return ((1 - wx) * (1 - wy) * c[i0, j0] + wx * (1 - wy) * c[i1, j0]
            + (1 - wx) * wy * c[i0, j1] + wx * wy * c[i1, j1])


def drag_force(f: PhaseDistribution, u: DiscreteVelocityField):
    """Drag source on the fluid faces as (F1 on u1 faces, F2 on u2 faces)."""
    g = u.grid
    dens = drag_density(f, u)
    F1 = _cells_to_points(f, dens[..., 0], g.u1_points())
    F2 = _cells_to_points(f, dens[..., 1], g.u2_points())
    return F1, F2


def drag_dissipation(f: PhaseDistribution, u) -> float:
    """int int f |u - v|^2 dv dx."""
    _, _, a1, a2 = f.axes()
    uc = _u_at_centers(f, u)
    d1 = uc[..., 0][:, :, None, None] - a1[None, None, :, None]
    d2 = uc[..., 1][:, :, None, None] - a2[None, None, None, :]
    return float(np.sum(f.values * (d1 * d1 + d2 * d2)) * f.cell_volume)


def work_against_profile(f: PhaseDistribution, u, flow: PoiseuilleFlow) -> float:
    """int (m0 u - j) . u_p dx."""
    ms = moments(f, (0,))
    ax, ay, _, _ = f.axes()
    uc = _u_at_centers(f, u)
    up1 = flow.u1(ay)[None, :]
    integrand = (ms.m0 * uc[..., 0] - ms.j[..., 0]) * up1
    return float(integrand.sum() * f.hx * f.hy)


def velocity_support_radius(values: np.ndarray, f: PhaseDistribution, tol: float = 0.0) -> float:
    """Largest |v| over nodes where |values| > tol (0 if none)."""
    _, _, a1, a2 = f.axes()
    mask = (np.abs(values) > tol).any(axis=(0, 1))
    if not mask.any():
        return 0.0
    V1, V2 = np.meshgrid(a1, a2, indexing="ij")
    return float(np.hypot(V1, V2)[mask].max())


def lipschitz_estimate(f: PhaseDistribution, band_mask: np.ndarray | None = None) -> dict:
    """Discrete difference quotients in each phase direction; pairs touching
    band_mask (e.g. a layer around a jump set) are excluded."""
    h = (f.hx, f.hy, f.hv1, f.hv2)
    out = {}
    for ax, name in enumerate(("x1", "x2", "v1", "v2")):
        d = np.abs(np.diff(f.values, axis=ax)) / h[ax]
        if band_mask is not None:
            sl0 = [slice(None)] * 4
            sl1 = [slice(None)] * 4
            sl0[ax] = slice(None, -1)
            sl1[ax] = slice(1, None)
            d = np.where(band_mask[tuple(sl0)] | band_mask[tuple(sl1)], 0.0, d)
        out[name] = float(d.max(initial=0.0))
    out["x"] = max(out["x1"], out["x2"])
    out["v"] = max(out["v1"], out["v2"])
    return out


# -------------------------------------------------------------------------
# monitors


def max_principle_residual(f_t: PhaseDistribution, f_0: PhaseDistribution, psi: InflowProfile, t: float) -> float:
    """||f(t)||_inf - e^{2t}(||f0||_inf + ||psi||_inf); nonpositive when the
    bound holds."""
    bound = math.exp(2.0 * t) * (f_0.sup_norm() + psi.sup)
    if f_t.sup_norm() == 0.0 and bound == 0.0:
        return 0.0
    return f_t.sup_norm() - bound


@dataclass
class MassHistory:
    t: list = field(default_factory=list)
    M0: list = field(default_factory=list)
    injected: list = field(default_factory=list)  # cumulative
    absorbed: list = field(default_factory=list)  # cumulative

    def record(self, t, M0, tally: StepTally | None = None):
        inj = tally.injected if tally else 0.0
        ab = tally.absorbed if tally else 0.0
        self.t.append(float(t))
        self.M0.append(float(M0))
        self.injected.append(float(inj))
        self.absorbed.append(float(ab))


def mass_balance_residual(history: MassHistory, relative: bool = False) -> float:
    """max_t |M0(t) - M0(0) - (injected - absorbed)|, optionally divided by
    the mass scale max(M0(0) + injected)."""
    if not history.t:
        return 0.0
    M0 = np.asarray(history.M0)
    net = np.asarray(history.injected) - np.asarray(history.absorbed)
    r = float(np.abs(M0 - M0[0] - net).max())
    if relative:
        scale = float(max(M0[0] + np.asarray(history.injected).max(), np.abs(M0).max()))
        return r / scale if scale > 0 else 0.0
    return r


def interpolation_ratio(f: PhaseDistribution, beta: float, gamma: float) -> float:
    """||m_beta f||_{(gamma+2)/(beta+2)} / (||f||_inf^{(gamma-beta)/(gamma+2)} M_gamma^{(beta+2)/(gamma+2)})."""
    ms = moments(f, tuple(sorted({beta, gamma} - {0})) + (0,))
    mb = ms.m[beta] if beta else ms.m0
    Mg = ms.M[gamma]
    fi = f.sup_norm()
    if Mg == 0.0 or fi == 0.0:
        return 0.0
    p = (gamma + 2.0) / (beta + 2.0)
    num = float((np.sum(np.abs(mb) ** p) * f.hx * f.hy) ** (1.0 / p))
    return num / (fi ** ((gamma - beta) / (gamma + 2.0)) * Mg ** ((beta + 2.0) / (gamma + 2.0)))


# -------------------------------------------------------------------------
# I/O


def write_snapshot(f: PhaseDistribution, path) -> Path:
    """Binary layout: magic, nx, ny, nvx, nvy (int64), V_box (float64), then
    the values (float64), all little-endian with x1 the slowest index."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(SNAP_MAGIC)
        fh.write(struct.pack("<qqqqd", *f.dims, f.v_box))
        fh.write(np.ascontiguousarray(f.values, dtype="<f8").tobytes())
    return path


def read_snapshot(path, domain: PipeDomain | None = None, t: float = 0.0) -> PhaseDistribution:
    raw = Path(path).read_bytes()
    if raw[: len(SNAP_MAGIC)] != SNAP_MAGIC:
        raise ValueError(f"{path}: not a {SNAP_MAGIC.decode()} snapshot")
    off = len(SNAP_MAGIC)
    nx, ny, n1, n2, V = struct.unpack_from("<qqqqd", raw, off)
    off += struct.calcsize("<qqqqd")
    n = nx * ny * n1 * n2
    if len(raw) - off != 8 * n:
        raise ValueError(f"{path}: truncated snapshot")
    vals = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(nx, ny, n1, n2).astype(float)
    return PhaseDistribution(domain or PipeDomain(), vals, V, t)


def write_moments_csv(f: PhaseDistribution, path) -> Path:
    path = Path(path)
    ms = moments(f, (2, 4))
    ax, ay, _, _ = f.axes()
    X, Y = np.meshgrid(ax, ay, indexing="ij")
    data = np.column_stack([X.ravel(), Y.ravel(), ms.m0.ravel(), ms.j[..., 0].ravel(), ms.j[..., 1].ravel(),
                            ms.m2.ravel(), ms.m4.ravel()])
    np.savetxt(path, data, delimiter=",", header="x,y,m0,j1,j2,m2,m4", comments="", fmt="%.17g")
    return path
