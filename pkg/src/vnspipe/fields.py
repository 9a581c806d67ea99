"""Staggered (MAC) velocity fields on the pipe, their Lipschitz extension to the
plane, and the norms used by the fixed-point and stability machinery."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numba import njit

from vnspipe.geometry import HALF_HEIGHT, PipeDomain, PoiseuilleFlow

FIELD_MAGIC = b"VNSFLD1"
DEFAULT_MARGIN = 1.0


@dataclass(frozen=True)
class MacGrid:
    domain: PipeDomain
    nx: int
    ny: int

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError("MAC grid needs at least 2 cells per axis")

    @property
    def L(self) -> float:
        return self.domain.L

    @property
    def hx(self) -> float:
        return 2.0 * self.domain.L / self.nx

    @property
    def hy(self) -> float:
        return 2.0 * HALF_HEIGHT / self.ny

    @property
    def xf(self):
        return np.linspace(-self.L, self.L, self.nx + 1)

    @property
    def yf(self):
        return np.linspace(-HALF_HEIGHT, HALF_HEIGHT, self.ny + 1)

    @property
    def xc(self):
        return -self.L + (np.arange(self.nx) + 0.5) * self.hx

    @property
    def yc(self):
        return -HALF_HEIGHT + (np.arange(self.ny) + 0.5) * self.hy

    @property
    def xa(self):
        """x-points of the u2 evaluation lattice: walls plus cell centers."""
        return np.concatenate([[-self.L], self.xc, [self.L]])

    @property
    def ya(self):
        return np.concatenate([[-HALF_HEIGHT], self.yc, [HALF_HEIGHT]])

    def u1_points(self):
        X, Y = np.meshgrid(self.xf, self.yc, indexing="ij")
        return np.stack([X, Y], axis=-1)

    def u2_points(self):
        X, Y = np.meshgrid(self.xc, self.yf, indexing="ij")
        return np.stack([X, Y], axis=-1)

    def cell_centers(self):
        X, Y = np.meshgrid(self.xc, self.yc, indexing="ij")
        return np.stack([X, Y], axis=-1)

    def corner_nodes(self):
        X, Y = np.meshgrid(self.xf, self.yf, indexing="ij")
        return np.stack([X, Y], axis=-1)


@dataclass
class BoundaryData:
    """Dirichlet data at the boundary face centers.

    Normal components sit on boundary faces (u1 at x = +-L, u2 at y = +-1);
    tangential components are wall values at the lattice abscissae.
    """

    u1_left: np.ndarray  # (ny,)
    u1_right: np.ndarray
    u2_bottom: np.ndarray  # (nx,)
    u2_top: np.ndarray
    u1_bottom: np.ndarray  # (nx+1,) tangential on y = -1
    u1_top: np.ndarray
    u2_left: np.ndarray  # (ny+1,) tangential on x = -L
    u2_right: np.ndarray

    @classmethod
    def from_function(cls, grid: MacGrid, g) -> "BoundaryData":
        L = grid.L
        xf, yf, xc, yc = grid.xf, grid.yf, grid.xc, grid.yc

        def ev(x1, x2):
            pts = np.stack(np.broadcast_arrays(np.asarray(x1, float), np.asarray(x2, float)), axis=-1)
            return np.asarray(g(pts), dtype=float)

        return cls(
            u1_left=ev(-L, yc)[:, 0],
            u1_right=ev(L, yc)[:, 0],
            u2_bottom=ev(xc, -1.0)[:, 1],
            u2_top=ev(xc, 1.0)[:, 1],
            u1_bottom=ev(xf, -1.0)[:, 0],
            u1_top=ev(xf, 1.0)[:, 0],
            u2_left=ev(-L, yf)[:, 1],
            u2_right=ev(L, yf)[:, 1],
        )

    @classmethod
    def zeros(cls, grid: MacGrid) -> "BoundaryData":
        return cls.from_function(grid, lambda p: np.zeros(p.shape[:-1] + (2,)))

    def copy(self) -> "BoundaryData":
        return BoundaryData(**{k: np.array(v, dtype=float) for k, v in self.__dict__.items()})

    def net_flux(self, grid: MacGrid) -> float:
        return float(
            (self.u1_right.sum() - self.u1_left.sum()) * grid.hy
            + (self.u2_top.sum() - self.u2_bottom.sum()) * grid.hx
        )

    def wall_trace_max(self) -> float:
        """Largest |u| on the horizontal walls y = +-1."""
        return float(
            max(
                np.abs(self.u1_bottom).max(),
                np.abs(self.u1_top).max(),
                np.abs(self.u2_bottom).max(),
                np.abs(self.u2_top).max(),
            )
        )


@dataclass
class DiscreteVelocityField:
    grid: MacGrid
    u1: np.ndarray  # (nx+1, ny)
    u2: np.ndarray  # (nx, ny+1)
    bc: BoundaryData
    analytic: PoiseuilleFlow | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        g = self.grid
        self.u1 = np.asarray(self.u1, dtype=float)
        self.u2 = np.asarray(self.u2, dtype=float)
        if self.u1.shape != (g.nx + 1, g.ny) or self.u2.shape != (g.nx, g.ny + 1):
            raise ValueError("face arrays do not match the grid")

    # construction -----------------------------------------------------
    @classmethod
    def zeros(cls, grid: MacGrid) -> "DiscreteVelocityField":
        return cls(grid, np.zeros((grid.nx + 1, grid.ny)), np.zeros((grid.nx, grid.ny + 1)), BoundaryData.zeros(grid))

    @classmethod
    def from_function(cls, grid: MacGrid, g, analytic=None) -> "DiscreteVelocityField":
        """Sample g on the faces; boundary faces take the exact trace."""
        u1 = np.asarray(g(grid.u1_points()), dtype=float)[..., 0]
        u2 = np.asarray(g(grid.u2_points()), dtype=float)[..., 1]
        bc = BoundaryData.from_function(grid, g)
        f = cls(grid, u1, u2, bc, analytic=analytic)
        f.enforce_boundary()
        return f

    @classmethod
    def poiseuille(cls, grid: MacGrid, flow: PoiseuilleFlow) -> "DiscreteVelocityField":
        return cls.from_function(grid, flow, analytic=flow)

    def copy(self) -> "DiscreteVelocityField":
        return DiscreteVelocityField(self.grid, self.u1.copy(), self.u2.copy(), self.bc.copy(), self.analytic, dict(self.meta))

    def with_faces(self, u1, u2, analytic=None) -> "DiscreteVelocityField":
        out = DiscreteVelocityField(self.grid, u1, u2, self.bc.copy(), analytic)
        out.enforce_boundary()
        return out

    def enforce_boundary(self):
        self.u1[0, :] = self.bc.u1_left
        self.u1[-1, :] = self.bc.u1_right
        self.u2[:, 0] = self.bc.u2_bottom
        self.u2[:, -1] = self.bc.u2_top

    # arithmetic -------------------------------------------------------
    def __sub__(self, other: "DiscreteVelocityField") -> "DiscreteVelocityField":
        bc = BoundaryData(**{k: getattr(self.bc, k) - getattr(other.bc, k) for k in self.bc.__dict__})
        return DiscreteVelocityField(self.grid, self.u1 - other.u1, self.u2 - other.u2, bc)

    def __add__(self, other: "DiscreteVelocityField") -> "DiscreteVelocityField":
        bc = BoundaryData(**{k: getattr(self.bc, k) + getattr(other.bc, k) for k in self.bc.__dict__})
        return DiscreteVelocityField(self.grid, self.u1 + other.u1, self.u2 + other.u2, bc)

    def scaled(self, c: float) -> "DiscreteVelocityField":
        bc = BoundaryData(**{k: c * getattr(self.bc, k) for k in self.bc.__dict__})
        return DiscreteVelocityField(self.grid, c * self.u1, c * self.u2, bc)

    # discrete calculus --------------------------------------------------
    def divergence(self) -> np.ndarray:
        g = self.grid
        return (self.u1[1:, :] - self.u1[:-1, :]) / g.hx + (self.u2[:, 1:] - self.u2[:, :-1]) / g.hy

    def lattice_arrays(self):
        """u1 on xf x ya and u2 on xa x yf, walls included."""
        g = self.grid
        A1 = np.empty((g.nx + 1, g.ny + 2))
        A1[:, 0] = self.bc.u1_bottom
        A1[:, 1:-1] = self.u1
        A1[:, -1] = self.bc.u1_top
        A2 = np.empty((g.nx + 2, g.ny + 1))
        A2[0, :] = self.bc.u2_left
        A2[1:-1, :] = self.u2
        A2[-1, :] = self.bc.u2_right
        return A1, A2

    def sup_face(self) -> float:
        return float(max(np.abs(self.u1).max(), np.abs(self.u2).max()))

    def at_cell_centers(self) -> np.ndarray:
        uc = 0.5 * (self.u1[1:, :] + self.u1[:-1, :])
        vc = 0.5 * (self.u2[:, 1:] + self.u2[:, :-1])
        return np.stack([uc, vc], axis=-1)


# -------------------------------------------------------------------------
# numba evaluation kernels; the extension is reflection across the nearest
# edges times a cutoff that is 1 on the closed pipe and 0 beyond the collar


@njit(cache=True)
def _lattice_index(s, lo, h, n):
    # lattice [lo, lo+h/2, lo+3h/2, ..., lo + n h]; returns segment and weight
    j = int(np.floor((s - lo) / h + 0.5))
    if j < 0:
        j = 0
    if j > n:
        j = n
    if j == 0:
        a = lo
        b = lo + 0.5 * h
    elif j == n:
        a = lo + (n - 0.5) * h
        b = lo + n * h
    else:
        a = lo + (j - 0.5) * h
        b = lo + (j + 0.5) * h
    w = (s - a) / (b - a)
    if w < 0.0:
        w = 0.0
    if w > 1.0:
        w = 1.0
    return j, w


@njit(cache=True)
def _uniform_index(s, lo, h, n):
    # lattice lo + k h, k = 0..n
    j = int(np.floor((s - lo) / h))
    if j < 0:
        j = 0
    if j > n - 1:
        j = n - 1
    w = (s - (lo + j * h)) / h
    if w < 0.0:
        w = 0.0
    if w > 1.0:
        w = 1.0
    return j, w


@njit(cache=True)
def eval_inside(A1, A2, L, hx, hy, nx, ny, x1, x2):
    """Bilinear evaluation of the lattice arrays at a point of the closed pipe."""
    i, wx = _uniform_index(x1, -L, hx, nx)
    j, wy = _lattice_index(x2, -1.0, hy, ny)
    u1 = ((1 - wx) * (1 - wy) * A1[i, j] + wx * (1 - wy) * A1[i + 1, j]
          + (1 - wx) * wy * A1[i, j + 1] + wx * wy * A1[i + 1, j + 1])
    i, wx = _lattice_index(x1, -L, hx, nx)
    j, wy = _uniform_index(x2, -1.0, hy, ny)
    u2 = ((1 - wx) * (1 - wy) * A2[i, j] + wx * (1 - wy) * A2[i + 1, j]
          + (1 - wx) * wy * A2[i, j + 1] + wx * wy * A2[i + 1, j + 1])
    return u1, u2


@njit(cache=True)
def reflect_point(L, x1, x2):
    """Reflected point (clipped into the closed pipe) and the distance of
    (x1, x2) to the closed pipe."""
    dx = 0.0
    dy = 0.0
    r1 = x1
    r2 = x2
    if x1 > L:
        dx = x1 - L
        r1 = 2 * L - x1
    elif x1 < -L:
        dx = -L - x1
        r1 = -2 * L - x1
    if x2 > 1.0:
        dy = x2 - 1.0
        r2 = 2.0 - x2
    elif x2 < -1.0:
        dy = -1.0 - x2
        r2 = -2.0 - x2
    r1 = min(max(r1, -L), L)
    r2 = min(max(r2, -1.0), 1.0)
    return r1, r2, np.sqrt(dx * dx + dy * dy)


@njit(cache=True)
def eval_extended(kind, A1, A2, L, hx, hy, nx, ny, umax, lam, margin, x1, x2):
    """Extended field: kind 0 lattice-bilinear, kind 1 analytic Poiseuille."""
    r1, r2, dist = reflect_point(L, x1, x2)
    if dist >= margin:
        return 0.0, 0.0
    cut = 1.0 - dist / margin
    if kind == 1:
        return cut * umax * (1.0 - lam * r2 * r2), 0.0
    u1, u2 = eval_inside(A1, A2, L, hx, hy, nx, ny, r1, r2)
    return cut * u1, cut * u2


@dataclass
class ExtendedField:
    source: DiscreteVelocityField
    margin: float = DEFAULT_MARGIN

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError("extension margin must be positive")
        self._A1, self._A2 = self.source.lattice_arrays()

    def pack(self):
        """Flat argument tuple consumed by the numba kernels."""
        g = self.source.grid
        an = self.source.analytic
        kind = 1 if an is not None else 0
        umax = an.u_max if an is not None else 0.0
        lam = an.lambda_profile if an is not None else 1.0
        return (kind, self._A1, self._A2, g.L, g.hx, g.hy, g.nx, g.ny, umax, lam, self.margin)

    def __call__(self, x) -> np.ndarray:
        return eval_field(self, x)

    @property
    def L(self) -> float:
        return self.source.grid.L


@njit(cache=True)
def _eval_many(kind, A1, A2, L, hx, hy, nx, ny, umax, lam, margin, pts, out):
    for k in range(pts.shape[0]):
        a, b = eval_extended(kind, A1, A2, L, hx, hy, nx, ny, umax, lam, margin, pts[k, 0], pts[k, 1])
        out[k, 0] = a
        out[k, 1] = b


def eval_field(field: ExtendedField, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    pts = np.ascontiguousarray(x.reshape(-1, 2))
    out = np.zeros_like(pts)
    _eval_many(*field.pack(), pts, out)
    return out.reshape(x.shape)


def extend_field(field: DiscreteVelocityField, margin: float = DEFAULT_MARGIN) -> ExtendedField:
    return ExtendedField(field, margin)


def restrict(ext: ExtendedField, grid: MacGrid) -> DiscreteVelocityField:
    return DiscreteVelocityField.from_function(grid, ext)


# -------------------------------------------------------------------------
# norms


class WeightedNormError(ValueError):
    """gamma^{-1} u is unbounded because u does not vanish on y = +-1."""


@dataclass
class FieldNorms:
    sup_norm: float
    lipschitz: float
    weighted_sup: float
    excluded_band: float = 0.0

    @property
    def e_norm(self) -> float:
        return self.sup_norm + self.lipschitz + self.weighted_sup

    @property
    def w1inf(self) -> float:
        return self.sup_norm + self.lipschitz


def node_values(field: DiscreteVelocityField) -> np.ndarray:
    """Velocity at the cell corners (including the boundary)."""
    ext = ExtendedField(field, DEFAULT_MARGIN)
    return eval_field(ext, field.grid.corner_nodes())


def _discrete_lipschitz(vals, hx, hy):
    dx = np.linalg.norm(np.diff(vals, axis=0), axis=-1) / hx
    dy = np.linalg.norm(np.diff(vals, axis=1), axis=-1) / hy
    return float(max(dx.max(initial=0.0), dy.max(initial=0.0)))


def field_norms(field: DiscreteVelocityField, weighted: bool = True, gamma_floor: float | None = None,
                trace_tol: float = 1e-12) -> FieldNorms:
    """sup, discrete Lipschitz and gamma-weighted sup norms over the corner lattice.

    Fields with analytic Poiseuille backing get the closed-form values.
    """
    g = field.grid
    if gamma_floor is None:
        gamma_floor = 0.5 * g.hy
    an = field.analytic
    if an is not None:
        w = an.u_max if an.lambda_profile == 1.0 else np.inf
        if weighted and not np.isfinite(w):
            raise WeightedNormError("alternate Poiseuille profile has a nonzero wall trace")
        return FieldNorms(an.u_max, an.grad_sup_norm, w if weighted else 0.0, 0.0)
    vals = node_values(field)
    sup = float(np.linalg.norm(vals, axis=-1).max())
    lip = _discrete_lipschitz(vals, g.hx, g.hy)
    wsup = 0.0
    band = 0.0
    if weighted:
        if field.bc.wall_trace_max() > trace_tol * max(1.0, sup):
            raise WeightedNormError("velocity trace is nonzero on y = +-1; gamma^-1 u is unbounded")
        gam = 1.0 - g.yf ** 2
        keep = gam >= gamma_floor
        mag = np.linalg.norm(vals[:, keep, :], axis=-1)
        wsup = float((mag / gam[keep][None, :]).max(initial=0.0))
        band = float(1.0 - np.sqrt(max(0.0, 1.0 - gamma_floor)))
    return FieldNorms(sup, lip, wsup, band)


def e_norm(field: DiscreteVelocityField) -> float:
    return field_norms(field).e_norm


def _trap_weights(n, h):
    w = np.full(n + 1, h)
    w[0] = w[-1] = 0.5 * h
    return w


def l2_norm(field: DiscreteVelocityField) -> float:
    """Midpoint-in-the-normal, trapezoid-along-the-face quadrature of |u|^2."""
    g = field.grid
    wx = _trap_weights(g.nx, g.hx)
    wy = _trap_weights(g.ny, g.hy)
    s1 = np.sum(field.u1 ** 2 * wx[:, None]) * g.hy
    s2 = np.sum(field.u2 ** 2 * wy[None, :]) * g.hx
    return float(np.sqrt(s1 + s2))


def h1_seminorm(field: DiscreteVelocityField) -> float:
    g = field.grid
    A1, A2 = field.lattice_arrays()
    ya, xa = g.ya, g.xa
    wx = _trap_weights(g.nx, g.hx)
    wy = _trap_weights(g.ny, g.hy)
    # d1 u1 on cell centers, d2 u2 on cell centers
    s = np.sum(((field.u1[1:] - field.u1[:-1]) / g.hx) ** 2) * g.hx * g.hy
    s += np.sum(((field.u2[:, 1:] - field.u2[:, :-1]) / g.hy) ** 2) * g.hx * g.hy
    # d2 u1 between y-lattice points (half intervals at the walls)
    dy = np.diff(ya)
    s += np.sum((np.diff(A1, axis=1) / dy[None, :]) ** 2 * dy[None, :] * wx[:, None])
    dx = np.diff(xa)
    s += np.sum((np.diff(A2, axis=0) / dx[:, None]) ** 2 * dx[:, None] * wy[None, :])
    return float(np.sqrt(s))


def inner_product(a: DiscreteVelocityField, b: DiscreteVelocityField) -> float:
    g = a.grid
    wx = _trap_weights(g.nx, g.hx)
    wy = _trap_weights(g.ny, g.hy)
    return float(np.sum(a.u1 * b.u1 * wx[:, None]) * g.hy + np.sum(a.u2 * b.u2 * wy[None, :]) * g.hx)


# -------------------------------------------------------------------------
# snapshots


def write_field_snapshot(field: DiscreteVelocityField, path) -> Path:
    """Binary layout: magic, nx, ny (int64), L (float64), u1 faces, u2 faces,
    then the tangential wall traces u1_bottom, u1_top, u2_left, u2_right.
    Everything little-endian, arrays row-major with x the slow index."""
    path = Path(path)
    g = field.grid
    with open(path, "wb") as fh:
        fh.write(FIELD_MAGIC)
        fh.write(struct.pack("<qqd", g.nx, g.ny, g.L))
        for arr in (field.u1, field.u2, field.bc.u1_bottom, field.bc.u1_top, field.bc.u2_left, field.bc.u2_right):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return path


def read_field_snapshot(path, tangency_tolerance: float = 1e-12) -> DiscreteVelocityField:
    raw = Path(path).read_bytes()
    if raw[: len(FIELD_MAGIC)] != FIELD_MAGIC:
        raise ValueError(f"{path}: not a {FIELD_MAGIC.decode()} snapshot")
    off = len(FIELD_MAGIC)
    nx, ny, L = struct.unpack_from("<qqd", raw, off)
    off += struct.calcsize("<qqd")
    grid = MacGrid(PipeDomain(L, tangency_tolerance), int(nx), int(ny))

    def take(shape):
        nonlocal off
        n = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).astype(float)
        off += 8 * n
        return arr

    u1 = take((nx + 1, ny))
    u2 = take((nx, ny + 1))
    bc = BoundaryData(
        u1_left=u1[0].copy(), u1_right=u1[-1].copy(), u2_bottom=u2[:, 0].copy(), u2_top=u2[:, -1].copy(),
        u1_bottom=np.zeros(nx + 1), u1_top=np.zeros(nx + 1), u2_left=np.zeros(ny + 1), u2_right=np.zeros(ny + 1),
    )
    if off < len(raw):
        bc.u1_bottom = take((nx + 1,))
        bc.u1_top = take((nx + 1,))
        bc.u2_left = take((ny + 1,))
        bc.u2_right = take((ny + 1,))
    return DiscreteVelocityField(grid, u1, u2, bc)


def write_field_csv(field: DiscreteVelocityField, path) -> Path:
    path = Path(path)
    pts = field.grid.cell_centers().reshape(-1, 2)
    vals = field.at_cell_centers().reshape(-1, 2)
    data = np.column_stack([pts, vals])
    np.savetxt(path, data, delimiter=",", header="x,y,u1,u2", comments="", fmt="%.17g")
    return path


def with_boundary(field: DiscreteVelocityField, bc: BoundaryData) -> DiscreteVelocityField:
    out = replace(field, u1=field.u1.copy(), u2=field.u2.copy(), bc=bc.copy(), analytic=None, meta={})
    out.enforce_boundary()
    return out
