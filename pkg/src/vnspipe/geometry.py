"""Pipe geometry: the rectangle (-L, L) x (-1, 1), its phase-space boundary
pieces, the Poiseuille family and the boundary weight gamma."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

HALF_HEIGHT = 1.0


class Side(enum.IntEnum):
    NONE = 0
    LEFT = 1
    RIGHT = 2
    UP = 3
    DOWN = 4
    CORNER = 5


class Tag(enum.Enum):
    GammaL = "GammaL"
    GammaR = "GammaR"
    GammaU = "GammaU"
    GammaD = "GammaD"
    SigmaPlus = "SigmaPlus"
    SigmaMinus = "SigmaMinus"
    Singular = "Singular"
    Interior = "Interior"


_INCOMING = {Side.LEFT: Tag.GammaL, Side.RIGHT: Tag.GammaR, Side.UP: Tag.GammaU, Side.DOWN: Tag.GammaD}

# outward unit normals per side
NORMALS = {
    Side.LEFT: (-1.0, 0.0),
    Side.RIGHT: (1.0, 0.0),
    Side.UP: (0.0, 1.0),
    Side.DOWN: (0.0, -1.0),
}


@dataclass(frozen=True)
class BoundaryClass:
    tag: Tag
    side: Side
    v_dot_n: float = 0.0

    @property
    def in_sigma_minus(self) -> bool:
        return self.tag in (Tag.GammaL, Tag.GammaR, Tag.GammaU, Tag.GammaD, Tag.SigmaMinus)

    @property
    def in_sigma_plus(self) -> bool:
        return self.tag is Tag.SigmaPlus

    @property
    def is_singular(self) -> bool:
        return self.tag is Tag.Singular

    def __str__(self) -> str:
        return f"{self.tag.value}({self.side.name})"


@dataclass(frozen=True)
class PipeDomain:
    L: float = 1.0
    tangency_tolerance: float = 1e-12

    def __post_init__(self):
        if not self.L > 0:
            raise ValueError(f"half length must be positive, got {self.L}")
        if self.tangency_tolerance < 0:
            raise ValueError("tangency_tolerance must be nonnegative")

    @property
    def half_height(self) -> float:
        return HALF_HEIGHT

    @property
    def area(self) -> float:
        return 4.0 * self.L

    def signed_distance(self, x) -> np.ndarray:
        """Chebyshev-type indicator: negative inside, zero on the boundary,
        positive outside."""
        x = np.asarray(x, dtype=float)
        return np.maximum(np.abs(x[..., 0]) - self.L, np.abs(x[..., 1]) - HALF_HEIGHT)

    def contains(self, x, atol: float = 0.0) -> bool:
        return bool(self.signed_distance(x) <= atol)

    def side_of(self, x, atol: float = 1e-10) -> Side:
        x1, x2 = float(x[0]), float(x[1])
        on_lr = abs(abs(x1) - self.L) <= atol
        on_ud = abs(abs(x2) - HALF_HEIGHT) <= atol
        if on_lr and on_ud:
            return Side.CORNER
        if on_lr:
            return Side.LEFT if x1 < 0 else Side.RIGHT
        if on_ud:
            return Side.UP if x2 > 0 else Side.DOWN
        return Side.NONE


def classify_boundary(x, v, domain: PipeDomain, atol: float = 1e-10) -> BoundaryClass:
    """Classify the phase point (x, v) against the boundary decomposition.

    Corners and points with |v.n| <= tangency_tolerance are Singular; incoming
    points get their Gamma tag, outgoing points SigmaPlus.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    d = float(domain.signed_distance(x))
    if d > atol:
        raise ValueError(f"point {tuple(x)} lies outside the closed pipe")
    side = domain.side_of(x, atol)
    if side is Side.NONE:
        return BoundaryClass(Tag.Interior, Side.NONE)
    if side is Side.CORNER:
        return BoundaryClass(Tag.Singular, Side.CORNER)
    n = NORMALS[side]
    vn = float(v[0] * n[0] + v[1] * n[1])
    if abs(vn) <= domain.tangency_tolerance:
        return BoundaryClass(Tag.Singular, side, vn)
    if vn < 0:
        return BoundaryClass(_INCOMING[side], side, vn)
    return BoundaryClass(Tag.SigmaPlus, side, vn)


def gamma_weight(x2):
    """1 - x2**2; vanishes on the horizontal walls."""
    x2 = np.asarray(x2, dtype=float)
    if np.any(np.abs(x2) > HALF_HEIGHT + 1e-14):
        raise ValueError("gamma weight is only defined for x2 in [-1, 1]")
    return 1.0 - x2 * x2


@dataclass(frozen=True)
class PoiseuilleFlow:
    """u(x) = u_max (1 - lambda_profile x2^2) e1 with viscosity nu.

    lambda_profile = 1 is the no-slip profile; values in (0, 1) give the
    alternate profile bounded away from zero.
    """

    u_max: float = 0.05
    lambda_profile: float = 1.0
    nu: float = 1.0

    def __post_init__(self):
        if not self.u_max > 0:
            raise ValueError("u_max must be positive")
        if not 0 < self.lambda_profile <= 1:
            raise ValueError("lambda_profile must lie in (0, 1]")
        if not self.nu > 0:
            raise ValueError("nu must be positive")

    def __call__(self, x):
        return poiseuille_eval(self, x)

    def u1(self, x2):
        return self.u_max * (1.0 - self.lambda_profile * np.asarray(x2, dtype=float) ** 2)

    def pressure(self, x):
        x = np.asarray(x, dtype=float)
        return -2.0 * self.nu * self.lambda_profile * self.u_max * x[..., 0]

    @property
    def sup_norm(self) -> float:
        return self.u_max

    @property
    def grad_sup_norm(self) -> float:
        # |d/dx2 u1| = 2 lambda u_max |x2|, largest on the walls
        return 2.0 * self.lambda_profile * self.u_max


def poiseuille_eval(flow: PoiseuilleFlow, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.zeros(x.shape[:-1] + (2,))
    out[..., 0] = flow.u1(x[..., 1])
    return out
