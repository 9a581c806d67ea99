import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vnspipe.fields import (
    DiscreteVelocityField,
    MacGrid,
    WeightedNormError,
    eval_field,
    extend_field,
    field_norms,
    h1_seminorm,
    l2_norm,
    read_field_snapshot,
    restrict,
    write_field_csv,
    write_field_snapshot,
)
from vnspipe.geometry import PipeDomain, PoiseuilleFlow


def _grid(nx=16, ny=8, L=1.0):
    return MacGrid(PipeDomain(L), nx, ny)


def test_eval_examples():
    g = _grid()
    up = extend_field(DiscreteVelocityField.poiseuille(g, PoiseuilleFlow(1.0)))
    assert np.allclose(eval_field(up, [0.0, 0.0]), [1.0, 0.0])
    assert np.allclose(eval_field(up, [5.0, 0.0]), 0.0)
    z = extend_field(DiscreteVelocityField.zeros(g))
    assert np.allclose(eval_field(z, [[0.3, 0.2], [1.2, -1.1]]), 0.0)


def test_constant_field_extension():
    g = _grid()
    f = DiscreteVelocityField.from_function(g, lambda p: np.broadcast_to([0.7, -0.2], p.shape).copy())
    ext = extend_field(f, margin=1.0)
    inside = eval_field(ext, np.array([[0.1, 0.3], [-0.9, 0.95]]))
    assert np.allclose(inside, [0.7, -0.2])
    assert np.allclose(eval_field(ext, [3.0, 0.0]), 0.0)
    pts = np.stack(np.meshgrid(np.linspace(-2, 2, 81), np.linspace(-2, 2, 81)), -1).reshape(-1, 2)
    assert np.linalg.norm(eval_field(ext, pts), axis=-1).max() <= np.hypot(0.7, 0.2) + 1e-12


def test_poiseuille_extension_continuous_at_wall():
    g = _grid()
    up = DiscreteVelocityField.from_function(g, PoiseuilleFlow(1.0))  # lattice, not analytic
    ext = extend_field(up)
    for eps in (1e-3, 1e-6):
        a = eval_field(ext, [0.2, 1 - eps])
        b = eval_field(ext, [0.2, 1 + eps])
        assert np.abs(a - b).max() < 10 * eps


def test_restrict_identity():
    g = _grid()
    f = DiscreteVelocityField.from_function(g, lambda p: np.stack([np.sin(p[..., 0]) * (1 - p[..., 1] ** 2),
                                                                    np.zeros(p.shape[:-1])], -1))
    back = restrict(extend_field(f), g)
    assert np.allclose(back.u1, f.u1, atol=1e-14)
    assert np.allclose(back.u2, f.u2, atol=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_extension_factor_two(seed):
    rng = np.random.default_rng(seed)
    g = _grid(8, 6)
    f = DiscreteVelocityField.zeros(g)
    f.u1[...] = rng.normal(size=f.u1.shape)
    f.u2[...] = rng.normal(size=f.u2.shape)
    for name in ("u1_bottom", "u1_top", "u2_left", "u2_right", "u1_left", "u1_right", "u2_bottom", "u2_top"):
        arr = getattr(f.bc, name)
        arr[...] = rng.normal(size=arr.shape)
    f.enforce_boundary()
    margin = 0.5
    ext = extend_field(f, margin=margin)
    h = 0.02
    xs = np.arange(-1.5, 1.5 + h / 2, h)
    vals = eval_field(ext, np.stack(np.meshgrid(xs, xs, indexing="ij"), -1))
    inside = (np.abs(xs) <= 1.0 + 1e-12)
    src = vals[np.ix_(inside, inside)]

    def lip(a):
        return max(np.linalg.norm(np.diff(a, axis=0), axis=-1).max(),
                   np.linalg.norm(np.diff(a, axis=1), axis=-1).max()) / h

    sup_src = np.linalg.norm(src, axis=-1).max()
    assert np.linalg.norm(vals, axis=-1).max() <= 2 * sup_src + 1e-12
    # reflection keeps the Lipschitz constant; the cutoff adds sup / margin
    assert lip(vals) <= 2 * lip(src) + sup_src / margin + 1e-9


def test_norm_examples():
    g = _grid()
    nrm = field_norms(DiscreteVelocityField.poiseuille(g, PoiseuilleFlow(1.0)))
    assert (nrm.sup_norm, nrm.lipschitz, nrm.weighted_sup, nrm.e_norm) == pytest.approx((1, 2, 1, 4))
    z = field_norms(DiscreteVelocityField.zeros(g))
    assert z.e_norm == 0.0
    bad = DiscreteVelocityField.from_function(g, lambda p: np.broadcast_to([1.0, 0.0], p.shape).copy())
    with pytest.raises(WeightedNormError):
        field_norms(bad)


def test_lattice_norms_of_sampled_poiseuille():
    g = _grid(32, 64)
    f = DiscreteVelocityField.from_function(g, PoiseuilleFlow(1.0))
    nrm = field_norms(f)
    assert nrm.sup_norm == pytest.approx(1.0, abs=1e-3)
    assert nrm.lipschitz == pytest.approx(2.0, abs=0.05)
    assert nrm.weighted_sup <= nrm.lipschitz + g.hy


def test_l2_examples():
    g = _grid(32, 32)
    f = DiscreteVelocityField.from_function(g, PoiseuilleFlow(1.0))
    assert l2_norm(f) ** 2 == pytest.approx(32 / 15, rel=1e-3)
    assert l2_norm(DiscreteVelocityField.zeros(g)) == 0.0
    c = DiscreteVelocityField.from_function(g, lambda p: np.broadcast_to([0.3, 0.4], p.shape).copy())
    assert l2_norm(c) == pytest.approx(0.5 * np.sqrt(4.0), rel=1e-12)


def test_l2_h1_second_order():
    def w(p):
        x, y = p[..., 0], p[..., 1]
        return np.stack([np.cos(x) * (1 - y ** 2) ** 2, np.sin(2 * x) * y], -1)

    # exact values by dense quadrature
    xs = np.linspace(-1, 1, 4001)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    from scipy.integrate import trapezoid
    P = np.stack([X, Y], -1)
    l2_ex = np.sqrt(trapezoid(trapezoid((w(P) ** 2).sum(-1), xs), xs))
    errs = [abs(l2_norm(DiscreteVelocityField.from_function(_grid(n, n), w)) - l2_ex) for n in (16, 32, 64)]
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert rates.min() > 1.8
    g1 = h1_seminorm(DiscreteVelocityField.from_function(_grid(32, 32), w))
    g2 = h1_seminorm(DiscreteVelocityField.from_function(_grid(64, 64), w))
    assert abs(g1 - g2) < 5e-3 * g2


def test_snapshot_roundtrip(tmp_path):
    g = _grid(6, 4, L=1.5)
    rng = np.random.default_rng(0)
    f = DiscreteVelocityField.from_function(g, lambda p: rng.normal(size=p.shape))
    p = write_field_snapshot(f, tmp_path / "u.bin")
    assert p.read_bytes()[:7] == b"VNSFLD1"
    back = read_field_snapshot(p)
    assert back.grid.nx == 6 and back.grid.ny == 4 and back.grid.L == 1.5
    assert np.array_equal(back.u1, f.u1) and np.array_equal(back.u2, f.u2)
    csv = write_field_csv(f, tmp_path / "u.csv")
    assert csv.read_text().splitlines()[0] == "x,y,u1,u2"
