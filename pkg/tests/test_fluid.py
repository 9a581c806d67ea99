import math

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from vnspipe.fields import BoundaryData, DiscreteVelocityField, MacGrid, h1_seminorm, l2_norm
from vnspipe.fluid import (
    CFLError,
    EnergyLedger,
    NavierStokesStepper,
    StokesProblem,
    dirichlet_eigenvalue,
    energy_ledger_update,
    ns_step,
    poincare_constant,
    solve_steady_stokes,
    stokes_constant_estimate,
    stokes_form,
    taylor_green_decay,
)
from vnspipe.geometry import PipeDomain, PoiseuilleFlow
from vnspipe.kinetic import PhaseDistribution


def _grid(nx, ny, L=1.0):
    return MacGrid(PipeDomain(L), nx, ny)


def test_stokes_reproduces_poiseuille():
    g = _grid(64, 32)
    up = DiscreteVelocityField.poiseuille(g, PoiseuilleFlow(0.7))
    u, p = solve_steady_stokes(StokesProblem.homogeneous(g, up.bc))
    assert np.abs(u.u1 - up.u1).max() < 1e-9 and np.abs(u.u2).max() < 1e-9
    # the pressure is linear in x1 with slope -2 u_max
    slope = np.diff(p, axis=0) / g.hx
    assert np.allclose(slope, -2 * 0.7, atol=1e-7)


def test_stokes_zero_data():
    g = _grid(12, 8)
    u, _ = solve_steady_stokes(StokesProblem.homogeneous(g, BoundaryData.zeros(g)))
    assert np.abs(u.u1).max() < 1e-14 and np.abs(u.u2).max() < 1e-14


def _manufactured(nu=1.0):
    x, y = sp.symbols("x y")
    psi = (1 - x ** 2) ** 2 * (1 - y ** 2) ** 2 * sp.exp(x / 2)
    w1, w2 = sp.diff(psi, y), -sp.diff(psi, x)
    q = sp.cos(x) * y
    F1 = -nu * (sp.diff(w1, x, 2) + sp.diff(w1, y, 2)) + sp.diff(q, x)
    F2 = -nu * (sp.diff(w2, x, 2) + sp.diff(w2, y, 2)) + sp.diff(q, y)
    lam = [sp.lambdify((x, y), e, "numpy") for e in (w1, w2, F1, F2)]

    def vec(f1, f2):
        return lambda p: np.stack([f1(p[..., 0], p[..., 1]) + 0 * p[..., 0], f2(p[..., 0], p[..., 1]) + 0 * p[..., 0]], -1)

    return vec(lam[0], lam[1]), vec(lam[2], lam[3])


def test_stokes_manufactured_second_order():
    w, F = _manufactured()
    errs = []
    for n in (16, 32, 64):
        g = _grid(n, n // 2)
        s1 = F(g.u1_points())[..., 0]
        s2 = F(g.u2_points())[..., 1]
        ex = DiscreteVelocityField.from_function(g, w)
        u, _ = solve_steady_stokes(StokesProblem(g, s1, s2, ex.bc))
        errs.append(l2_norm(u - ex))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert rates.min() >= 1.9, rates


def test_ns_step_keeps_poiseuille():
    g = _grid(32, 16)
    up = DiscreteVelocityField.poiseuille(g, PoiseuilleFlow(0.05))
    u = ns_step(up, None, 0.01, up.bc)
    assert l2_norm(u - up) < 1e-12
    z = ns_step(DiscreteVelocityField.zeros(g), None, 0.01, BoundaryData.zeros(g))
    assert np.abs(z.u1).max() == 0.0 and np.abs(z.u2).max() == 0.0


def test_poiseuille_long_run_and_divergence():
    g = _grid(32, 16)
    up = DiscreteVelocityField.poiseuille(g, PoiseuilleFlow(0.05))
    stepper = NavierStokesStepper(g, 1.0, 0.01, up.bc)
    stepper.init_pressure(up)
    u = up
    for _ in range(1000):
        u = stepper.step(u)
    assert l2_norm(u - up) <= 1e-8
    assert np.abs(u.divergence()).max() <= 1e-10


def test_ns_cfl_error():
    g = _grid(8, 4)
    big = DiscreteVelocityField.from_function(g, lambda p: np.broadcast_to([100.0, 0.0], p.shape).copy())
    with pytest.raises(CFLError):
        ns_step(big, None, 0.1, big.bc)


def test_taylor_green_rate():
    nu, k = 0.05, 1
    t, e = taylor_green_decay(n=32, nu=nu, dt=1e-3, t_end=0.5, k=k)
    slope = np.polyfit(t, np.log(e), 1)[0]
    # |k|^2 = 2 k^2, velocity ~ e^{-nu |k|^2 t}, energy rate 2 nu |k|^2
    assert -slope == pytest.approx(2 * nu * 2 * k * k, rel=0.02)


def _random_zero_trace(g, rng, nu=1.0):
    from vnspipe.equilibrium import random_ball_field
    return random_ball_field(DiscreteVelocityField.zeros(g), 1.0, rng, nu)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_stokes_form_nonnegative(seed):
    g = _grid(10, 6)
    rng = np.random.default_rng(seed)
    w = DiscreteVelocityField.zeros(g)
    w.u1[1:-1] = rng.normal(size=w.u1[1:-1].shape)
    w.u2[:, 1:-1] = rng.normal(size=w.u2[:, 1:-1].shape)
    assert stokes_form(w) >= 0.0


def test_homogeneous_step_dissipates():
    g = _grid(16, 8)
    u = _random_zero_trace(g, np.random.default_rng(2)).scaled(0.1)
    stepper = NavierStokesStepper(g, 1.0, 0.01, BoundaryData.zeros(g))
    prev = h1_seminorm(u)
    for _ in range(20):
        u = stepper.step(u)
        cur = h1_seminorm(u)
        assert cur < prev
        prev = cur


def test_poincare_constant():
    assert dirichlet_eigenvalue(PipeDomain(1.0)) == pytest.approx(math.pi ** 2 / 2)
    assert poincare_constant(PipeDomain(1.0)) == pytest.approx(0.4502, abs=1e-4)
    assert poincare_constant(PipeDomain(1e6)) == pytest.approx(2 / math.pi, rel=1e-9)


def test_stokes_constant_estimate_stable():
    # the discrete sup of the gradient grows slowly (logarithmically) with
    # resolution, so compare two moderately fine grids
    a = stokes_constant_estimate(_grid(24, 12), seed=0)
    b = stokes_constant_estimate(_grid(48, 24), seed=0)
    assert a > 0 and b > 0
    assert abs(a - b) <= 0.2 * max(a, b)
    assert stokes_constant_estimate(_grid(24, 12), seed=0) == a


def test_ledger_trivial_equilibrium():
    g = _grid(16, 8)
    flow = PoiseuilleFlow(0.05)
    up = DiscreteVelocityField.poiseuille(g, flow)
    f = PhaseDistribution.zeros(g.domain, (4, 4, 4, 4), 2.0)
    led = EnergyLedger(flow)
    for n in range(5):
        energy_ledger_update(led, up, f, {"t": 0.1 * n, "dt": 0.1})
    arr = led.as_array()
    assert np.abs(arr[:, 1]).max() < 1e-25 and led.max_abs_residual < 1e-25


def test_ledger_decoupled_perturbation_decays():
    g = _grid(16, 8)
    flow = PoiseuilleFlow(0.05)
    up = DiscreteVelocityField.poiseuille(g, flow)
    u = up + _random_zero_trace(g, np.random.default_rng(4)).scaled(0.05)
    u.analytic = None
    stepper = NavierStokesStepper(g, 1.0, 0.01, up.bc)
    stepper.init_pressure(up)
    led = EnergyLedger(flow)
    energy_ledger_update(led, u, None, {"t": 0.0})
    for n in range(30):
        u = stepper.step(u)
        energy_ledger_update(led, u, None, {"t": 0.01 * (n + 1), "dt": 0.01})
    E = led.as_array()[:, 1]
    assert np.all(np.diff(E) < 0)
    assert np.all(led.as_array()[:, 3] >= 0)
