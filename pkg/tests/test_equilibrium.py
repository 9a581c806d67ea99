import math

import numpy as np
import pytest

from vnspipe import fluid
from vnspipe.equilibrium import (
    PhaseGrid,
    egc_delta,
    fixed_point,
    g_level_invariance,
    lambda_apply,
    random_ball_field,
    smallness_budget,
    stationarity_residual,
    stationary_values,
)
from vnspipe.fields import DiscreteVelocityField, MacGrid, extend_field, field_norms
from vnspipe.geometry import PipeDomain, PoiseuilleFlow
from vnspipe.kinetic import InflowProfile, bump_profile

T = 2.0


def test_budget_example():
    b = smallness_budget(2.0, 0.1, 1.0, 1.0)
    assert b.C1 == pytest.approx(1 / 12)
    assert b.M == pytest.approx(19 / 6)
    assert b.C2 == pytest.approx(0.1 * math.exp(-4) / 6, rel=1e-12)
    assert b.C2 == pytest.approx(3.053e-4, rel=1e-3)


def test_budget_scaling():
    a = smallness_budget(2.0, 1e-3, 1.0, 1.0)
    b = smallness_budget(2.0, 5e-4, 1.0, 1.0)
    assert b.C2 == pytest.approx(0.5 * a.C2)
    c = smallness_budget(2.0, 1e-3, 1.0, 2.0)
    assert c.C1 == pytest.approx(0.5 * a.C1) and c.C2 == pytest.approx(0.5 * a.C2)
    with pytest.raises(ValueError):
        smallness_budget(1.0, 0.1, 1.0, 1.0)


def test_budget_gates():
    b = smallness_budget(2.0, 1e-3, 1.0, 1.0, u_sharp_w1inf=0.05, psi_sup=1e-9, delta=1e-2)
    assert b.satisfied and not b.failed_gates()
    b = smallness_budget(2.0, 1e-1, 1.0, 1.0, u_sharp_w1inf=0.5, psi_sup=1.0, delta=1e-2)
    assert set(b.failed_gates()) == {"gate_u_sharp", "gate_psi", "gate_eps"}


def _trivial(nx=16, ny=8, u_max=0.05):
    g = MacGrid(PipeDomain(1.0), nx, ny)
    return DiscreteVelocityField.poiseuille(g, PoiseuilleFlow(u_max))


def test_lambda_trivial_phase():
    us = _trivial()
    phase = PhaseGrid((6, 4, 6, 6), 3.0)
    out = lambda_apply(us, InflowProfile.zero(), us, 1.0, phase)
    assert (out - us).sup_face() < 1e-12


def test_lambda_zero_inflow_is_stokes_of_advection():
    us = _trivial()
    u = random_ball_field(us, 1e-2, np.random.default_rng(0))
    phase = PhaseGrid((6, 4, 6, 6), 3.0)
    out = lambda_apply(u, InflowProfile.zero(), us, 1.0, phase)
    a1, a2 = fluid.advection(u)
    ref, _ = fluid.solve_steady_stokes(fluid.StokesProblem(u.grid, -a1, -a2, us.bc))
    assert (out - ref).sup_face() < 1e-13


def test_fixed_point_trivial():
    us = _trivial()
    st = fixed_point(us, InflowProfile.zero(), PhaseGrid((6, 4, 6, 6), 3.0))
    assert st.converged and st.iterations == 1
    assert st.trace[-1] < 1e-10 and not st.f.values.any()


@pytest.fixture(scope="module")
def small_data_state():
    us = _trivial(16, 8, 0.02)
    psi = bump_profile(2e-10, 0.0, 0.7, (4.8, 0.0), 2.3)
    delta, _ = egc_delta(us, psi, T)
    C = fluid.stokes_constant_estimate(us.grid, seed=0)
    eps = 0.5 * min(1.0, delta / T, 1.0 / (6.0 * C))
    budget = smallness_budget(T, eps, psi.R, C, field_norms(us).w1inf, psi.sup, delta)
    st = fixed_point(us, psi, PhaseGrid((12, 8, 12, 12), 8.0), budget, tol_fp=1e-14, egc_T=T)
    return st, budget


def test_small_data_conclusion(small_data_state):
    st, budget = small_data_state
    assert budget.satisfied
    assert st.converged
    assert st.conclusion_bound <= budget.eps
    assert st.f.sup_norm() > 0 and st.f.support_ok
    assert st.metrics["hardy_ok"]
    tr = st.trace
    if len(tr) > 2:
        assert tr[-1] < tr[1]


def test_lambda_maps_ball_into_itself(small_data_state):
    st, budget = small_data_state
    rng = np.random.default_rng(7)
    for _ in range(50):
        u = random_ball_field(st.u_sharp, rng.uniform(0, 1) * budget.eps, rng)
        out = lambda_apply(u, st.psi, st.u_sharp, st.horizon, st.phase)
        nrm = field_norms(out - st.u_sharp)
        assert nrm.e_norm <= budget.eps
        grad = field_norms(out - st.u_sharp, weighted=False).lipschitz
        assert nrm.weighted_sup <= grad + 1e-14


def test_g_level_invariance(small_data_state):
    st, _ = small_data_state
    rep = g_level_invariance(st, n_samples=50)
    assert rep.n_samples > 0 and rep.ok


def test_absorbing_boundary_values(small_data_state):
    st, _ = small_data_state
    ys = np.linspace(-0.9, 0.9, 7)
    pts = [[1.0, y, -v, 0.0] for y in ys for v in (0.5, 2.0, 4.0)]
    pts += [[x, 1.0, 3.0, -v] for x in (-0.5, 0.0, 0.5) for v in (0.5, 2.0)]
    pts += [[x, -1.0, 3.0, v] for x in (-0.5, 0.0, 0.5) for v in (0.5, 2.0)]
    vals = stationary_values(st.psi, extend_field(st.u), np.array(pts), st.horizon)
    assert not vals.any()


def test_stationarity_residual_trivial():
    us = _trivial()
    st = fixed_point(us, InflowProfile.zero(), PhaseGrid((6, 4, 6, 6), 3.0))
    res = stationarity_residual(st, 0.01, 20, sl_safety=10.0)
    assert res["max_u_drift"] <= 1e-12 and res["max_f_drift"] == 0.0


def test_stationarity_negative_control(small_data_state):
    st, _ = small_data_state
    base = stationarity_residual(st, 0.1, 1, sl_safety=100.0)
    bad = stationarity_residual(st, 0.1, 1, sl_safety=100.0, perturb_f=1.5)
    assert base["f_drift"][0] == 0.0
    assert bad["f_drift"][0] == pytest.approx(0.5 * st.f.l1_norm(), rel=1e-12)
    # the extra drag moves the fluid away from u-bar at the first step
    assert bad["u_drift"][1] > 10 * base["u_drift"][1]
