import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from vnspipe.characteristics import PhaseBox
from vnspipe.equilibrium import PhaseGrid, fixed_point
from vnspipe.fields import DiscreteVelocityField, MacGrid
from vnspipe.geometry import PipeDomain, PoiseuilleFlow
from vnspipe.kinetic import InflowProfile
from vnspipe.stability import (
    DelayRateProblem,
    GateError,
    StabilityConfig,
    comparison_check,
    delay_coefficients,
    delay_identity_residual,
    fit_decay,
    gronwall_rate,
    k_omega,
    run_stability,
)


def test_k_omega():
    assert k_omega(PipeDomain(1.0)) == pytest.approx(math.pi ** 2 / 4)
    assert k_omega(PipeDomain(1e6)) == pytest.approx(math.pi ** 2 / 8, rel=1e-9)
    # |grad u_p| = 2 u_max <= K_Omega iff u_max <= pi^2 / 8
    flow = PoiseuilleFlow(math.pi ** 2 / 8 * 0.999)
    assert flow.grad_sup_norm <= k_omega(PipeDomain(1.0))
    assert PoiseuilleFlow(math.pi ** 2 / 8 * 1.001).grad_sup_norm > k_omega(PipeDomain(1.0))


def test_delay_coefficients():
    R_hat, alpha = delay_coefficients(1.0, 1.0, 1e-3, 0.1, 0.1, 0.05)
    assert R_hat == pytest.approx(1.2)
    assert alpha == pytest.approx(math.pi * math.e ** 2 * 1e-3 * 1.2 * 1.3, rel=1e-12)
    assert alpha == pytest.approx(0.03621, abs=1e-5)
    assert delay_coefficients(1.0, 1.0, 0.0, 0.1, 0.1, 0.05)[1] == 0.0


def test_gronwall_examples():
    assert gronwall_rate(DelayRateProblem(1.0, 0.0, 1.0)) == 1.0
    lam = gronwall_rate(DelayRateProblem(1.0, 0.5, 1.0))
    assert 0.385 <= lam <= 0.393
    p = DelayRateProblem(1.0, 0.5, 1.0)
    assert p.phi(0.39) > 0 and p.phi(0.35) < 0
    assert lam == pytest.approx(brentq(p.phi, 0.1, 1.0, xtol=1e-14), abs=1e-10)
    assert gronwall_rate(DelayRateProblem(1.0, 0.9, 1.0)) < lam
    with pytest.raises(GateError) as err:
        gronwall_rate(DelayRateProblem(1.0, 1.0, 1.0))
    assert "alpha < kappa/T" in str(err.value)


admissible = st.tuples(st.floats(0.05, 5.0), st.floats(0.05, 3.0), st.floats(0.0, 0.999)).map(
    lambda a: DelayRateProblem(a[0], a[2] * a[0] / a[1], a[1]))


@settings(max_examples=100, deadline=None)
@given(admissible)
def test_gronwall_root_properties(p):
    lam = gronwall_rate(p)
    assert 0 < lam <= p.kappa
    assert abs(p.phi(lam)) <= 1e-10
    ts = np.linspace(p.T, 10 * p.T, 100)
    res = [delay_identity_residual(lam, p, t) for t in ts]
    assert max(abs(r) for r in res) <= 1e-10


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 3.0), st.floats(0.2, 3.0))
def test_gronwall_monotone_in_alpha(kappa, T):
    alphas = np.linspace(0.0, 0.99 * kappa / T, 20)
    lams = [gronwall_rate(DelayRateProblem(kappa, a, T)) for a in alphas]
    assert all(a >= b for a, b in zip(lams, lams[1:]))


def test_comparison_principle_randomized():
    rng = np.random.default_rng(11)
    for _ in range(10):
        kappa, T = rng.uniform(0.3, 2.0), rng.uniform(0.3, 1.5)
        p = DelayRateProblem(kappa, rng.uniform(0, 0.95) * kappa / T, T)
        c, w = rng.uniform(0.5, 2.0), rng.uniform(0.5, 3.0)
        res = comparison_check(p, lambda t: c * (1 + 0.3 * np.sin(w * t)) * np.exp(-0.1 * t), gamma=1.01)
        assert res["ok"], res


def test_fit_decay_exact():
    t = np.linspace(0, 10, 101)
    fit = fit_decay(t, 3 * np.exp(-0.7 * t), (3, 10))
    assert fit.lambda_fit == pytest.approx(0.7, abs=1e-10)
    assert fit.H_fit == pytest.approx(3.0, abs=1e-10)


def test_fit_decay_noise_and_constant():
    rng = np.random.default_rng(0)
    t = np.linspace(0, 10, 201)
    y = 3 * np.exp(-0.7 * t) * (1 + 0.01 * rng.standard_normal(t.size))
    assert fit_decay(t, y, (3, 10)).lambda_fit == pytest.approx(0.7, rel=0.05)
    assert abs(fit_decay(t, np.full_like(t, 2.0), (0, 10)).lambda_fit) < 1e-12
    with pytest.raises(ValueError):
        fit_decay(t, y, (3.0, 3.1))


def _trivial_state():
    g = MacGrid(PipeDomain(1.0), 16, 8)
    us = DiscreteVelocityField.poiseuille(g, PoiseuilleFlow(0.002, nu=0.1))
    return fixed_point(us, InflowProfile.zero(), PhaseGrid((8, 6, 12, 12), 8.0), nu=0.1)


def test_zero_perturbation_stays_at_drift_level():
    st_ = _trivial_state()
    K2 = PhaseBox((-0.6, -0.2), (-0.3, 0.3), (3.0, 5.0), (-1.0, 1.0), (3, 3, 3, 3))
    cfg = StabilityConfig(st_, K2, 0.0, 0.0, 2.0, 4.0, 0.1, PoiseuilleFlow(0.002, nu=0.1), sl_safety=100.0,
                          delta=1e-6)
    res = run_stability(cfg)
    assert res.u_hat.max() <= 1e-12 and res.u_hat_raw.max() <= 1e-12
    assert not res.breach and res.support_ok


def test_perturbation_decays_in_trivial_state():
    st_ = _trivial_state()
    K2 = PhaseBox((-0.6, -0.2), (-0.3, 0.3), (3.0, 5.0), (-1.0, 1.0), (3, 3, 3, 3))
    flow = PoiseuilleFlow(0.002, nu=0.1)
    cfg = StabilityConfig(st_, K2, 1e-7, 1e-7, 2.0, 6.0, 0.1, flow, sl_safety=100.0, delta=1e-6)
    res = run_stability(cfg)
    assert res.fit.lambda_fit > 0
    assert res.fit.lambda_fit >= 0.5 * res.fit.lambda_gronwall
    assert not res.breach and res.support_ok
    # with f-bar = 0 the perturbed particles leave within T; only the
    # numerically diffused tail of the bump remains
    assert res.f_hat_inf[-1] <= 1e-8 * 1e-7


def test_gates_raise():
    st_ = _trivial_state()
    flow = PoiseuilleFlow(0.002, nu=0.1)
    slow = PhaseBox((-0.2, 0.2), (-0.2, 0.2), (-0.1, 0.1), (-0.1, 0.1), (2, 2, 2, 2))
    with pytest.raises(GateError) as err:
        run_stability(StabilityConfig(st_, slow, 1e-7, 0.0, 2.0, 4.0, 0.1, flow, sl_safety=100.0, delta=1e-6))
    assert err.value.gate == "initial EGC"
    fast = PhaseBox((-0.6, -0.2), (-0.3, 0.3), (7.0, 7.9), (-1.0, 1.0), (3, 3, 3, 3))
    with pytest.raises(GateError) as err:
        run_stability(StabilityConfig(st_, fast, 1e-7, 0.0, 2.0, 4.0, 0.1, flow, sl_safety=100.0, delta=1e-6))
    assert err.value.gate == "velocity box"
