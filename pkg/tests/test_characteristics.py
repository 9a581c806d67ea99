import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from conftest import poiseuille_ext
from vnspipe.characteristics import (
    EgcFailure,
    PhaseBox,
    PhaseState,
    advance,
    check_initial_egc,
    check_internal_egc,
    check_lateral_egc,
    egc_perturbation_radius,
    entry_backward,
    exit_forward,
    perturbation_radius,
    trajectory,
)
from vnspipe.geometry import PipeDomain, Tag


def test_friction_only_advance(zero_ext):
    s = advance(PhaseState([0, 0], [2, 0]), zero_ext, 1.0, 1e-2)
    assert s.x[0] == pytest.approx(2 * (1 - math.exp(-1)), abs=1e-13)
    assert s.v[0] == pytest.approx(2 * math.exp(-1), abs=1e-13)


@settings(max_examples=50, deadline=None)
@given(st.floats(-0.5, 0.5), st.floats(-0.5, 0.5), st.floats(-2, 2), st.floats(-2, 2), st.floats(0.05, 1.0))
def test_backward_matches_whole_space_formula(zero_ext, x1, x2, v1, v2, t):
    # inside the collar the zero field vanishes, so the free friction flow applies
    s = advance(PhaseState([x1, x2], [v1, v2], t), zero_ext, 0.0, 1e-2)
    e = math.exp(t)
    assert np.allclose(s.x, [x1 - (e - 1) * v1, x2 - (e - 1) * v2], atol=1e-12)
    assert np.allclose(s.v, [e * v1, e * v2], atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_poiseuille_conserved_quantity(seed):
    rng = np.random.default_rng(seed)
    ext = poiseuille_ext(rng.uniform(0.01, 0.5))
    x = [rng.uniform(-0.9, 0.9), rng.uniform(-0.9, 0.9)]
    v = [rng.uniform(-1, 1), rng.uniform(-1, 1)]
    tr = trajectory(PhaseState(x, v), ext, 1.0, 1e-2)
    assert np.abs(tr[:, 2] + tr[:, 4] - (x[1] + v[1])).max() <= 1e-12


def test_forward_backward_roundtrip():
    ext = poiseuille_ext(0.3)
    a = PhaseState([0.1, 0.2], [0.3, -0.1])
    errs = []
    for dt in (0.1, 0.05):
        b = advance(a, ext, 1.0, dt)
        c = advance(b, ext, 0.0, dt)
        errs.append(np.abs(c.as_array() - a.as_array()).max())
    assert errs[1] < 1e-6
    assert errs[1] <= errs[0] / 3.0 or errs[1] < 1e-12


def test_phase_volume_contraction():
    ext = poiseuille_ext(0.3)
    t, h = 0.5, 1e-5
    base = np.array([0.0, 0.1, 0.2, -0.1])
    J = np.empty((4, 4))
    for k in range(4):
        e = np.zeros(4)
        e[k] = h
        p = advance(PhaseState((base + e)[:2], (base + e)[2:]), ext, t, 1e-2).as_array()
        m = advance(PhaseState((base - e)[:2], (base - e)[2:]), ext, t, 1e-2).as_array()
        J[:, k] = (p - m) / (2 * h)
    assert np.linalg.det(J) == pytest.approx(math.exp(-2 * t), rel=1e-2)


def test_exit_examples(zero_ext):
    r = exit_forward(0.0, PhaseState([0, 0], [2, 0]), zero_ext, 10.0)
    assert r.tau == pytest.approx(math.log(2), abs=1e-8)
    assert np.allclose(r.boundary_state.x, [1, 0], atol=1e-10)
    assert np.allclose(r.boundary_state.v, [1, 0], atol=1e-8)
    assert r.boundary_class.tag is Tag.SigmaPlus and r.transversality > 0
    r = exit_forward(0.0, PhaseState([0, 0], [0.5, 0]), zero_ext, 10.0)
    assert r.trapped and "Trapped" in str(r)


def test_wall_asymptote_is_trapped():
    ext = poiseuille_ext(0.05)
    r = exit_forward(0.0, PhaseState([-1.0, 0.4], [0.5, 0.6]), ext, 30.0)
    assert r.trapped
    # high-accuracy reference: the gap to the wall is v2(0) e^{-t}
    sol = solve_ivp(lambda t, y: [y[2], y[3], 0.05 * (1 - y[1] ** 2) - y[2], -y[3]], (0, 10),
                    [-1.0, 0.4, 0.5, 0.6], rtol=1e-12, atol=1e-14, dense_output=True)
    ts = np.linspace(0, 10, 50)
    assert np.allclose(1 - sol.sol(ts)[1], 0.6 * np.exp(-ts), atol=1e-10)


def test_exit_tau_monotone_in_speed(zero_ext):
    taus = [exit_forward(0.0, PhaseState([0, 0], [v, 0]), zero_ext, 10.0).tau for v in (1.2, 1.5, 2.0, 3.0, 5.0)]
    assert all(a >= b for a, b in zip(taus, taus[1:]))


def test_entry_backward(zero_ext):
    K = PhaseBox((-1, -1), (-0.5, 0.5), (1.5, 2.5), (-0.5, 0.5))
    r = entry_backward(0.0, PhaseState([0, 0], [1, 0]), zero_ext, 10.0, K)
    assert r.tau == pytest.approx(-math.log(2), abs=1e-8)
    assert np.allclose(r.boundary_state.x, [-1, 0], atol=1e-9)
    assert np.allclose(r.boundary_state.v, [2, 0], atol=1e-7)
    assert r.boundary_class.tag is Tag.GammaL and r.in_A_K
    r = entry_backward(0.0, PhaseState([0, 0.5], [0, -1]), zero_ext, 10.0, K)
    assert r.boundary_class.tag is Tag.GammaU and not r.in_A_K
    r = entry_backward(0.0, PhaseState([0, 0], [0, 0]), zero_ext, 10.0, K)
    assert r.trapped and not r.in_A_K


def test_lateral_egc_friction_bracket():
    ext = poiseuille_ext(0.05)
    K = [[-1.0, x2, 3.0, 0.0] for x2 in np.linspace(-0.5, 0.5, 11)]
    rep = check_lateral_egc(ext, K, 2.0)
    assert rep.satisfied
    assert rep.worst_exit_duration <= math.log(3) + 1e-9


def test_lateral_egc_fails_on_conserved_level():
    ext = poiseuille_ext(0.05)
    K = PhaseBox.lateral(PipeDomain(1.0), (0.4, 0.4), (0.5, 0.5), (0.6, 0.6), (1, 1, 1))
    rep = check_lateral_egc(ext, K, 2.0, horizon=20.0)
    assert not rep.satisfied and "Trapped" in rep.offenders[0]["reason"]


def test_stationary_field_report_independent_of_start_time():
    ext = poiseuille_ext(0.05)
    K = PhaseBox.lateral(PipeDomain(1.0), (-0.3, 0.3), (2.0, 3.0), (-0.2, 0.2), (4, 3, 3))
    a = check_lateral_egc(ext, K, 2.0, J=[0.0])
    b = check_lateral_egc(ext, K, 2.0, J=[0.0, 1.0, 5.0])
    assert a.satisfied == b.satisfied
    assert a.worst_exit_duration == pytest.approx(b.worst_exit_duration, abs=1e-12)


def test_internal_and_initial_egc(zero_ext):
    rep = check_initial_egc(zero_ext, [[0.0, 0.0, 10.0, 0.0]], 1.0)
    assert rep.satisfied
    assert rep.worst_exit_duration == pytest.approx(-math.log(1 - 0.1), abs=1e-8)
    rep = check_internal_egc(zero_ext, [[0.0, 0.0, 10.0, 0.0], [0.2, 0.1, 0.0, 0.0]], 1.0, horizon=5.0)
    assert not rep.satisfied and len(rep.offenders) == 1


def test_perturbation_radius_formula():
    assert perturbation_radius(0.1, 0.0, 2.0) == pytest.approx(0.025 * math.exp(-8), rel=1e-12)
    assert perturbation_radius(0.2, 0.3, 2.0) == pytest.approx(2 * perturbation_radius(0.1, 0.3, 2.0))
    ratio = perturbation_radius(0.1, 0.3, 3.0) / perturbation_radius(0.1, 0.3, 2.0)
    assert ratio == pytest.approx(math.exp(-4 * 1.3))


def test_auto_margins():
    ext = poiseuille_ext(0.05)
    K = PhaseBox.lateral(PipeDomain(1.0), (-0.3, 0.3), (2.0, 3.0), (-0.2, 0.2), (3, 3, 3))
    delta, info = egc_perturbation_radius(ext, 2.0, "auto", K)
    assert delta > 0 and info["eta"] > 0 and info["kappa"] > 0
    bad = [[-1.0, 0.4, 0.5, 0.6]]
    with pytest.raises(EgcFailure):
        egc_perturbation_radius(ext, 2.0, "auto", bad)
