import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ergolab.ergodicity import (TEST_FUNCTIONS, bismut_elworthy, coupling_prefactor_fit, coupling_tv,
                                feller_constant, feller_gradient_bound, irreducibility_probe,
                                semigroup_finite_difference, semigroup_value)
from ergolab.model import AssumptionViolation, ControlLaw, ControlledDiffusion, DeclaredConstants
from ergolab.runner.oracles import ou_tv
from ergolab.runner.scenarios import load_scenario


def ou_2d(sigma_scale=1.0):
    def drift(t, x, u):
        return -x

    def diffusion(t, x, u):
        return np.broadcast_to(sigma_scale * np.eye(2), (x.shape[0], 2, 2)).copy()

    return ControlledDiffusion(2, 1, drift, diffusion, lambda t, x, u: np.sum(x * x, axis=1),
                               drift_x=lambda t, x, u: np.broadcast_to(-np.eye(2), (x.shape[0], 2, 2)),
                               diffusion_x=lambda t, x, u: np.zeros((x.shape[0], 2, 2, 2)),
                               constants=DeclaredConstants(k=1.0, omega=0.0, inv_sigma_bound=1.0),
                               name="ou-2d")


# -- Feller constant ----------------------------------------------------------

def test_feller_constant_examples():
    assert feller_constant(1.0, 1.0, 0.0, 1.0) == pytest.approx(np.sqrt(1 - np.exp(-1)), abs=1e-12)
    assert feller_constant(1.0, 1.0, 0.0, 1.0) == pytest.approx(0.7951, abs=1e-4)
    assert feller_constant(1e-7, 1.0, 0.0, 1.0) == float("inf")
    assert feller_constant(4.0, 0.5, 0.5, 2.0) == pytest.approx(2.0 / np.sqrt(4.0))


def test_feller_bound_requires_constants():
    m = ou_2d()
    m.constants = DeclaredConstants(k=1.0, omega=None, inv_sigma_bound=1.0)
    with pytest.raises(AssumptionViolation):
        feller_gradient_bound(m, 1.0)


@settings(max_examples=20)
@given(st.floats(-2, 2), st.floats(-2, 2))
def test_semigroup_is_lipschitz_with_feller_constant(x, y):
    sc = load_scenario("bounded-cost-1d")
    psi, sup = TEST_FUNCTIONS["tanh"]
    Ct = feller_gradient_bound(sc.model, 1.0)
    px = semigroup_value(sc.model, sc.law, psi, 1.0, [x], 1000, seed=11, dt=0.05)
    py = semigroup_value(sc.model, sc.law, psi, 1.0, [y], 1000, seed=11, dt=0.05)
    assert abs(px.value - py.value) <= Ct * sup * abs(x - y) + 1e-9


# -- Bismut-Elworthy ----------------------------------------------------------

def test_bismut_elworthy_constant_psi_is_zero():
    sc = load_scenario("ou-quadratic")
    est = bismut_elworthy(sc.model, sc.law, lambda x: np.ones(x.shape[0]), 1.0, [0.3], [1.0], 500, seed=1)
    assert est.value == 0.0 and est.se == 0.0


def test_bismut_elworthy_matches_ou_closed_form():
    sc = load_scenario("ou-quadratic")
    t = 1.0
    # D_x E[X_t] = exp(-t) for psi(x) = x
    est = bismut_elworthy(sc.model, sc.law, lambda x: x[:, 0], t, [0.5], [1.0], 20000, seed=4)
    assert abs(est.value - np.exp(-t)) < 3 * est.se + 0.01


def test_bismut_elworthy_agrees_with_finite_difference_under_feedback():
    sc = load_scenario("bounded-cost-1d")
    psi, _ = TEST_FUNCTIONS["gauss"]
    be = bismut_elworthy(sc.model, sc.law, psi, 1.0, [0.5], [1.0], 20000, seed=2, dt=0.02)
    fd = semigroup_finite_difference(sc.model, sc.law, psi, 1.0, [0.5], [1.0], 20000, seed=3, dt=0.02)
    assert abs(be.value - fd.value) < 3 * np.hypot(be.se, fd.se)


def test_bismut_elworthy_rejects_nonpositive_time():
    sc = load_scenario("ou-quadratic")
    with pytest.raises(ValueError):
        bismut_elworthy(sc.model, sc.law, np.tanh, 0.0, [0.0], [1.0], 10, seed=0)


# -- irreducibility -----------------------------------------------------------

def test_irreducibility_positive_near_start():
    sc = load_scenario("ou-quadratic")
    rep = irreducibility_probe(sc.model, sc.law, 1.0, [0.0], 0.5, 2000, seed=0, dt=0.02)
    assert rep.verdict == "positive"
    assert rep.wilson[0] <= rep.p_hat <= rep.wilson[1]


def test_irreducibility_tail_target_undetected():
    sc = load_scenario("ou-quadratic")
    rep = irreducibility_probe(sc.model, sc.law, 1.0, [8.0], 0.1, 500, seed=0, dt=0.02)
    assert rep.verdict == "undetected"
    assert rep.detection_bound == pytest.approx(3 / 500)
    assert rep.n_needed is None or rep.n_needed > 500


def test_irreducibility_refuses_degenerate_noise():
    m = ControlledDiffusion(1, 1, lambda t, x, u: -x, lambda t, x, u: np.zeros((x.shape[0], 1, 1)),
                            lambda t, x, u: x[:, 0] ** 2)
    with pytest.raises(AssumptionViolation):
        irreducibility_probe(m, ControlLaw.constant(0.0), 1.0, [0.0], 0.5, 10, seed=0)


# -- coupling -----------------------------------------------------------------

def test_coupling_from_equal_points_is_zero():
    sc = load_scenario("ou-quadratic")
    fit = coupling_tv(sc.model, sc.law, [1.0], [1.0], 3, n_pairs=200, R=3.0, dt=0.05)
    assert np.all(fit.tv_hat == 0)


def test_coupling_bounds_exact_ou_distance():
    sc = load_scenario("ou-quadratic")
    fit = coupling_tv(sc.model, sc.law, [1.0], [-1.0], 4, n_pairs=4000, seed=1, dt=0.02, R=3.0)
    assert np.all(np.diff(fit.tv_hat) <= 0)
    for t, tv, hi in zip(fit.times[1:], fit.tv_hat[1:], fit.ci_high[1:]):
        assert hi >= ou_tv(1.0, 1.0, 1.0, -1.0, t) - 0.01
    assert fit.rho_hat > 0


def test_coupling_two_dimensional_meets():
    m = ou_2d()
    fit = coupling_tv(m, ControlLaw.constant(0.0), [1.0, 0.0], [-1.0, 0.0], 3, n_pairs=1000, seed=0,
                      dt=0.05, R=4.0)
    assert fit.tv_hat[-1] < 0.5
    assert np.all(np.diff(fit.tv_hat) <= 0)


def test_prefactor_grows_with_distance():
    sc = load_scenario("ou-quadratic")
    fits = [coupling_tv(sc.model, sc.law, [a], [-a], 3, n_pairs=2000, seed=5, dt=0.05, R=3.0)
            for a in (0.5, 1.5, 2.5)]
    pf = coupling_prefactor_fit(fits)
    assert pf.monotone
    assert pf.C_hat > 0
