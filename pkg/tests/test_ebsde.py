import numpy as np
import pytest

from ergolab.ebsde import check_lambda_consistency, solve_discounted, solve_ebsde
from ergolab.model import ControlLaw, DeclaredConstants
from ergolab.runner.scenarios import load_scenario, scalar_model

FAST = (2.0, 1.0, 0.5)


def unit_cost_model():
    zero = lambda t, x, u: 0.0  # noqa: E731
    return scalar_model(
        b=lambda t, x, u: -x, s=lambda t, x, u: 1.0, L=lambda t, x, u: 1.0,
        b_x=lambda t, x, u: -1.0, s_x=zero, L_x=zero, b_u=zero, s_u=zero, L_u=zero,
        constants=DeclaredConstants(k=1.0, omega=0.0, inv_sigma_bound=1.0), name="unit-cost")


def test_unit_cost_gives_unit_constant_and_flat_bias():
    sol = solve_ebsde(unit_cost_model(), ControlLaw.constant(0.0), FAST, 0.0, dt=0.05, n_paths=400)
    assert sol.lambda_hat == pytest.approx(1.0, abs=1e-3)
    xs = np.linspace(-2, 2, 9)[:, None]
    np.testing.assert_allclose(sol.v_hat(0.0, xs), 0.0, atol=1e-3)


def test_large_discount_matches_ou_closed_form():
    # int exp(-a t) E X_t^2 dt = x^2/(a+2) + (1/a - 1/(a+2))/2 for the OU scenario
    sc = load_scenario("ou-quadratic")
    a = 10.0
    dv = solve_discounted(sc.model, sc.law, a, dt=0.005, n_paths=4000, x0=0.0, seed=1)
    xs = np.array([[0.0], [0.5], [1.0]])
    exact = xs[:, 0] ** 2 / (a + 2) + 0.5 * (1 / a - 1 / (a + 2))
    np.testing.assert_allclose(dv(xs), exact, atol=4e-3)
    with pytest.raises(ValueError):
        solve_discounted(sc.model, sc.law, a, horizon_T=0.5)


def test_schedule_validation():
    sc = load_scenario("ou-quadratic")
    with pytest.raises(ValueError):
        solve_ebsde(sc.model, sc.law, (0.1, 0.2, 0.05))
    with pytest.raises(ValueError):
        solve_ebsde(sc.model, sc.law, (0.2, 0.1))


def test_constant_independent_of_reference_point():
    sc = load_scenario("ou-quadratic")
    a = solve_ebsde(sc.model, sc.law, x_ref=0.0, dt=0.05, n_paths=1000, seed=2)
    b = solve_ebsde(sc.model, sc.law, x_ref=1.0, dt=0.05, n_paths=1000, seed=3)
    assert abs(a.lambda_hat - b.lambda_hat) <= 1.96 * np.hypot(a.lambda_se, b.lambda_se) + 5e-3
    assert a.lambda_hat == pytest.approx(0.5, abs=0.03)


def test_lq_bias_quadratic_coefficient():
    # v(x) = P x^2 with P = sqrt(2) - 1, compared on the well-sampled central range
    sc = load_scenario("lq-1d")
    sol = solve_ebsde(sc.model, sc.law, x_ref=0.0, dt=0.05, n_paths=2000, seed=4)
    xs = np.linspace(-1.5, 1.5, 31)[:, None]
    coef = np.polyfit(xs[:, 0], sol.v_hat(0.0, xs), 2)[0]
    assert coef == pytest.approx(sc.oracle["P"], rel=0.1)
    assert sol.v_hat(0.0, [[0.0]])[0] == pytest.approx(0.0, abs=1e-12)


def test_periodic_bias_uses_time():
    sc = load_scenario("periodic-1d")
    sol = solve_ebsde(sc.model, sc.law, FAST, 0.0, dt=0.02, n_paths=800, seed=5)
    assert sol.periodicity_verified
    assert sol.periodic_fit.improved
    np.testing.assert_allclose(sol.v_hat(0.3, [[0.4]]), sol.v_hat(1.3, [[0.4]]))


def test_three_routes_to_lambda_agree_on_ou():
    sc = load_scenario("ou-quadratic")
    sol = solve_ebsde(sc.model, sc.law, x_ref=0.0, dt=0.05, n_paths=1000, seed=6)
    rep = check_lambda_consistency(sc.model, sc.law, sol, horizon=60.0, burn_in=5.0, n_paths=300,
                                   seed=7, dt=0.05, n_paths_fh=1000)
    assert rep.passed, rep.to_json()
    assert set(rep.estimates) == {"ebsde", "long_run", "finite_horizon"}
