import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ergolab.adjoint import BsdeSolution, solve_fh_adjoint, solve_ih_adjoint, verify_bound
from ergolab.hamiltonian import ConvexityReport
from ergolab.model import AssumptionViolation
from ergolab.runner.scenarios import linear_feedback, load_scenario
from ergolab.simulate import TimeGrid, initial_states, simulate_forward
from ergolab.smp import (CostRow, MinimalityReport, TransversalityCurve, compare_costs, issue_certificate,
                         verify_hamiltonian_minimality, verify_transversality, write_cost_table)


def fh_solution(sc, T=2.0, n_paths=2000, dt=0.02, seed=0):
    x0 = initial_states(sc.x0, n_paths, 1, 1.0, seed)
    ens = simulate_forward(sc.model, sc.law, TimeGrid.from_dt(0.0, T, dt), n_paths, x0, seed)
    return ens, solve_fh_adjoint(sc.model, sc.law, ens)


# -- adjoint ------------------------------------------------------------------

def test_fh_adjoint_ou_slope():
    # Y = c(t) X with c' = 2c - 2, c(T) = 0
    sc = load_scenario("ou-quadratic")
    _, sol = fh_solution(sc)
    xs = np.linspace(-1, 1, 5)[:, None]
    slope = np.polyfit(xs[:, 0], sol.Y(0.0, xs)[:, 0], 1)[0]
    assert slope == pytest.approx(1 - np.exp(-4.0), abs=0.03)
    z = sol.Z(0.0, xs)[:, 0, 0]
    assert np.mean(z) == pytest.approx(1 - np.exp(-4.0), abs=0.05)


def test_solution_json_round_trip(tmp_path):
    _, sol = fh_solution(load_scenario("lq-1d"), T=0.4, n_paths=300, dt=0.05)
    back = BsdeSolution.from_dict(json.loads(sol.to_json()))
    xs = np.array([[0.3], [-0.7]])
    np.testing.assert_allclose(back.Y(0.2, xs), sol.Y(0.2, xs))
    sol.export_y0_csv(str(tmp_path / "y0.csv"), xs)
    assert (tmp_path / "y0.csv").read_text().splitlines()[0] == "x0,y0"


def test_bound_skipped_when_gradient_unbounded():
    _, sol = fh_solution(load_scenario("lq-1d"), T=0.4, n_paths=300, dt=0.05)
    rep = verify_bound(sol, 1.0, None)
    assert rep.skipped and rep.passed is None
    assert verify_bound(sol, 1.0, 1e-6).passed is False


def test_ih_adjoint_refuses_nondissipative():
    sc = load_scenario("nondissipative-1d")
    with pytest.raises(AssumptionViolation):
        solve_ih_adjoint(sc.model, sc.law, 1.0)


def test_ih_adjoint_ou_is_identity_map():
    sc = load_scenario("ou-quadratic")
    sol = solve_ih_adjoint(sc.model, sc.law, 1.0, n_paths=2000, dt=0.05, tol=2e-2, x0=1.0,
                           n_test=300)
    xs = np.linspace(-1, 1, 5)[:, None]
    np.testing.assert_allclose(sol.Y(0.0, xs)[:, 0], xs[:, 0], atol=0.06)
    assert sol.diagnostics["horizon_used"] > 1.0


# -- SMP ----------------------------------------------------------------------

def test_self_comparison_gap_is_exactly_zero():
    sc = load_scenario("lq-1d")
    rows = compare_costs(sc.model, sc.law, {"same": sc.law}, 10.0, 50, seed=3, dt=0.05, x0=1.0)
    assert rows[1].gap == 0.0 and rows[1].gap_se == 0.0


def test_minimality_gap_zero_when_h_ignores_control():
    sc = load_scenario("ou-quadratic")
    ens, sol = fh_solution(sc, T=1.0, n_paths=500, dt=0.05)
    rep = verify_hamiltonian_minimality(sc.model, sc.law, sol, ens, n_samples=200, bounds=(-1.0, 1.0))
    assert rep.sup_gap == 0.0 and rep.passed


def test_transversality_self_curve_is_zero():
    sc = load_scenario("lq-1d")
    _, sol = fh_solution(sc, T=1.0, n_paths=300, dt=0.05)
    curves = verify_transversality(sc.model, sc.law, {"self": sc.law}, sol, [0.5, 1.0, 2.0], 100,
                                   seed=1, x0=1.0, dt=0.05)
    c = curves["self"]
    assert c.values == [0.0, 0.0, 0.0]
    assert c.decaying and c.extrapolated == [False, False, True]
    with pytest.raises(ValueError):
        verify_transversality(sc.model, sc.law, {}, sol, [3.0], 10, seed=0)


def test_minimality_verdict_is_scale_invariant():
    a, b = load_scenario("lq-1d"), load_scenario("lq-1d", q=3.0, r=3.0)
    ens_a, sol_a = fh_solution(a, T=1.0, n_paths=1000, dt=0.05)
    ens_b, sol_b = fh_solution(b, T=1.0, n_paths=1000, dt=0.05)
    ra = verify_hamiltonian_minimality(a.model, a.law, sol_a, ens_a, n_samples=300)
    rb = verify_hamiltonian_minimality(b.model, b.law, sol_b, ens_b, n_samples=300)
    assert ra.passed == rb.passed
    assert rb.sup_gap == pytest.approx(3 * ra.sup_gap, rel=1e-6, abs=1e-12)
    assert rb.threshold == pytest.approx(3 * ra.threshold, rel=1e-6)


def test_gain_grid_minimized_at_riccati_gain():
    sc = load_scenario("lq-1d")
    K = sc.oracle["K_star"]
    grid = {f"K={g}": linear_feedback(g) for g in (0.2, 0.7, 1.0)}
    rows = compare_costs(sc.model, sc.law, grid, 40.0, 400, seed=9, dt=0.02, x0=1.0)
    assert all(r.gap > 0 for r in rows[1:])
    assert rows[0].lambda_hat == pytest.approx(sc.oracle["cost_of_gain"](K), rel=0.05)


def test_cost_table_csv(tmp_path):
    rows = [CostRow("a", 1.0, 0.1, 0.0, 0.0), CostRow("b", 1.5, 0.1, 0.5, 0.05)]
    write_cost_table(rows, str(tmp_path / "c.csv"))
    assert (tmp_path / "c.csv").read_text().splitlines()[2].startswith("b,1.5")


RANK = {"violated": 0, "inconclusive": 1, "certified": 2}


def _certificate(gap, se=0.01, passed=True, decaying=True, convex=True):
    mini = MinimalityReport(0.0, 0.0, 0.1, 1.0, passed, {}, 10)
    curve = TransversalityCurve([1.0, 2.0], [0.1, 0.02], [0.0, 0.0], -2.0, decaying, False, [False, False])
    costs = [CostRow("cand", 1.0, se, 0.0, 0.0), CostRow("other", 1.0 + gap, se, gap, se)]
    return issue_certificate(ConvexityReport(convex, 10, 0.0, None), mini, {"other": curve}, costs)


@given(st.floats(-0.2, 0.2), st.floats(-0.2, 0.2), st.booleans(), st.booleans())
def test_certificate_monotone_in_cost_gap(g1, g2, passed, decaying):
    lo, hi = sorted((g1, g2))
    a = _certificate(lo, passed=passed, decaying=decaying)
    b = _certificate(hi, passed=passed, decaying=decaying)
    assert RANK[a.verdict] <= RANK[b.verdict]


def test_certificate_branches():
    assert _certificate(0.1).verdict == "certified"
    assert _certificate(-0.1).verdict == "violated"
    assert _certificate(-0.03).verdict == "inconclusive"
    assert _certificate(0.1, decaying=False).verdict == "inconclusive"
    assert _certificate(0.1, passed=False).verdict == "violated"
    assert _certificate(0.1, convex=False).verdict == "inconclusive"
    assert json.loads(_certificate(-0.1).to_json())["witness"]["kind"] == "cost"

