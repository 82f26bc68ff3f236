"""Bismut-Elworthy gradients versus finite differences, and the Feller constant."""
from ergolab.ergodicity import (TEST_FUNCTIONS, bismut_elworthy, feller_gradient_bound,
                                semigroup_finite_difference)
from ergolab.runner.scenarios import load_scenario

sc = load_scenario("bounded-cost-1d")
t = 1.0
Ct = feller_gradient_bound(sc.model, t)
for name, (psi, sup) in TEST_FUNCTIONS.items():
    be = bismut_elworthy(sc.model, sc.law, psi, t, [0.5], [1.0], 20000, seed=1, dt=0.02)
    fd = semigroup_finite_difference(sc.model, sc.law, psi, t, [0.5], [1.0], 20000, seed=2, dt=0.02)
    print(f"{name:12s} BE {be.value:+.4f} +/- {be.ci_half:.4f}   FD {fd.value:+.4f} +/- {fd.ci_half:.4f}"
          f"   bound {Ct * sup:.4f}")
