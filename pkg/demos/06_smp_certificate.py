"""Sufficient maximum principle certificate for a good and a bad LQ gain."""
from ergolab.adjoint import solve_ih_adjoint
from ergolab.hamiltonian import convexity_probe
from ergolab.runner.scenarios import linear_feedback, load_scenario
from ergolab.simulate import TimeGrid, simulate_forward
from ergolab.smp import (compare_costs, issue_certificate, verify_hamiltonian_minimality,
                         verify_transversality)

base = load_scenario("lq-1d")
convexity = convexity_probe(base.model, 2000, (-3.0, 3.0))
for K in (base.oracle["K_star"], 1.0):
    sc = load_scenario("lq-1d", K=K)
    sol = solve_ih_adjoint(sc.model, sc.law, 10.0, n_paths=2000, dt=0.02, tol=3e-3, x0=1.0)
    ens = simulate_forward(sc.model, sc.law, TimeGrid.from_dt(0.0, 10.0, 0.02), 2000, 1.0, seed=3)
    mini = verify_hamiltonian_minimality(sc.model, sc.law, sol, ens, n_samples=1000)
    gains = {"K=0.2": 0.2, "K=1": 1.0, "K*": base.oracle["K_star"]}
    challengers = {n: linear_feedback(g) for n, g in gains.items() if abs(g - K) > 1e-9}
    curves = verify_transversality(sc.model, sc.law, challengers, sol, [2.5, 5, 10, 20], 2000,
                                   seed=4, x0=1.0, dt=0.02)
    costs = compare_costs(sc.model, sc.law, challengers, 100.0, 400, seed=5, dt=0.01, x0=1.0)
    cert = issue_certificate(convexity, mini, curves, costs)
    print(f"K={K:.4f}: {cert.verdict:12s} H-gap {mini.sup_gap:.4f} (threshold {mini.threshold:.4f})")
    for r in costs:
        print(f"    {r.name:10s} lambda {r.lambda_hat:.4f}  gap {r.gap:+.4f} +/- {1.96 * r.gap_se:.4f}")
