"""Infinite-horizon adjoint for the LQ scenario against the closed-form slope."""
import numpy as np

from ergolab.adjoint import solve_ih_adjoint
from ergolab.runner.scenarios import load_scenario

sc = load_scenario("lq-1d")
sol = solve_ih_adjoint(sc.model, sc.law, eval_window=5.0, n_paths=4000, dt=0.02, tol=3e-3, x0=1.0,
                       min_comparisons=3)
xs = np.linspace(-1.0, 1.0, 11)[:, None]
slope = np.polyfit(xs[:, 0], sol.Y(0.0, xs)[:, 0], 1)[0]
print(f"Y(0, x) slope {slope:.4f}  exact {sc.oracle['adjoint_slope']:.4f}")
d = sol.diagnostics
print(f"horizon used {d['horizon_used']:.2f}, Cauchy gaps {[round(g, 5) for _, g in d['cauchy_history']]}")
