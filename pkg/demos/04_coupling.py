"""Coupling bound on the total variation distance for the OU scenario."""
from ergolab.ergodicity import coupling_prefactor_fit, coupling_tv
from ergolab.runner.oracles import ou_tv
from ergolab.runner.scenarios import load_scenario

sc = load_scenario("ou-quadratic")
fits = [coupling_tv(sc.model, sc.law, [a], [-a], epochs=5, n_pairs=4000, seed=0, dt=0.02)
        for a in (1.0, 3.0, 5.0)]
for f in fits:
    exact = [round(ou_tv(1.0, 1.0, f.x[0], f.y[0], t), 3) for t in f.times]
    print(f"x={f.x[0]:+.0f}: rho_hat={f.rho_hat:.3f}  tv_hat={[round(float(v), 3) for v in f.tv_hat]}")
    print(f"       exact tv={exact}")
pf = coupling_prefactor_fit(fits)
print(f"prefactor monotone={pf.monotone} r^2={pf.r_squared:.3f} C_hat={pf.C_hat:.3f}")
