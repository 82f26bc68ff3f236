"""Probe dissipativity, ellipticity and convexity for every registered scenario."""
from ergolab.hamiltonian import convexity_probe
from ergolab.model import check_assumptions
from ergolab.runner.scenarios import REGISTRY, load_scenario

for name in REGISTRY:
    sc = load_scenario(name)
    rep = check_assumptions(sc.model, (-3.0, 3.0), 2000, seed=0, u_box=(-1.0, 1.0))
    d = rep.dissipativity
    conv = convexity_probe(sc.model, 2000, (-3.0, 3.0))
    print(f"{name:18s} k_hat={d.k_hat:+.3f} holds={d.holds!s:5s} "
          f"elliptic={rep.ellipticity.holds!s:5s} convex={conv.passed}")
