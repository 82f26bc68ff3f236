"""Adjoint BSDEs by backward least-squares Monte Carlo.

The finite-horizon adjoint equation ``dY = -grad_x H dt + Z dW`` is solved
on an ensemble by explicit backward induction; the infinite-horizon solution
is obtained by letting the truncation horizon grow until successive
solutions agree (the Cauchy criterion).
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize_scalar

from ._rng import substream_seed
from .hamiltonian import grad_H_x
from .model import AssumptionViolation, ControlLaw, ControlledDiffusion, _jsonable
from .regression import Projector, RegressionBasis, SliceFit
from .simulate import (PathEnsemble, TimeGrid, ensemble_controls, initial_states,
                       simulate_forward)

log = logging.getLogger(__name__)


class NoContractionError(RuntimeError):
    """Cauchy gaps failed to decrease; the structural assumptions look violated."""


class NonConvergenceError(RuntimeError):
    pass


@dataclass
class BsdeSolution:
    grid: TimeGrid
    basis: RegressionBasis
    y_fits: list
    z_fits: list
    dim: int
    state_dim: int
    sup_norm: np.ndarray
    sup_points: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def _slice(self, t) -> int:
        return self.grid.index(float(t))

    def Y(self, t, x) -> np.ndarray:
        """``Y(t, x)`` as ``(m, dim)``."""
        x = np.asarray(x, dtype=float).reshape(-1, self.state_dim)
        return self.y_fits[self._slice(t)].predict(x)

    def Z(self, t, x) -> np.ndarray:
        """``Z(t, x)`` as ``(m, dim, state_dim)``."""
        if not self.z_fits:
            raise ValueError("solution was computed without Z")
        x = np.asarray(x, dtype=float).reshape(-1, self.state_dim)
        i = min(self._slice(t), len(self.z_fits) - 1)
        return self.z_fits[i].predict(x).reshape(-1, self.dim, self.state_dim)

    @property
    def t_end(self) -> float:
        return self.grid.t_end

    def restrict(self, t_end: float) -> "BsdeSolution":
        k = self._slice(t_end)
        if k < 1:
            raise ValueError("restriction window must contain at least one step")
        grid = TimeGrid(self.grid.t_start, float(self.grid.times[k]), k)
        return BsdeSolution(grid, self.basis, self.y_fits[:k + 1], self.z_fits[:k], self.dim,
                            self.state_dim, self.sup_norm[:k + 1], self.sup_points[:k + 1],
                            dict(self.diagnostics))

    def to_dict(self) -> dict:
        return {
            "grid": {"t_start": self.grid.t_start, "t_end": self.grid.t_end,
                     "n_steps": self.grid.n_steps},
            "basis": {"degree": self.basis.degree, "period": self.basis.period},
            "dim": self.dim,
            "state_dim": self.state_dim,
            "y_fits": [f.to_dict() for f in self.y_fits],
            "z_fits": [f.to_dict() for f in self.z_fits],
            "sup_norm": self.sup_norm.tolist(),
            "sup_points": self.sup_points.tolist(),
            "diagnostics": _jsonable(self.diagnostics),
        }

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "BsdeSolution":
        basis = RegressionBasis(d["basis"]["degree"], d["basis"]["period"])
        g = d["grid"]
        return cls(TimeGrid(g["t_start"], g["t_end"], g["n_steps"]), basis,
                   [SliceFit.from_dict(basis, f) for f in d["y_fits"]],
                   [SliceFit.from_dict(basis, f) for f in d["z_fits"]],
                   d["dim"], d["state_dim"], np.asarray(d["sup_norm"]),
                   np.asarray(d["sup_points"]), d.get("diagnostics", {}))

    def export_y0_csv(self, path: str, points) -> None:
        """Write ``Y(0, x)`` on user-supplied points (one row per point)."""
        pts = np.asarray(points, dtype=float).reshape(-1, self.state_dim)
        vals = self.Y(self.grid.t_start, pts)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"x{j}" for j in range(self.state_dim)] + [f"y{j}" for j in range(self.dim)])
            for p, v in zip(pts, vals):
                w.writerow([repr(float(a)) for a in p] + [repr(float(a)) for a in v])


Driver = Callable[[int, float, np.ndarray, np.ndarray, np.ndarray, Optional[np.ndarray]], np.ndarray]


def backward_lsmc(ensemble: PathEnsemble, law: ControlLaw, basis: RegressionBasis,
                  terminal: np.ndarray, driver: Driver, want_z: bool = True,
                  picard: int = 0) -> BsdeSolution:
    """Explicit backward induction on a fully recorded ensemble.

    ``Z_i`` regresses ``(Y_{i+1} - E[Y_{i+1}|X_i]) dW_i' / dt`` (the centering
    leaves the conditional mean unchanged and removes most of the variance);
    ``Y_i`` regresses ``Y_{i+1} + driver dt`` with the driver evaluated at
    ``(Y_{i+1}, Z_i)``.  ``picard`` extra passes re-evaluate the driver at the
    current ``Y_i``.
    """
    if ensemble.record_every != 1:
        raise ValueError("backward induction needs every time step recorded")
    if want_z and ensemble.brownian_increments is None:
        raise ValueError("Z regression needs the Brownian increments")
    grid = ensemble.grid
    dt = grid.dt
    times = grid.times
    X = ensemble.states
    m, n_slots, n = X.shape
    y_next = np.asarray(terminal, dtype=float).reshape(m, -1)
    q = y_next.shape[1]
    if not np.all(np.isfinite(y_next)):
        raise ValueError("non-finite terminal values")

    y_fits: list = [None] * (grid.n_steps + 1)
    z_fits: list = [None] * grid.n_steps if want_z else []
    sup_norm = np.empty(grid.n_steps + 1)
    sup_points = np.empty((grid.n_steps + 1, n))
    ridge_slices = 0

    proj = Projector(basis, X[:, -1])
    y_fits[-1], _ = proj.fit(y_next)
    norms = np.linalg.norm(y_next, axis=1)
    j = int(np.argmax(norms))
    sup_norm[-1], sup_points[-1] = norms[j], X[j, -1]

    for i in range(grid.n_steps - 1, -1, -1):
        t = times[i]
        xi = X[:, i]
        u = ensemble_controls(law, ensemble, i)
        proj = Projector(basis, xi)
        ridge_slices += proj.ridge > 0
        z_vals = None
        if want_z:
            centred = y_next - proj.phi @ proj.coefficients(y_next)
            dw = ensemble.brownian_increments[:, i]
            target = (centred[:, :, None] * dw[:, None, :] / dt).reshape(m, q * n)
            z_fit, z_fitted = proj.fit(target)
            z_fits[i] = z_fit
            z_vals = z_fitted.reshape(m, q, n)
        drv = driver(i, t, xi, u, y_next, z_vals)
        y_fit, y_vals = proj.fit(y_next + drv * dt)
        for _ in range(picard):
            drv = driver(i, t, xi, u, y_vals, z_vals)
            y_fit, y_vals = proj.fit(y_next + drv * dt)
        if not np.all(np.isfinite(y_fit.coef)):
            raise NonConvergenceError(f"non-finite regression coefficients at slice {i}")
        y_fits[i] = y_fit
        norms = np.linalg.norm(y_vals, axis=1)
        j = int(np.argmax(norms))
        sup_norm[i], sup_points[i] = norms[j], xi[j]
        y_next = y_vals

    if ridge_slices:
        log.warning("ridge regularisation applied on %d slices", ridge_slices)
    return BsdeSolution(grid, basis, y_fits, z_fits, q, n, sup_norm, sup_points,
                        {"ridge_slices": int(ridge_slices)})


def solve_fh_adjoint(model: ControlledDiffusion, law: ControlLaw, ensemble: PathEnsemble,
                     terminal_gradient: Optional[Callable] = None,
                     basis: Optional[RegressionBasis] = None, picard: int = 0) -> BsdeSolution:
    """Finite-horizon adjoint BSDE with terminal value ``terminal_gradient(X_T)``
    (zero when omitted) and driver ``grad_x H(t, X, u, Y, Z)``."""
    basis = basis or RegressionBasis(3)
    xT = ensemble.states[:, -1]
    if terminal_gradient is None:
        terminal = np.zeros_like(xT)
    else:
        terminal = np.asarray(terminal_gradient(xT), dtype=float).reshape(xT.shape)

    def driver(i, t, x, u, y, z):
        return grad_H_x(model, t, x, u, y, z)

    return backward_lsmc(ensemble, law, basis, terminal, driver, want_z=True, picard=picard)


@dataclass
class BoundReport:
    bound: float
    sup_norm: float
    passed: Optional[bool]
    skipped: bool
    reason: str
    witness: Optional[dict]


def verify_bound(solution: BsdeSolution, k: float, C: Optional[float]) -> BoundReport:
    """Check ``sup |Y| <= 1.1 * min_eps sqrt(C_eps / (k - eps))`` with ``C_eps = C^2/(4 eps)``.

    The optimum is at ``eps = k/2`` and equals ``C/k``.  ``C=None`` means the
    cost gradient is unbounded and the check is skipped.
    """
    i = int(np.argmax(solution.sup_norm))
    sup = float(solution.sup_norm[i])
    if C is None:
        return BoundReport(float("inf"), sup, None, True, "unbounded grad_x L", None)
    if k <= 0:
        raise AssumptionViolation("bound needs a positive dissipativity rate")
    if C == 0:
        bound = 0.0
    else:
        res = minimize_scalar(lambda e: np.sqrt(C * C / (4 * e) / (k - e)),
                              bounds=(1e-12 * k, k * (1 - 1e-12)), method="bounded",
                              options={"xatol": 1e-12 * k})
        bound = float(res.fun)
    passed = sup <= 1.1 * bound + 1e-12
    witness = None
    if not passed:
        witness = {"t": float(solution.grid.times[i]), "x": solution.sup_points[i].tolist(),
                   "norm": sup}
    return BoundReport(bound, sup, bool(passed), False, "", witness)


def _decay_slope(history):
    pts = [(T, d) for T, d in history if d > 0]
    if len(pts) < 2:
        return None
    T = np.array([p[0] for p in pts])
    d = np.log([p[1] for p in pts])
    return float(np.polyfit(T, d, 1)[0])


def solve_ih_adjoint(model: ControlledDiffusion, law: ControlLaw, eval_window: float,
                     T_init: Optional[float] = None, growth_factor: float = 1.5, tol: float = 1e-3,
                     basis: Optional[RegressionBasis] = None, n_paths: int = 10000, seed: int = 0,
                     dt: float = 0.01, x0=0.0, x0_spread: float = 1.0, k: Optional[float] = None,
                     max_solves: int = 12, min_comparisons: int = 1, n_test: int = 1000,
                     n_eval_times: int = 5, picard: int = 0) -> BsdeSolution:
    """Infinite-horizon adjoint on ``[0, eval_window]`` by horizon truncation.

    Horizons are ``T_j = eval_window + T_init * growth_factor**j``, each
    solved with zero terminal value on paths sharing the same Brownian
    increments.  The sup-gap between consecutive solutions over the evaluation
    times and a held-out test ensemble is recorded; iteration stops once it
    falls below ``tol``.  The log-gap decay is compared with ``-2k``.
    """
    if k is None:
        k = model.constants.k
    if k is None or k <= 0:
        raise AssumptionViolation("infinite-horizon adjoint needs a dissipativity rate k > 0")
    basis = basis or RegressionBasis(3)
    T_init = 4.0 / k if T_init is None else T_init
    n = model.state_dim

    test_grid = TimeGrid.from_dt(0.0, eval_window, dt)
    test_x0 = initial_states(x0, n_test, n, x0_spread, substream_seed(seed, "test"))
    test_ens = simulate_forward(model, law, test_grid, n_test, test_x0,
                                substream_seed(seed, "test-paths"), keep_increments=False,
                                keep_controls=False)
    eval_times = np.linspace(0.0, test_grid.t_end, n_eval_times)
    eval_idx = [test_grid.index(t) for t in eval_times]
    x0s = initial_states(x0, n_paths, n, x0_spread, seed)

    history = []
    prev = None
    prev_vals = None
    increases = 0
    converged = False
    for j in range(max_solves):
        horizon = eval_window + T_init * growth_factor ** j
        grid = TimeGrid.from_dt(0.0, horizon, dt)
        ens = simulate_forward(model, law, grid, n_paths, x0s, seed, keep_controls=False)
        sol = solve_fh_adjoint(model, law, ens, None, basis, picard)
        del ens
        vals = [sol.Y(test_grid.times[i], test_ens.states[:, i]) for i in eval_idx]
        if prev is not None:
            gap = max(float(np.max(np.linalg.norm(a - b, axis=1))) for a, b in zip(vals, prev_vals))
            history.append((float(prev.grid.t_end), gap))
            log.info("horizon %.3f -> %.3f: gap %.3e", prev.grid.t_end, grid.t_end, gap)
            if len(history) >= 2 and history[-1][1] >= history[-2][1]:
                increases += 1
            else:
                increases = 0
            if increases >= 3:
                raise NoContractionError(
                    f"Cauchy gaps did not decrease over 3 consecutive horizons: {history[-4:]}")
            if gap <= tol and len(history) >= min_comparisons:
                converged = True
                prev, prev_vals = sol, vals
                break
        prev, prev_vals = sol, vals
    if not converged:
        raise NonConvergenceError(f"no convergence within {max_solves} horizons: {history}")

    slope = _decay_slope(history)
    ratio = None if slope is None else slope / (-2.0 * k)
    gaps = [d for _, d in history]
    out = prev.restrict(eval_window)
    out.diagnostics.update({
        "horizon_used": float(prev.grid.t_end),
        "cauchy_history": history,
        "decay_slope": slope,
        "expected_slope": -2.0 * k,
        "slope_ratio": ratio,
        "decay_consistent": None if ratio is None else bool(0.1 <= ratio <= 10.0),
        "strictly_decreasing": bool(all(b < a for a, b in zip(gaps, gaps[1:]))),
        "tol": tol,
        "k": k,
    })
    C = model.constants.grad_cost_bound
    rep = verify_bound(out, k, C)
    out.diagnostics["bound_check"] = {"bound": rep.bound, "sup_norm": rep.sup_norm,
                                      "passed": rep.passed, "skipped": rep.skipped,
                                      "reason": rep.reason}
    return out
