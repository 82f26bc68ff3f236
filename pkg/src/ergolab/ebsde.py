"""Ergodic BSDE by vanishing discount, and the long-run cost identity."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ._rng import generator, substream_seed
from .adjoint import BsdeSolution, backward_lsmc
from .model import ControlLaw, ControlledDiffusion, _jsonable
from .regression import Projector, RegressionBasis, SliceFit
from .simulate import (PathEnsemble, TimeGrid, ensemble_controls, initial_states,
                       long_run_average, simulate_forward)

log = logging.getLogger(__name__)

DEFAULT_ALPHAS = (0.4, 0.2, 0.1, 0.05)
HORIZON_FACTOR = 8.0


@dataclass
class DiscountedValue:
    """``Y^alpha(0, .)`` with a pathwise standard error at any point."""

    alpha: float
    horizon: float
    fit: SliceFit
    pathwise_fit: SliceFit
    solution: BsdeSolution

    def __call__(self, x) -> np.ndarray:
        return self.fit.predict(np.atleast_2d(np.asarray(x, dtype=float)))[:, 0]

    def se(self, x) -> np.ndarray:
        return self.pathwise_fit.predict_se(np.atleast_2d(np.asarray(x, dtype=float)))[:, 0]


def _truncate(ens: PathEnsemble, n_steps: int) -> PathEnsemble:
    grid = TimeGrid(ens.grid.t_start, ens.grid.t_start + n_steps * ens.grid.dt, n_steps)
    ctrl = ens.controls[:, :n_steps + 1] if ens.controls is not None else None
    incs = ens.brownian_increments[:, :n_steps] if ens.brownian_increments is not None else None
    return PathEnsemble(grid, ens.n_paths, ens.states[:, :n_steps + 1], ctrl, incs, ens.seed,
                        ens.initial_state, 1)


def _running_costs(model, law, ens):
    times = ens.record_times
    return np.stack([np.broadcast_to(model.L(times[i], ens.states[:, i], ensemble_controls(law, ens, i)),
                                     (ens.n_paths,)) for i in range(len(times))], axis=1)


def _discounted_from_ensemble(model, law, ens, alpha, basis, costs=None) -> DiscountedValue:
    """Backward LSMC for ``Y_t = int_t^T (L - alpha Y) ds - int Z dW``, ``Y_T = 0``."""
    if costs is None:
        costs = _running_costs(model, law, ens)

    def driver(i, t, x, u, y, z):
        return costs[:, i, None] - alpha * y

    sol = backward_lsmc(ens, law, basis, np.zeros((ens.n_paths, 1)), driver, want_z=False)
    dt = ens.grid.dt
    disc = np.exp(-alpha * ens.grid.times[:-1])
    pathwise = (costs[:, :-1] * disc).sum(axis=1) * dt
    pw_fit, _ = Projector(basis, ens.states[:, 0]).fit(pathwise)
    return DiscountedValue(alpha, ens.grid.t_end, sol.y_fits[0], pw_fit, sol)


def solve_discounted(model: ControlledDiffusion, law: ControlLaw, alpha: float, horizon_T: Optional[float] = None,
                     dt: float = 0.02, n_paths: int = 2000, basis: Optional[RegressionBasis] = None,
                     seed: int = 0, x0=0.0, x0_spread: float = 1.0) -> DiscountedValue:
    """Discounted value map ``Y^alpha(0, .)`` by least-squares Monte Carlo.

    ``horizon_T`` defaults to ``8/alpha``; shorter horizons are refused since
    the neglected tail ``exp(-alpha T)`` would exceed ``3e-4``.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    horizon_T = HORIZON_FACTOR / alpha if horizon_T is None else horizon_T
    if horizon_T * alpha < HORIZON_FACTOR - 1e-9:
        raise ValueError(f"horizon_T must be at least {HORIZON_FACTOR}/alpha")
    basis = basis or RegressionBasis()
    grid = TimeGrid.from_dt(0.0, horizon_T, dt)
    start = initial_states(x0, n_paths, model.state_dim, x0_spread, seed)
    ens = simulate_forward(model, law, grid, n_paths, start, seed, keep_increments=False,
                           keep_controls=False)
    return _discounted_from_ensemble(model, law, ens, alpha, basis)


@dataclass
class GrowthFit:
    C_hat: float
    C_fit: float
    r_squared: float
    envelope_holds: bool


@dataclass
class PeriodicFit:
    resid_var_time: float
    resid_var_free: float
    improved: bool
    fit: SliceFit


@dataclass
class ErgodicSolution:
    lambda_hat: float
    lambda_se: float
    alpha_schedule: list
    scaled_values: list
    scaled_se: list
    x_ref: np.ndarray
    v_fit: SliceFit
    v_offset: float
    growth_fit: GrowthFit
    monotone: bool
    inconclusive: bool
    period: Optional[float] = None
    periodic_fit: Optional[PeriodicFit] = None
    periodicity_verified: bool = False
    diagnostics: dict = field(default_factory=dict)

    @property
    def ci(self) -> tuple[float, float]:
        return self.lambda_hat - 1.96 * self.lambda_se, self.lambda_hat + 1.96 * self.lambda_se

    def v_hat(self, t, x) -> np.ndarray:
        """Bias function ``v(t mod T*, x)``, zero at ``(0, x_ref)``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.periodic_fit is not None:
            tt = np.mod(np.broadcast_to(np.asarray(t, float), (x.shape[0],)), self.period)
            return self.periodic_fit.fit.predict(x, tt)[:, 0] - self.v_offset
        return self.v_fit.predict(x)[:, 0] - self.v_offset

    def to_dict(self) -> dict:
        d = {
            "lambda_hat": self.lambda_hat, "lambda_se": self.lambda_se,
            "ci": list(self.ci), "alpha_schedule": self.alpha_schedule,
            "scaled_values": self.scaled_values, "scaled_se": self.scaled_se,
            "x_ref": self.x_ref.tolist(), "v_offset": self.v_offset,
            "v_fit": self.v_fit.to_dict(),
            "growth_fit": self.growth_fit.__dict__, "monotone": self.monotone,
            "inconclusive": self.inconclusive, "period": self.period,
            "periodicity_verified": self.periodicity_verified, "diagnostics": self.diagnostics,
        }
        if self.periodic_fit is not None:
            d["periodic_fit"] = {"resid_var_time": self.periodic_fit.resid_var_time,
                                 "resid_var_free": self.periodic_fit.resid_var_free,
                                 "improved": self.periodic_fit.improved}
        return _jsonable(d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def periodicity_probe(model: ControlledDiffusion, law: ControlLaw, period: Optional[float],
                      n_samples: int = 200, seed: int = 0, box: float = 3.0) -> bool:
    """Check ``b, sigma, L`` and the law repeat after ``period`` on random samples."""
    if period is None:
        return False
    rng = generator(substream_seed(seed, "periodicity"), 0)
    t = rng.uniform(0.0, period, n_samples)
    x = rng.uniform(-box, box, (n_samples, model.state_dim))
    ok = True
    for ti, xi in zip(t[:20], x[:20]):
        xi = xi[None, :]
        u0, u1 = law(ti, xi), law(ti + period, xi)
        ok &= np.allclose(u0, u1)
        ok &= np.allclose(model.b(ti, xi, u0), model.b(ti + period, xi, u0))
        ok &= np.allclose(model.sigma(ti, xi, u0), model.sigma(ti + period, xi, u0))
        ok &= np.allclose(model.L(ti, xi, u0), model.L(ti + period, xi, u0))
    return bool(ok)


def _periodic_fit(sol: BsdeSolution, ens: PathEnsemble, period: float, degree: int) -> PeriodicFit:
    """Pool ``Y^alpha(t_i, X_i)`` over one period and compare time-aware and
    time-free regressions."""
    times = ens.grid.times
    n_slice = int(np.ceil(period / ens.grid.dt))
    idx = np.linspace(0, n_slice - 1, min(n_slice, 40)).astype(int)
    xs = np.concatenate([ens.states[:, i] for i in idx])
    ts = np.concatenate([np.full(ens.n_paths, times[i]) for i in idx])
    ys = np.concatenate([sol.y_fits[i].predict(ens.states[:, i])[:, 0] for i in idx])
    timed = Projector(RegressionBasis(degree, period), xs, np.mod(ts, period))
    fit_t, _ = timed.fit(ys)
    fit_f, _ = Projector(RegressionBasis(degree), xs).fit(ys)
    rv_t, rv_f = float(fit_t.resid_var[0]), float(fit_f.resid_var[0])
    return PeriodicFit(rv_t, rv_f, rv_t < rv_f, fit_t)


def _growth_fit(v_vals: np.ndarray, x: np.ndarray) -> GrowthFit:
    s = 1.0 + np.sum(x * x, axis=1)
    a = np.abs(v_vals)
    C_fit = float(np.dot(a, s) / np.dot(s, s))
    sst = np.sum((a - a.mean()) ** 2)
    r2 = float(1 - np.sum((a - C_fit * s) ** 2) / sst) if sst > 0 else 1.0
    C_hat = float(np.max(a / s))
    return GrowthFit(C_hat, C_fit, r2, bool(np.all(a <= C_hat * s + 1e-12)))


def solve_ebsde(model: ControlledDiffusion, law: ControlLaw, alpha_schedule: Sequence[float] = DEFAULT_ALPHAS,
                x_ref=0.0, dt: float = 0.02, n_paths: int = 2000, basis: Optional[RegressionBasis] = None,
                seed: int = 0, x0_spread: float = 1.0) -> ErgodicSolution:
    """Ergodic constant and bias function by vanishing discount.

    One ensemble of length ``8/min(alpha)`` started around ``x_ref`` serves all
    discounts, each solved backward from its own horizon ``8/alpha``.  The two
    smallest discounts give the linear extrapolation
    ``lambda = (a1 s2 - a2 s1) / (a1 - a2)`` of ``s = alpha Y^alpha(0, x_ref)``.
    """
    alphas = [float(a) for a in alpha_schedule]
    if len(alphas) < 3 or any(b >= a for a, b in zip(alphas, alphas[1:])) or alphas[-1] <= 0:
        raise ValueError("alpha_schedule must hold at least 3 strictly decreasing positive values")
    basis = basis or RegressionBasis()
    n = model.state_dim
    x_ref = np.broadcast_to(np.asarray(x_ref, dtype=float), (n,)).copy()
    grid = TimeGrid.from_dt(0.0, HORIZON_FACTOR / alphas[-1], dt)
    start = initial_states(x_ref, n_paths, n, x0_spread, seed)
    full = simulate_forward(model, law, grid, n_paths, start, seed, keep_increments=False,
                            keep_controls=False)
    costs = _running_costs(model, law, full)

    values, scaled, scaled_se = [], [], []
    for a in alphas:
        steps = min(grid.n_steps, int(np.ceil(HORIZON_FACTOR / a / dt - 1e-9)))
        dv = _discounted_from_ensemble(model, law, _truncate(full, steps), a, basis, costs[:, :steps + 1])
        values.append(dv)
        scaled.append(float(a * dv(x_ref)[0]))
        scaled_se.append(float(a * dv.se(x_ref)[0]))

    a1, a2 = alphas[-2], alphas[-1]
    s1, s2 = scaled[-2], scaled[-1]
    lam = (a1 * s2 - a2 * s1) / (a1 - a2)
    w1, w2 = -a2 / (a1 - a2), a1 / (a1 - a2)
    lam_se = float(np.hypot(w1 * scaled_se[-2], w2 * scaled_se[-1]))

    diffs = np.diff(scaled)
    tol = 1.96 * np.hypot(np.asarray(scaled_se[:-1]), np.asarray(scaled_se[1:]))
    increasing = bool(np.all(diffs >= -tol))
    decreasing = bool(np.all(diffs <= tol))
    monotone = increasing or decreasing

    last = values[-1]
    v_fit = last.fit
    x0s = full.states[:, 0]
    per = model.period
    pfit = _periodic_fit(last.solution, _truncate(full, grid.n_steps), per, basis.degree) if per else None
    if pfit is not None:
        offset = float(pfit.fit.predict(x_ref[None, :], np.zeros(1))[0, 0])
        v_vals = pfit.fit.predict(x0s, np.zeros(n_paths))[:, 0] - offset
    else:
        offset = float(v_fit.predict(x_ref[None, :])[0, 0])
        v_vals = v_fit.predict(x0s)[:, 0] - offset
    growth = _growth_fit(v_vals, x0s)
    verified = periodicity_probe(model, law, per if per else 1.0, seed=seed)
    if not verified:
        log.info("periodicity of coefficients and control could not be verified")
    return ErgodicSolution(
        float(lam), lam_se, alphas, scaled, scaled_se, x_ref, v_fit, offset, growth, monotone,
        not monotone or not np.isfinite(lam), per, pfit, verified,
        {"dt": dt, "n_paths": n_paths, "seed": seed, "horizons": [v.horizon for v in values]})


# ----------------------------------------------------------------------------
# consistency of the three routes to lambda

@dataclass
class LambdaConsistency:
    estimates: dict
    se: dict
    pairwise_z: dict
    consistent: bool
    x0_independent: bool
    x0_gap: float
    x0_gap_ci: float
    raw_finite_horizon: float
    passed: bool

    def to_dict(self) -> dict:
        return _jsonable(self.__dict__)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["estimate", "value", "se", "ci_low", "ci_high"])
            for name in sorted(self.estimates):
                v, s = self.estimates[name], self.se[name]
                w.writerow([name, repr(v), repr(s), repr(v - 1.96 * s), repr(v + 1.96 * s)])


def finite_horizon_average(model: ControlledDiffusion, law: ControlLaw, horizon: float, x0,
                           dt: float, n_paths: int, seed: int, basis: Optional[RegressionBasis] = None,
                           x0_spread: float = 0.5, bias=None) -> tuple[float, float, float]:
    """``Y^{u,T}_0 / T`` from an undiscounted LSMC solve with ``Y_T = 0``.

    Returns ``(corrected, se, raw)``.  When a bias function ``bias(x)`` is
    given as ``bias(t, x)``, the ``O(1/T)`` term ``(v(0, x0) - E v(T, X_T)) / T``
    is removed.
    """
    basis = basis or RegressionBasis()
    n = model.state_dim
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), (n,))
    grid = TimeGrid.from_dt(0.0, horizon, dt)
    start = initial_states(x0, n_paths, n, x0_spread, seed)
    ens = simulate_forward(model, law, grid, n_paths, start, seed, keep_increments=False,
                           keep_controls=False)
    costs = _running_costs(model, law, ens)

    def driver(i, t, x, u, y, z):
        return costs[:, i, None]

    sol = backward_lsmc(ens, law, basis, np.zeros((n_paths, 1)), driver, want_z=False)
    raw = float(sol.y_fits[0].predict(x0[None, :])[0, 0]) / grid.t_end
    pathwise = costs[:, :-1].sum(axis=1) * dt
    se = float(Projector(basis, ens.states[:, 0]).fit(pathwise)[0].predict_se(x0[None, :])[0, 0])
    se /= grid.t_end
    corrected = raw
    if bias is not None:
        shift = float(bias(0.0, x0[None, :])[0]) - float(np.mean(bias(grid.t_end, ens.states[:, -1])))
        corrected = raw - shift / grid.t_end
    return corrected, se, raw


def check_lambda_consistency(model: ControlledDiffusion, law: ControlLaw, solution: ErgodicSolution,
                             horizon: float = 200.0, burn_in: float = 10.0, n_paths: int = 1000,
                             seed: int = 0, dt: Optional[float] = None, x0=None, x0_alt=None,
                             k: Optional[float] = None, n_paths_fh: int = 2000) -> LambdaConsistency:
    """Compare the vanishing-discount constant, the simulated long-run average
    and ``Y^{u,T}_0 / T`` at ``T = 20/k``; each pair must agree within two joint
    95% intervals.  Long-run averages from ``x0`` and ``x0_alt`` must agree
    likewise.
    """
    dt = dt or solution.diagnostics.get("dt", 0.02)
    n = model.state_dim
    x0 = solution.x_ref if x0 is None else np.broadcast_to(np.asarray(x0, float), (n,))
    x0_alt = (x0 + 2.0) if x0_alt is None else np.broadcast_to(np.asarray(x0_alt, float), (n,))
    k = k or model.constants.k or 1.0
    lra = long_run_average(model, law, horizon, burn_in, n_paths, substream_seed(seed, "lra"), dt, x0)
    lra_alt = long_run_average(model, law, horizon, burn_in, n_paths, substream_seed(seed, "lra-alt"),
                               dt, x0_alt)
    fh, fh_se, fh_raw = finite_horizon_average(model, law, 20.0 / k, x0, dt, n_paths_fh,
                                               substream_seed(seed, "finite-horizon"),
                                               bias=solution.v_hat)
    est = {"ebsde": solution.lambda_hat, "long_run": lra.lambda_hat, "finite_horizon": fh}
    se = {"ebsde": solution.lambda_se, "long_run": lra.se, "finite_horizon": fh_se}
    names = sorted(est)
    z = {}
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            joint = 1.96 * np.hypot(se[a], se[b])
            z[f"{a}-{b}"] = float(abs(est[a] - est[b]) / joint) if joint > 0 else float("inf")
    consistent = all(g <= 2.0 for g in z.values())
    gap = abs(lra.lambda_hat - lra_alt.lambda_hat)
    gap_ci = 1.96 * float(np.hypot(lra.se, lra_alt.se))
    indep = gap <= 2 * gap_ci
    return LambdaConsistency(est, se, z, bool(consistent), bool(indep), float(gap), gap_ci, fh_raw,
                             bool(consistent and indep))
