"""Quantitative ergodicity diagnostics: semigroup gradients, irreducibility, coupling."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import binomtest, ncx2

from ._rng import GaussianStreams, generator, substream_seed
from .model import (AssumptionReport, AssumptionViolation, ControlLaw, ControlledDiffusion,
                    _jsonable, check_ellipticity)
from .simulate import BLOWUP, TimeGrid, euler_steps

log = logging.getLogger(__name__)

TEST_FUNCTIONS: dict[str, tuple[Callable, float]] = {
    "tanh": (lambda x: np.tanh(x[:, 0]), 1.0),
    "gauss": (lambda x: np.exp(-np.sum(x * x, axis=1)), 1.0),
    "sin_clipped": (lambda x: np.clip(np.sin(x[:, 0]), -0.8, 0.8), 0.8),
}
"""Bounded test functions ``name -> (psi, sup|psi|)``."""


@dataclass
class GradientEstimate:
    value: float
    se: float

    @property
    def ci_half(self) -> float:
        return 1.96 * self.se

    @property
    def ci(self) -> tuple[float, float]:
        return self.value - self.ci_half, self.value + self.ci_half


def _inv_sigma_times(sig, v):
    if sig.shape[1] == 1:
        s = sig[:, 0, 0]
        if np.any(np.abs(s) < 1e-12):
            raise AssumptionViolation("near-singular diffusion along a path")
        return v / s[:, None]
    if np.any(np.linalg.cond(sig) > 1e12):
        raise AssumptionViolation("near-singular diffusion along a path")
    return np.linalg.solve(sig, v[:, :, None])[:, :, 0]


def bismut_elworthy(model: ControlledDiffusion, law: ControlLaw, psi: Callable, t: float, x, h,
                    n_paths: int, seed: int, dt: float = 0.01) -> GradientEstimate:
    """Estimate ``<h, D_x P_t psi(x)>`` without differentiating ``psi``.

    The tangent process follows the closed-loop coefficients, so a feedback
    law contributes ``b_u du/dx`` and ``sigma_u du/dx`` to its dynamics.

    Uses ``(1/t) E[psi(X_t) int_0^t (sigma^{-1} V^h)' dW]`` with ``psi``
    centred by its sample mean (the stochastic integral has mean zero).
    """
    if t <= 0:
        raise ValueError("t must be positive")
    n = model.state_dim
    grid = TimeGrid.from_dt(0.0, t, dt)
    v = np.broadcast_to(np.asarray(h, dtype=float), (n_paths, n)).copy()
    weight = np.zeros(n_paths)
    x_final = None
    for i, ti, xi, ui, dw in euler_steps(model, law, grid, n_paths, np.asarray(x, float), seed):
        if dw is None:
            x_final = xi
            break
        sig = model.sigma(ti, xi, ui)
        weight += np.einsum("mi,mi->m", _inv_sigma_times(sig, v), dw)
        du = np.einsum("mak,mk->ma", law.jacobian(ti, xi), v)
        db = np.einsum("mij,mj->mi", model.b_x(ti, xi, ui), v)
        dsig = np.einsum("mijk,mk->mij", model.sigma_x(ti, xi, ui), v)
        if law.kind == "feedback":
            db = db + np.einsum("mia,ma->mi", model.b_u(ti, xi, ui), du)
            dsig = dsig + np.einsum("mija,ma->mij", model.sigma_u(ti, xi, ui), du)
        v = v + db * grid.dt + np.einsum("mij,mj->mi", dsig, dw)
    vals = np.asarray(psi(x_final), dtype=float)
    per_path = (vals - vals.mean()) * weight / grid.t_end
    return GradientEstimate(float(per_path.mean()), float(per_path.std(ddof=1) / np.sqrt(n_paths)))


def _terminal(model, law, grid, n_paths, x0, seed):
    for _, _, xi, _, dw in euler_steps(model, law, grid, n_paths, x0, seed):
        if dw is None:
            return xi


def semigroup_value(model: ControlledDiffusion, law: ControlLaw, psi: Callable, t: float, x,
                    n_paths: int, seed: int, dt: float = 0.01) -> GradientEstimate:
    """Monte Carlo estimate of ``P_t psi(x) = E psi(X_t^x)``."""
    grid = TimeGrid.from_dt(0.0, t, dt)
    vals = np.asarray(psi(_terminal(model, law, grid, n_paths, np.asarray(x, float), seed)))
    return GradientEstimate(float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n_paths)))


def semigroup_finite_difference(model: ControlledDiffusion, law: ControlLaw, psi: Callable, t: float,
                                x, h, n_paths: int, seed: int, dt: float = 0.01,
                                eps: float = 1e-2) -> GradientEstimate:
    """Central difference ``(P_t psi(x + eps h) - P_t psi(x - eps h)) / (2 eps)``
    with common random numbers for both starting points."""
    n = model.state_dim
    grid = TimeGrid.from_dt(0.0, t, dt)
    x = np.asarray(x, dtype=float).reshape(n)
    h = np.asarray(h, dtype=float).reshape(n)
    plus = _terminal(model, law, grid, n_paths, x + eps * h, seed)
    minus = _terminal(model, law, grid, n_paths, x - eps * h, seed)
    q = (np.asarray(psi(plus)) - np.asarray(psi(minus))) / (2 * eps)
    return GradientEstimate(float(q.mean()), float(q.std(ddof=1) / np.sqrt(n_paths)))


def feller_constant(t: float, k: float, omega: float, inv_sigma_bound: float) -> float:
    """``C_t = (s/t) ((exp((omega-k)t) - 1)/(omega-k))^{1/2}`` with ``s`` bounding
    ``||sigma^{-1}||``; infinite for ``t < 1e-6``."""
    if t < 1e-6:
        return float("inf")
    rate = omega - k
    if abs(rate) * t < 1e-10:
        integral = t
    else:
        integral = np.expm1(rate * t) / rate
    return float(inv_sigma_bound / t * np.sqrt(integral))


def feller_gradient_bound(model: ControlledDiffusion, t: float,
                           report: Optional[AssumptionReport] = None) -> float:
    """``C_t`` from an assumption report when given, else from declared constants."""
    if report is not None:
        k = report.dissipativity.k_hat
        omega = report.sigma_lipschitz
        inv_s = report.ellipticity.inv_norm_range[1]
    else:
        c = model.constants
        k, omega, inv_s = c.k, c.omega, c.inv_sigma_bound
    if k is None or omega is None or inv_s is None:
        raise AssumptionViolation("k, omega and a bound on ||sigma^-1|| are required; run "
                                  "check_assumptions or declare the constants")
    return feller_constant(t, k, omega, inv_s)


@dataclass
class IrreducibilityReport:
    p_hat: float
    hits: int
    n_paths: int
    wilson: tuple
    verdict: str
    detection_bound: Optional[float]
    proxy_probability: float
    n_needed: Optional[int]


def irreducibility_probe(model: ControlledDiffusion, law: ControlLaw, t: float, target, radius: float,
                         n_paths: int, seed: int, dt: float = 0.01, x0=0.0,
                         gate_box: float = 5.0) -> IrreducibilityReport:
    """Fraction of paths inside the open ball ``B_r(z)`` at time ``t`` with a
    Wilson 95% interval.

    Refuses (``AssumptionViolation``) when the ellipticity check fails around
    ``x0``.  When no path hits, the report gives the rule-of-three bound
    ``3/n_paths`` and the sample size needed under a Gaussian proxy of the
    law of ``X_t``.
    """
    if t <= 0 or radius <= 0:
        raise ValueError("t and radius must be positive")
    n = model.state_dim
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), (n,))
    ell = check_ellipticity(model, (x0 - gate_box, x0 + gate_box), 500, seed)
    if not ell.holds:
        raise AssumptionViolation(f"ellipticity fails; witness {ell.singular_witness}")
    grid = TimeGrid.from_dt(0.0, t, dt)
    xt = _terminal(model, law, grid, n_paths, x0, seed)
    z = np.broadcast_to(np.asarray(target, dtype=float), (n,))
    hits = int(np.sum(np.linalg.norm(xt - z, axis=1) < radius))
    ci = binomtest(hits, n_paths).proportion_ci(0.95, method="wilson")
    mean = xt.mean(axis=0)
    s2 = max(float(np.trace(np.atleast_2d(np.cov(xt.T)))) / n, 1e-300)
    proxy = float(ncx2.cdf(radius ** 2 / s2, n, np.sum((mean - z) ** 2) / s2))
    if hits > 0:
        return IrreducibilityReport(hits / n_paths, hits, n_paths, (ci.low, ci.high), "positive",
                                    None, proxy, None)
    needed = int(np.ceil(3.0 / proxy)) if proxy > 0 else None
    return IrreducibilityReport(0.0, 0, n_paths, (ci.low, ci.high), "undetected", 3.0 / n_paths,
                                proxy, needed)


# ----------------------------------------------------------------------------
# coupling

@dataclass
class TvFit:
    times: np.ndarray
    tv_hat: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    rho_hat: float
    C_hat: float
    r_squared: float
    inconclusive: bool
    x: list
    y: list
    radius: float
    epoch_length: float
    meta: dict = field(default_factory=dict)

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "tv_hat", "ci_low", "ci_high"])
            for row in zip(self.times, self.tv_hat, self.ci_low, self.ci_high):
                w.writerow([repr(float(v)) for v in row])

    def summary(self) -> dict:
        return _jsonable({"rho_hat": self.rho_hat, "C_hat": self.C_hat, "r_squared": self.r_squared,
                          "inconclusive": self.inconclusive, "x": self.x, "y": self.y,
                          "radius": self.radius, "epoch_length": self.epoch_length, **self.meta})

    def to_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True, indent=2)


def _log_gauss(x, mean, chol):
    d = np.linalg.solve(chol, (x - mean)[:, :, None])[:, :, 0]
    return -0.5 * np.sum(d * d, axis=1) - np.sum(np.log(np.abs(np.diagonal(chol, axis1=1, axis2=2))), axis=1)


def _maximal_step(mx, my, sx, sy, xi, rng):
    """One Euler step for pairs under a maximal coupling of the Gaussian kernels.

    Equal diffusions use the reflection-maximal coupling; otherwise a
    rejection-based maximal coupling with independent residuals.
    Returns ``(x_next, y_next, met)``.
    """
    m, n = mx.shape
    x_next = mx + np.einsum("mij,mj->mi", sx, xi)
    same = np.all(np.isclose(sx, sy, rtol=1e-12, atol=1e-14), axis=(1, 2))
    y_next = np.empty_like(x_next)
    met = np.zeros(m, dtype=bool)
    u = rng.random(m)
    if same.any():
        s = sx[same]
        zz = np.linalg.solve(s, (mx[same] - my[same])[:, :, None])[:, :, 0]
        xs = xi[same]
        log_ratio = np.minimum(0.0, -np.sum(xs * zz, axis=1) - 0.5 * np.sum(zz * zz, axis=1))
        acc = np.log(np.maximum(u[same], 1e-300)) <= log_ratio
        norm_z = np.linalg.norm(zz, axis=1, keepdims=True)
        e = zz / np.where(norm_z > 0, norm_z, 1.0)
        refl = xs - 2 * np.sum(e * xs, axis=1, keepdims=True) * e
        ys = my[same] + np.einsum("mij,mj->mi", s, refl)
        ys[acc] = x_next[same][acc]
        y_next[same] = ys
        met[same] = acc
    diff = ~same
    if diff.any():
        cx, cy = sx[diff], sy[diff]
        xd, mxd, myd = x_next[diff], mx[diff], my[diff]
        lp = _log_gauss(xd, mxd, cx)
        lq = _log_gauss(xd, myd, cy)
        acc = np.log(np.maximum(u[diff], 1e-300)) + lp <= lq
        yd = xd.copy()
        pending = ~acc
        for _ in range(100):
            if not pending.any():
                break
            cand = myd[pending] + np.einsum("mij,mj->mi", cy[pending], rng.standard_normal((pending.sum(), n)))
            v = rng.random(pending.sum())
            ok = np.log(np.maximum(v, 1e-300)) + _log_gauss(cand, myd[pending], cy[pending]) > \
                _log_gauss(cand, mxd[pending], cx[pending])
            idx = np.flatnonzero(pending)
            yd[idx[ok]] = cand[ok]
            pending[idx[ok]] = False
        if pending.any():
            idx = np.flatnonzero(pending)
            yd[idx] = myd[pending] + np.einsum("mij,mj->mi", cy[pending], rng.standard_normal((pending.sum(), n)))
        y_next[diff] = yd
        met[diff] = acc
    return x_next, y_next, met


def default_coupling_radius(model, law, x, seed, k=None, dt=0.01, n_paths=2000) -> float:
    """Radius with stationary mass in the ball at least 0.9 by Chebyshev,
    ``R = sqrt(c_hat / 0.1)`` where ``c_hat`` is a pilot long-time second moment."""
    k = k or model.constants.k or 1.0
    grid = TimeGrid.from_dt(0.0, 10.0 / k, dt)
    xt = _terminal(model, law, grid, n_paths, np.asarray(x, float), substream_seed(seed, "pilot"))
    c_hat = float(np.mean(np.sum(xt * xt, axis=1)))
    return float(np.sqrt(c_hat / 0.1))


def _fit_decay(times, tv, window):
    sel = (tv > 0) & (times >= window[0]) & (times <= window[1])
    if sel.sum() < 2:
        return 0.0, float("nan"), 0.0
    slope, icpt = np.polyfit(times[sel], np.log(tv[sel]), 1)
    pred = icpt + slope * times[sel]
    obs = np.log(tv[sel])
    sst = np.sum((obs - obs.mean()) ** 2)
    r2 = 1 - np.sum((obs - pred) ** 2) / sst if sst > 0 else 1.0
    return float(-slope), float(np.exp(icpt)), float(r2)


def coupling_tv(model: ControlledDiffusion, law: ControlLaw, x, y, epochs: int,
                epoch_length: Optional[float] = None, R: Optional[float] = None, n_pairs: int = 10000,
                seed: int = 0, dt: float = 0.01, fit_window: Optional[tuple] = None) -> TvFit:
    """Coupling upper bound on ``||P_t(x, .) - P_t(y, .)||_TV`` at epoch times.

    The pair moves with independent noise until both components sit in the
    ball ``B_R(0)`` at an epoch boundary; during such an epoch a coupling is
    attempted (reflection coupling in one dimension, a per-step maximal
    coupling of the Euler kernels otherwise).  Once met the components move
    together, and ``tv_hat(m T) = P(not met by epoch m)``.
    """
    n = model.state_dim
    x = np.broadcast_to(np.asarray(x, dtype=float), (n,))
    y = np.broadcast_to(np.asarray(y, dtype=float), (n,))
    k = model.constants.k
    if epoch_length is None:
        epoch_length = 2.0 / (k if k else 1.0)
    if R is None:
        R = default_coupling_radius(model, law, x, seed)
    steps = max(1, int(round(epoch_length / dt)))
    h = epoch_length / steps
    sqh = np.sqrt(h)
    X = np.broadcast_to(x, (n_pairs, n)).copy()
    Y = np.broadcast_to(y, (n_pairs, n)).copy()
    met = np.full(n_pairs, bool(np.array_equal(x, y)))
    sx_stream = GaussianStreams(substream_seed(seed, "coupling-x"), n_pairs, n)
    sy_stream = GaussianStreams(substream_seed(seed, "coupling-y"), n_pairs, n)
    rng = generator(substream_seed(seed, "coupling-accept"), 0)
    tv = [1.0 - met.mean()]
    epoch_rates = []
    diverged = False
    for e in range(epochs):
        mode = (np.linalg.norm(X, axis=1) < R) & (np.linalg.norm(Y, axis=1) < R) & ~met
        before = met.sum()
        for s in range(steps):
            t = (e * steps + s) * h
            ux, uy = law(t, X), law(t, Y)
            xi = sx_stream.step()
            eta = sy_stream.step()
            bx, by = model.b(t, X, ux), model.b(t, Y, uy)
            sgx, sgy = model.sigma(t, X, ux), model.sigma(t, Y, uy)
            Xn = X + bx * h + np.einsum("mij,mj->mi", sgx, sqh * xi)
            noise_y = np.where(met[:, None], xi, eta)
            if n == 1:
                noise_y = np.where(mode[:, None] & ~met[:, None], -xi, noise_y)
            Yn = Y + by * h + np.einsum("mij,mj->mi", sgy, sqh * noise_y)
            if n == 1:
                crossed = mode & ~met & (np.sign(Xn[:, 0] - Yn[:, 0]) != np.sign(X[:, 0] - Y[:, 0]))
                met = met | crossed
            else:
                active = mode & ~met
                if active.any():
                    xa, ya, hit = _maximal_step(X[active] + bx[active] * h, Y[active] + by[active] * h,
                                                sgx[active] * sqh, sgy[active] * sqh, xi[active], rng)
                    Xn[active], Yn[active] = xa, ya
                    idx = np.flatnonzero(active)
                    met[idx[hit]] = True
            Yn[met] = Xn[met]
            X, Y = Xn, Yn
            if not (np.all(np.abs(X) <= BLOWUP) and np.all(np.abs(Y) <= BLOWUP)):
                diverged = True
                break
        if diverged:
            log.warning("coupled pair diverged in epoch %d", e)
            break
        remaining = n_pairs - before
        epoch_rates.append((met.sum() - before) / remaining if remaining else 1.0)
        tv.append(1.0 - met.mean())

    times = np.arange(len(tv)) * epoch_length
    tv = np.asarray(tv)
    hits = np.rint(tv * n_pairs).astype(int)
    cis = [binomtest(int(c), n_pairs).proportion_ci(0.95, method="wilson") for c in hits]
    window = fit_window or (epoch_length, times[-1])
    rho, C, r2 = _fit_decay(times, tv, window)
    weak = bool(epoch_rates) and max(epoch_rates) < 1e-4 and tv[-1] > 0
    inconclusive = diverged or weak or not rho > 0
    if diverged:
        rho = 0.0
    return TvFit(times, tv, np.array([c.low for c in cis]), np.array([c.high for c in cis]),
                 rho, C, r2, bool(inconclusive), x.tolist(), y.tolist(), float(R),
                 float(epoch_length), {"n_pairs": n_pairs, "diverged": diverged,
                                       "epoch_coupling_rates": epoch_rates})


@dataclass
class PrefactorFit:
    rho: float
    prefactors: list
    scales: list
    C_hat: float
    r_squared: float
    monotone: bool
    envelope_holds: bool


def coupling_prefactor_fit(fits: Sequence[TvFit], rho: Optional[float] = None,
                           window: Optional[tuple] = None) -> PrefactorFit:
    """Fit ``tv_hat(t) ~ C(x, y) exp(-rho t)`` with a common rate and compare
    ``C(x, y)`` with the quadratic shape ``1 + |x|^2 + |y|^2``."""
    if rho is None:
        rho = fits[0].rho_hat
    pref, scales = [], []
    env = True
    for f in fits:
        lo, hi = window or (f.epoch_length, f.times[-1])
        sel = (f.tv_hat > 0) & (f.times >= lo) & (f.times <= hi)
        c = float(np.exp(np.mean(np.log(f.tv_hat[sel]) + rho * f.times[sel]))) if sel.any() else 0.0
        pref.append(c)
        scales.append(1.0 + float(np.sum(np.square(f.x))) + float(np.sum(np.square(f.y))))
    pref_a, sc = np.asarray(pref), np.asarray(scales)
    order = np.argsort(sc)
    monotone = bool(np.all(np.diff(pref_a[order]) > 0))
    if len(fits) >= 3 and np.ptp(pref_a) > 0:
        r2 = float(np.corrcoef(sc, pref_a)[0, 1] ** 2)
    else:
        r2 = float("nan")
    C_hat = float(np.max(pref_a / sc))
    for f, s in zip(fits, scales):
        env &= bool(f.tv_hat[0] <= max(C_hat * s, 1.0) + 1e-12)
        env &= bool(np.all(f.tv_hat[1:] <= C_hat * s * np.exp(-rho * f.times[1:]) * 1.5 + 3.0 / f.meta["n_pairs"]))
    return PrefactorFit(float(rho), pref, scales, C_hat, r2, monotone, bool(env))
