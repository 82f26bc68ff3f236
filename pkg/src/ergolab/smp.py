"""Sufficient maximum principle checks for a candidate feedback law."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from ._rng import generator, substream_seed
from .adjoint import BsdeSolution
from .hamiltonian import ConvexityReport, eval_H, minimize_H_u
from .model import ControlLaw, ControlledDiffusion, _jsonable
from .simulate import PathEnsemble, SimulationDivergence, TimeGrid, euler_steps, long_run_average

log = logging.getLogger(__name__)

DECAY_EXPONENT = -0.8


@dataclass
class MinimalityReport:
    sup_gap: float
    mean_gap: float
    threshold: float
    h_scale: float
    passed: bool
    witness: dict
    n_samples: int
    n_outside: int = 0


def verify_hamiltonian_minimality(model: ControlledDiffusion, law: ControlLaw, solution: BsdeSolution,
                                  ensemble: PathEnsemble, tol: Optional[float] = None,
                                  n_samples: int = 2000, seed: int = 0, bounds=None) -> MinimalityReport:
    """Gap ``H(u) - min_v H(v)`` at sampled ``(t_i, X_ij)`` along the candidate's ensemble.

    With ``tol = None`` the threshold is three times the mean regression
    standard error of ``H`` (propagated from ``Y`` and ``Z``), which scales
    with the cost.  An explicit ``tol`` gives the threshold
    ``tol * (1 + mean|H|)``.  Samples outside the region where the adjoint
    regression was fitted (its clipping box) are excluded and counted in
    ``n_outside``.
    """
    n = model.state_dim
    rec_t = ensemble.record_times
    usable = np.flatnonzero(rec_t <= solution.t_end + 1e-12)
    if usable.size == 0:
        raise ValueError("ensemble times do not overlap the adjoint solution")
    rng = generator(substream_seed(seed, "minimality"), 0)
    slots = rng.choice(usable, n_samples)
    paths = rng.integers(0, ensemble.n_paths, n_samples)
    t = rec_t[slots]
    x = ensemble.states[paths, slots]
    u = np.empty((n_samples, model.control_dim))
    y = np.empty((n_samples, n))
    z = np.zeros((n_samples, n, n))
    se_h = np.zeros(n_samples)
    has_z = bool(solution.z_fits)
    for s in np.unique(slots):
        sel = slots == s
        ts, xs = rec_t[s], x[sel]
        u[sel] = law(ts, xs)
        i = solution._slice(ts)
        yf = solution.y_fits[i]
        y[sel] = yf.predict(xs)
        b = model.b(ts, xs, u[sel])
        se = np.einsum("mi,mi->m", np.abs(b), yf.predict_se(xs))
        if has_z:
            zf = solution.z_fits[min(i, len(solution.z_fits) - 1)]
            z[sel] = zf.predict(xs).reshape(-1, n, n)
            sig = model.sigma(ts, xs, u[sel]).reshape(-1, n * n)
            se = se + np.einsum("mi,mi->m", np.abs(sig), zf.predict_se(xs))
        se_h[sel] = se
    inside = np.ones(n_samples, dtype=bool)
    for s in np.unique(slots):
        sel = slots == s
        yf = solution.y_fits[solution._slice(rec_t[s])]
        inside[sel] = np.all((x[sel] >= yf.clip_lo) & (x[sel] <= yf.clip_hi), axis=1)
    if not inside.any():
        raise ValueError("no sampled state lies inside the adjoint's fitted region")
    t, x, u, y, z, se_h = t[inside], x[inside], u[inside], y[inside], z[inside], se_h[inside]
    h_u = eval_H(model, t, x, u, y, z)
    best = minimize_H_u(model, t, x, y, z, u_init=u, bounds=bounds if bounds is not None else law.bounds)
    gap = np.maximum(h_u - best.value, 0.0)
    h_scale = float(np.mean(np.abs(h_u)))
    threshold = 3.0 * float(np.mean(se_h)) if tol is None else tol * (1.0 + h_scale)
    j = int(np.argmax(gap))
    witness = {"t": float(t[j]), "x": x[j].tolist(), "u": u[j].tolist(), "u_min": best.u[j].tolist(),
               "gap": float(gap[j]), "y": y[j].tolist()}
    return MinimalityReport(float(gap[j]), float(gap.mean()), threshold, h_scale,
                            bool(gap[j] <= threshold), witness, int(inside.sum()),
                            int(n_samples - inside.sum()))


@dataclass
class TransversalityCurve:
    horizons: list
    values: list
    se: list
    exponent: float
    decaying: bool
    divergent: bool
    extrapolated: list


def _decay_exponent(horizons, values, se):
    v = np.abs(np.asarray(values))
    if np.all(v <= 1e-15):
        return float("-inf")
    keep = v > 0
    if keep.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(np.asarray(horizons)[keep]), np.log(v[keep]), 1)[0])


def verify_transversality(model: ControlledDiffusion, candidate_law: ControlLaw,
                          challenger_laws: Mapping[str, ControlLaw], solution: BsdeSolution,
                          horizons: Sequence[float], n_paths: int, seed: int, x0=0.0,
                          dt: float = 0.01) -> dict[str, TransversalityCurve]:
    """Curves ``T -> (1/T) E[Ybar(T, Xbar_T) . (X^u_T - Xbar_T)]`` per challenger.

    Candidate and challengers share the Brownian increments.  ``Ybar(T, .)``
    is the adjoint map at ``T``; beyond the solved window the last slice is
    used (flagged ``extrapolated``), up to twice the window.
    """
    horizons = sorted(float(h) for h in horizons)
    if horizons[-1] > 2 * solution.t_end + 1e-12:
        raise ValueError(f"horizon {horizons[-1]} exceeds twice the solved adjoint window "
                         f"{solution.t_end}")
    grid = TimeGrid.from_dt(0.0, horizons[-1], dt)
    want = {grid.index(h): h for h in horizons}

    def states_at(law):
        out = {}
        for i, _, x, _, _ in euler_steps(model, law, grid, n_paths, x0, seed):
            if i in want:
                out[want[i]] = x.copy()
        return out

    cand = states_at(candidate_law)
    curves = {}
    for name, law in challenger_laws.items():
        try:
            other = states_at(law)
            divergent = False
        except SimulationDivergence as exc:
            log.warning("challenger %s diverged: %s", name, exc)
            other, divergent = None, True
        vals, ses, extra = [], [], []
        if not divergent:
            for T in horizons:
                xb = cand[T]
                yb = solution.Y(min(T, solution.t_end), xb)
                prod = np.einsum("mi,mi->m", yb, other[T] - xb) / T
                vals.append(float(prod.mean()))
                ses.append(float(prod.std(ddof=1) / np.sqrt(n_paths)))
                extra.append(bool(T > solution.t_end + 1e-12))
            expo = _decay_exponent(horizons, vals, ses)
        else:
            expo = float("nan")
        decaying = bool(not divergent and expo <= DECAY_EXPONENT)
        curves[name] = TransversalityCurve(horizons, vals, ses, expo, decaying, divergent, extra)
    return curves


@dataclass
class CostRow:
    name: str
    lambda_hat: float
    se: float
    gap: float
    gap_se: float


def compare_costs(model: ControlledDiffusion, candidate_law: ControlLaw,
                  challenger_laws: Mapping[str, ControlLaw], horizon: float, n_paths: int, seed: int,
                  burn_in: Optional[float] = None, dt: float = 0.01, x0=0.0,
                  candidate_name: str = "candidate") -> list[CostRow]:
    """Long-run average cost per law with gaps ``lambda(challenger) - lambda(candidate)``
    paired path by path under common random numbers."""
    burn_in = 0.05 * horizon if burn_in is None else burn_in
    base = long_run_average(model, candidate_law, horizon, burn_in, n_paths, seed, dt, x0)
    rows = [CostRow(candidate_name, base.lambda_hat, base.se, 0.0, 0.0)]
    for name, law in challenger_laws.items():
        try:
            r = long_run_average(model, law, horizon, burn_in, n_paths, seed, dt, x0)
        except SimulationDivergence:
            rows.append(CostRow(name, float("inf"), float("nan"), float("inf"), float("nan")))
            continue
        d = r.per_path - base.per_path
        rows.append(CostRow(name, r.lambda_hat, r.se, float(d.mean()),
                            float(d.std(ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else 0.0))
    return rows


def write_cost_table(rows: Sequence[CostRow], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["law", "lambda_hat", "se", "gap", "gap_se"])
        for r in rows:
            w.writerow([r.name, repr(r.lambda_hat), repr(r.se), repr(r.gap), repr(r.gap_se)])


def write_transversality(curves: Mapping[str, TransversalityCurve], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["challenger", "T", "value", "se", "extrapolated"])
        for name in sorted(curves):
            c = curves[name]
            for T, v, s, e in zip(c.horizons, c.values, c.se, c.extrapolated):
                w.writerow([name, repr(T), repr(v), repr(s), str(e).lower()])


@dataclass
class SmpCertificate:
    verdict: str
    witness: Optional[dict]
    hamiltonian_gap: float
    transversality: dict
    cost_gaps: list
    reasons: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return _jsonable({
            "verdict": self.verdict, "witness": self.witness, "hamiltonian_gap": self.hamiltonian_gap,
            "transversality": {k: v.__dict__ for k, v in self.transversality.items()},
            "cost_gaps": [r.__dict__ for r in self.cost_gaps], "reasons": self.reasons})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def issue_certificate(convexity: Optional[ConvexityReport], minimality: MinimalityReport,
                      transversality: Mapping[str, TransversalityCurve],
                      costs: Sequence[CostRow]) -> SmpCertificate:
    """Fold the sub-reports into a verdict.

    Without convexity the sufficient principle does not apply, so the verdict
    is ``inconclusive``.  A failed minimality check or a challenger cheaper by
    more than three 95% half-widths gives ``violated``.  ``certified`` needs
    minimality, decaying transversality curves and no challenger cheaper
    beyond one half-width.
    """
    challengers = list(costs[1:])
    reasons = []
    args = (minimality.sup_gap, dict(transversality), list(costs))
    if convexity is None or not convexity.passed:
        reasons.append("Hamiltonian not convex in (x, u) on the probed box")
        w = None if convexity is None else {"kind": "convexity", **(convexity.witness or {})}
        return SmpCertificate("inconclusive", w, *args, reasons)
    if not minimality.passed:
        reasons.append(f"Hamiltonian gap {minimality.sup_gap:.3g} exceeds {minimality.threshold:.3g}")
        return SmpCertificate("violated", {"kind": "hamiltonian", **minimality.witness}, *args, reasons)
    for r in challengers:
        if r.gap < -3 * 1.96 * r.gap_se:
            reasons.append(f"challenger {r.name} is cheaper by {-r.gap:.3g}")
            return SmpCertificate("violated", {"kind": "cost", "challenger": r.name, "gap": r.gap,
                                               "gap_se": r.gap_se}, *args, reasons)
    ok = True
    for name, c in transversality.items():
        if not c.decaying:
            ok = False
            reasons.append(f"transversality curve for {name} not decaying (exponent {c.exponent:.3g})")
    for r in challengers:
        if r.gap < -1.96 * r.gap_se:
            ok = False
            reasons.append(f"challenger {r.name} possibly cheaper")
    return SmpCertificate("certified" if ok else "inconclusive", None, *args, reasons)
