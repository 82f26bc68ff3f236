"""Stage pipeline writing reproducible result bundles."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy

from .. import __version__
from .._rng import substream_seed
from ..adjoint import NoContractionError, NonConvergenceError, solve_ih_adjoint
from ..ebsde import check_lambda_consistency, solve_ebsde
from ..ergodicity import (TEST_FUNCTIONS, bismut_elworthy, coupling_prefactor_fit, coupling_tv,
                          feller_gradient_bound, irreducibility_probe, semigroup_finite_difference)
from ..hamiltonian import convexity_probe
from ..model import AssumptionViolation, ControlLaw, _jsonable, check_assumptions
from ..regression import RegressionBasis
from ..simulate import (SimulationDivergence, TimeGrid, estimate_moment_bound, long_run_average,
                        simulate_forward)
from ..smp import (compare_costs, issue_certificate, verify_hamiltonian_minimality,
                   verify_transversality, write_cost_table, write_transversality)
from .config import ConfigError, parse_config, resolve_stages
from .oracles import ou_oracle, ou_second_moment
from .scenarios import UnknownScenario, load_scenario

log = logging.getLogger("ergolab")

STREAMS = {"check": "model-check", "simulate": "forward", "adjoint": "adjoint",
           "ergodicity": "coupling", "ebsde": "ebsde", "smp": "smp"}

EXIT_OK, EXIT_ASSUMPTION, EXIT_NONCONVERGENCE, EXIT_CONFIG = 0, 2, 3, 4


class StageFailure(RuntimeError):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


@dataclass
class ReportBundle:
    directory: Path
    stages: list
    summary: list = field(default_factory=list)
    exit_code: int = EXIT_OK
    files: dict = field(default_factory=dict)

    def table(self) -> str:
        rows = [("stage", "result", "status")] + [tuple(r) for r in self.summary]
        widths = [max(len(str(r[i])) for r in rows) for i in range(3)]
        lines = ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines)


def _dump(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_rows(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


class _Run:
    def __init__(self, cfg: dict, seed: int, out: Path):
        self.cfg = cfg
        self.seed = seed
        self.out = out
        self.spec = load_scenario(cfg["run"]["scenario"], **cfg.get("scenario", {}))
        self.adjoint = None
        self.summary: list = []

    def seed_for(self, stage: str) -> int:
        return substream_seed(self.seed, STREAMS[stage])

    # -- stages --------------------------------------------------------------
    def check(self):
        c = self.cfg["check"]
        m = self.spec.model
        s = self.seed_for("check")
        rep = check_assumptions(m, tuple(c["box"]), c["n_samples"], s, horizon=c["horizon"],
                                u_box=tuple(c["u_box"]))
        conv = convexity_probe(m, c["convexity_samples"], tuple(c["box"]), s, tuple(c["u_box"]))
        passed = bool(rep.dissipativity.holds and rep.ellipticity.holds)
        data = {"scenario": self.spec.name, "report": rep.to_dict(), "convexity": conv.__dict__,
                "passed": passed}
        _write(self.out / "assumptions.json", _dump(data))
        self.convexity = conv
        self.summary.append(("check", f"k_hat={rep.dissipativity.k_hat:.4g}", "pass" if passed else "FAIL"))
        if not passed:
            raise StageFailure("assumption checks failed (see assumptions.json)", EXIT_ASSUMPTION)

    def simulate(self):
        c = self.cfg["simulate"]
        m, law, x0 = self.spec.model, self.spec.law, self.spec.x0
        s = self.seed_for("simulate")
        grid = TimeGrid.from_dt(0.0, c["horizon"], c["dt"])
        ens = simulate_forward(m, law, grid, c["n_paths"], x0, s, c["record_every"],
                               keep_increments=False, keep_controls=False)
        fit = estimate_moment_bound(ens)
        oracle = None
        if self.spec.name == "ou-quadratic":
            p = self.spec.params
            oracle = ou_second_moment(p["k"], p["sigma"], x0, fit.times)
        rows = [(t, v) + ((o,) if oracle is not None else ()) for t, v, o in
                zip(fit.times, fit.second_moment, oracle if oracle is not None else fit.times)]
        _write_rows(self.out / "simulate" / "moments.csv",
                    ["t", "second_moment"] + (["oracle"] if oracle is not None else []), rows)
        lra = long_run_average(m, law, c["lra_horizon"], c["lra_burn_in"], c["lra_paths"],
                               substream_seed(s, "lra"), c["dt"], x0)
        data = {"moment_fit": {k: v for k, v in fit.__dict__.items() if k not in ("times", "second_moment")},
                "long_run_average": {"lambda_hat": lra.lambda_hat, "se": lra.se,
                                     "ci": [lra.ci_low, lra.ci_high]},
                "oracle_lambda": self.spec.oracle.get("lambda")}
        _write(self.out / "simulate.json", _dump(data))
        self.summary.append(("simulate", f"lambda_lra={lra.lambda_hat:.4g}+/-{1.96 * lra.se:.2g}",
                             "inconclusive" if fit.inconclusive else "ok"))

    def adjoint_stage(self):
        c = self.cfg["adjoint"]
        m, law = self.spec.model, self.spec.law
        sol = solve_ih_adjoint(m, law, c["eval_window"], c["T_init"], c["growth_factor"], c["tol"],
                               RegressionBasis(c["degree"]), c["n_paths"],
                               self.seed_for("adjoint"), c["dt"], 0.0, c["x0_spread"],
                               max_solves=c["max_solves"], min_comparisons=c["min_comparisons"])
        self.adjoint = sol
        pts = np.linspace(-2.0, 2.0, 41)
        y0 = sol.Y(0.0, pts[:, None])[:, 0]
        slope = float(np.polyfit(pts[10:31], y0[10:31], 1)[0])
        (self.out / "adjoint").mkdir(parents=True, exist_ok=True)
        sol.export_y0_csv(str(self.out / "adjoint" / "y0.csv"), pts[:, None])
        data = {"diagnostics": sol.diagnostics, "y0_slope": slope,
                "oracle_slope": self.spec.oracle.get("adjoint_slope"),
                "sup_norm": float(np.max(sol.sup_norm)), "t_end": sol.t_end}
        _write(self.out / "adjoint.json", _dump(data))
        self.summary.append(("adjoint", f"horizon={sol.diagnostics['horizon_used']:.4g} slope={slope:.4g}",
                             "ok" if sol.diagnostics["strictly_decreasing"] else "non-monotone"))

    def ergodicity(self):
        c = self.cfg["ergodicity"]
        m, law, x0 = self.spec.model, self.spec.law, self.spec.x0
        s = self.seed_for("ergodicity")
        d = self.out / "ergodicity"
        rows, summary = [], {}
        try:
            Ct = feller_gradient_bound(m, c["t"])
        except AssumptionViolation:
            Ct = float("inf")
        for name in sorted(TEST_FUNCTIONS):
            psi, sup = TEST_FUNCTIONS[name]
            be = bismut_elworthy(m, law, psi, c["t"], x0, 1.0, c["n_paths"], substream_seed(s, "be"), c["dt"])
            fd = semigroup_finite_difference(m, law, psi, c["t"], x0, 1.0, c["n_paths"],
                                             substream_seed(s, "be"), c["dt"])
            joint = float(np.hypot(be.ci_half, fd.ci_half))
            rows.append((name, be.value, be.se, fd.value, fd.se, Ct * sup,
                         str(abs(be.value - fd.value) <= 2 * joint).lower()))
        _write_rows(d / "bismut_elworthy.csv", ["psi", "estimate", "se", "fd", "fd_se", "bound", "agree"], rows)
        mean_t = None
        if self.spec.name == "ou-quadratic":
            o = ou_oracle(self.spec.params["k"], self.spec.params["sigma"], x0, c["t"])
            mean_t = o.mean
        target = mean_t if mean_t is not None else x0
        irr = irreducibility_probe(m, law, c["t"], target, c["ball_radius"], c["n_paths"],
                                   substream_seed(s, "irreducibility"), c["dt"], x0)
        _write_rows(d / "irreducibility.csv", ["target", "radius", "p_hat", "wilson_low", "wilson_high",
                                               "verdict"],
                    [(float(target), c["ball_radius"], irr.p_hat, float(irr.wilson[0]),
                      float(irr.wilson[1]), irr.verdict)])
        pairs = np.asarray(c["pairs"]).reshape(-1, 2)
        fits = []
        for a, b in pairs:
            f = coupling_tv(m, law, a, b, c["epochs"], n_pairs=c["n_pairs"],
                            seed=substream_seed(s, f"pair/{a!r}/{b!r}"), dt=c["dt"])
            fits.append(f)
            f.to_csv(str(d / f"tv_{a:g}_{b:g}.csv"))
        pref = coupling_prefactor_fit(fits) if len(fits) >= 2 else None
        summary = {"feller_bound": Ct, "irreducibility": irr.__dict__,
                   "coupling": [f.summary() for f in fits],
                   "prefactor": None if pref is None else pref.__dict__}
        _write(d / "summary.json", _dump(summary))
        rho = fits[0].rho_hat
        self.summary.append(("ergodicity", f"rho_hat={rho:.3g} p_hit={irr.p_hat:.3g}",
                             "inconclusive" if fits[0].inconclusive else "ok"))

    def ebsde(self):
        c = self.cfg["ebsde"]
        m, law, x0 = self.spec.model, self.spec.law, self.spec.x0
        s = self.seed_for("ebsde")
        sol = solve_ebsde(m, law, c["alphas"], x0, c["dt"], c["n_paths"], seed=s)
        rep = check_lambda_consistency(m, law, sol, c["lra_horizon"], 10.0, c["lra_paths"],
                                       substream_seed(s, "consistency"), n_paths_fh=c["fh_paths"])
        (self.out / "ebsde").mkdir(parents=True, exist_ok=True)
        rep.to_csv(str(self.out / "ebsde" / "consistency.csv"))
        data = {"solution": sol.to_dict(), "consistency": rep.to_dict(),
                "oracle_lambda": self.spec.oracle.get("lambda")}
        _write(self.out / "ebsde.json", _dump(data))
        self.summary.append(("ebsde", f"lambda_hat={sol.lambda_hat:.4g}+/-{1.96 * sol.lambda_se:.2g}",
                             "pass" if rep.passed else "FAIL"))

    def smp(self):
        if self.adjoint is None:
            raise ConfigError("stage 'smp' needs the adjoint stage in the same run")
        c = self.cfg["smp"]
        m, law, x0 = self.spec.model, self.spec.law, self.spec.x0
        s = self.seed_for("smp")
        if self.spec.law_family is not None:
            challengers = {f"gain={g:g}": self.spec.law_family(g) for g in c["challengers"]}
        else:
            challengers = {f"u={g:g}": ControlLaw.constant(g) for g in c["challengers"]}
        grid = TimeGrid.from_dt(0.0, self.adjoint.t_end, c["dt"])
        ens = simulate_forward(m, law, grid, c["n_paths"], x0, substream_seed(s, "candidate"),
                               record_every=10, keep_increments=False, keep_controls=False)
        mr = verify_hamiltonian_minimality(m, law, self.adjoint, ens, c["tol"] or None,
                                           seed=substream_seed(s, "minimality"))
        curves = verify_transversality(m, law, challengers, self.adjoint, c["horizons"], c["n_paths"],
                                       substream_seed(s, "transversality"), x0, c["dt"])
        rows = compare_costs(m, law, challengers, c["cost_horizon"], c["cost_paths"],
                             substream_seed(s, "costs"), dt=c["cost_dt"], x0=x0)
        conv = getattr(self, "convexity", None)
        if conv is None:
            ck = self.cfg["check"]
            conv = convexity_probe(m, ck["convexity_samples"], tuple(ck["box"]),
                                   self.seed_for("check"), tuple(ck["u_box"]))
        cert = issue_certificate(conv, mr, curves, rows)
        d = self.out / "smp"
        d.mkdir(parents=True, exist_ok=True)
        write_cost_table(rows, str(d / "costs.csv"))
        write_transversality(curves, str(d / "transversality.csv"))
        data = cert.to_dict()
        data["minimality"] = mr.__dict__
        _write(self.out / "smp.json", _dump(data))
        self.summary.append(("smp", f"gap={mr.sup_gap:.3g}", cert.verdict))


def run_scenario(config_path: str, stages=None, seed: Optional[int] = None,
                 out: Optional[str] = None, threads: Optional[int] = None) -> ReportBundle:
    """Run the configured stages and write the bundle.

    Exit status is carried on the bundle: ``0`` success, ``2`` assumption
    check failure, ``3`` solver non-convergence.  Configuration problems raise
    :class:`ConfigError`.
    """
    try:
        text = Path(config_path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
    cfg = parse_config(text)
    stage_list = resolve_stages(stages if stages is not None else cfg["run"]["stages"])
    seed = cfg["run"]["seed"] if seed is None else int(seed)
    root = Path(out or os.environ.get("ERGOLAB_OUT") or "ergolab-out")
    bundle_dir = root / f"{cfg['run']['scenario']}-seed{seed}"
    try:
        run = _Run(cfg, seed, bundle_dir)
    except UnknownScenario as exc:
        raise ConfigError(str(exc.args[0])) from exc
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"scenario parameters rejected: {exc}") from exc
    (bundle_dir / "logs").mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(bundle_dir / "logs" / "run.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    code = EXIT_OK
    methods = {"check": run.check, "simulate": run.simulate, "adjoint": run.adjoint_stage,
               "ergodicity": run.ergodicity, "ebsde": run.ebsde, "smp": run.smp}
    try:
        for st in stage_list:
            log.info("stage %s (seed %d)", st, run.seed_for(st))
            try:
                methods[st]()
            except StageFailure as exc:
                log.error("%s", exc)
                code = exc.code
                break
            except AssumptionViolation as exc:
                log.error("%s: %s", st, exc)
                run.summary.append((st, str(exc)[:60], "FAIL"))
                code = EXIT_ASSUMPTION
                break
            except (NonConvergenceError, NoContractionError, SimulationDivergence) as exc:
                log.error("%s: %s", st, exc)
                run.summary.append((st, type(exc).__name__, "FAIL"))
                code = EXIT_NONCONVERGENCE
                break
    finally:
        log.removeHandler(handler)
        handler.close()
    files = {}
    for p in sorted(bundle_dir.rglob("*")):
        rel = p.relative_to(bundle_dir).as_posix()
        if p.is_file() and not rel.startswith("logs/") and rel != "manifest.json":
            files[rel] = _sha256(p)
    manifest = {"config": text, "config_sha256": hashlib.sha256(text.encode()).hexdigest(),
                "scenario": cfg["run"]["scenario"], "seed": seed, "stages": stage_list,
                "threads": threads, "exit_code": code, "files": files,
                "versions": {"ergolab": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
                "stream_seeds": {st: run.seed_for(st) for st in stage_list}}
    _write(bundle_dir / "manifest.json", _dump(manifest))
    return ReportBundle(bundle_dir, stage_list, run.summary, code, files)


def replay(manifest_path: str, out: Optional[str] = None) -> tuple[ReportBundle, list]:
    """Re-run a bundle from its manifest; returns the new bundle and the list of
    files whose bytes differ from the recorded hashes."""
    try:
        manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read manifest {manifest_path}: {exc}") from exc
    origin = Path(manifest_path).resolve().parent
    target = Path(out) if out else origin.parent / (origin.name + "-replay")
    target.mkdir(parents=True, exist_ok=True)
    cfg_path = target / "replay-config.ini"
    cfg_path.write_text(manifest["config"], encoding="utf-8")
    bundle = run_scenario(str(cfg_path), manifest["stages"], manifest["seed"], str(target),
                          manifest.get("threads"))
    recorded = manifest["files"]
    mismatched = sorted(k for k in set(recorded) | set(bundle.files)
                        if recorded.get(k) != bundle.files.get(k))
    return bundle, mismatched
