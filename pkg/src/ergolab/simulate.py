"""Euler-Maruyama simulation, tangent processes and moment estimators."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from ._rng import GaussianStreams, generator, substream_seed
from .model import ControlLaw, ControlledDiffusion

log = logging.getLogger(__name__)

BLOWUP = 1e8


class SimulationDivergence(RuntimeError):
    def __init__(self, path: int, step: int, value: float):
        super().__init__(f"path {path} diverged at step {step} (|X| = {value:.3g})")
        self.path, self.step, self.value = path, step, value


@dataclass(frozen=True)
class TimeGrid:
    t_start: float
    t_end: float
    n_steps: int

    def __post_init__(self):
        if not self.t_end > self.t_start:
            raise ValueError("t_end must exceed t_start")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")

    @classmethod
    def from_dt(cls, t_start: float, t_end: float, dt: float) -> "TimeGrid":
        """Grid with step ``dt``; ``t_end`` is snapped to a whole number of steps."""
        n = max(1, int(round((t_end - t_start) / dt)))
        return cls(float(t_start), float(t_start) + n * float(dt), n)

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return self.t_start + np.arange(self.n_steps + 1) * self.dt

    def index(self, t: float) -> int:
        """Nearest grid index to ``t`` (clipped to the grid)."""
        i = int(round((t - self.t_start) / self.dt))
        return min(max(i, 0), self.n_steps)


@dataclass
class PathEnsemble:
    grid: TimeGrid
    n_paths: int
    states: np.ndarray
    controls: Optional[np.ndarray]
    brownian_increments: Optional[np.ndarray]
    seed: int
    initial_state: np.ndarray
    record_every: int = 1

    @property
    def record_indices(self) -> np.ndarray:
        idx = np.arange(0, self.grid.n_steps + 1, self.record_every)
        if idx[-1] != self.grid.n_steps:
            idx = np.append(idx, self.grid.n_steps)
        return idx

    @property
    def record_times(self) -> np.ndarray:
        return self.grid.times[self.record_indices]

    @property
    def dim(self) -> int:
        return self.states.shape[2]


def initial_states(x0, n_paths: int, dim: int, spread: float = 0.0, seed: int = 0) -> np.ndarray:
    """Initial states ``x0 + spread * N(0, I)``; ``spread = 0`` gives a point mass."""
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 2:
        return x0.copy()
    base = np.broadcast_to(np.atleast_1d(x0), (n_paths, dim)).copy()
    if spread > 0:
        base += spread * generator(substream_seed(seed, "initial"), 0).standard_normal((n_paths, dim))
    return base


def euler_steps(model: ControlledDiffusion, law: ControlLaw, grid: TimeGrid, n_paths: int,
                x0, seed: int) -> Iterator[tuple]:
    """Iterate the Euler-Maruyama chain.

    Yields ``(i, t_i, x_i, u_i, dw_i)`` for ``i = 0..n_steps``; at the last
    index ``dw_i`` is ``None``.  Raises :class:`SimulationDivergence` when a
    state leaves the ball of radius ``1e8`` or becomes non-finite.
    """
    n = model.state_dim
    x = initial_states(x0, n_paths, n)
    if x.shape != (n_paths, n):
        raise ValueError(f"x0 batch has shape {x.shape}, expected {(n_paths, n)}")
    streams = GaussianStreams(seed, n_paths, n)
    dt = grid.dt
    sqdt = np.sqrt(dt)
    times = grid.times
    for i in range(grid.n_steps):
        t = times[i]
        u = law(t, x)
        dw = sqdt * streams.step()
        yield i, t, x, u, dw
        x = x + model.b(t, x, u) * dt + np.einsum("mij,mj->mi", model.sigma(t, x, u), dw)
        size = np.max(np.abs(x), axis=1)
        bad = ~(size <= BLOWUP)
        if bad.any():
            j = int(np.argmax(bad))
            raise SimulationDivergence(j, i + 1, float(size[j]))
    t = times[-1]
    yield grid.n_steps, t, x, law(t, x), None


def simulate_forward(model: ControlledDiffusion, law: ControlLaw, grid: TimeGrid, n_paths: int,
                     x0, seed: int, record_every: int = 1, keep_increments: bool = True,
                     keep_controls: bool = True, kbar: float | None = None) -> PathEnsemble:
    """Simulate ``n_paths`` Euler-Maruyama paths of the controlled SDE.

    States (and controls) are stored every ``record_every`` steps; Brownian
    increments are stored for every step when ``keep_increments``.
    """
    if kbar is not None and grid.dt > 1.0 / (4.0 * kbar ** 2):
        log.warning("dt=%g exceeds 1/(4 Kbar^2)=%g; Euler scheme may be unstable",
                    grid.dt, 1.0 / (4.0 * kbar ** 2))
    n, p = model.state_dim, model.control_dim
    x0_arr = initial_states(x0, n_paths, n)
    rec = np.arange(0, grid.n_steps + 1, record_every)
    if rec[-1] != grid.n_steps:
        rec = np.append(rec, grid.n_steps)
    slot = {int(i): k for k, i in enumerate(rec)}
    states = np.empty((n_paths, len(rec), n))
    controls = np.empty((n_paths, len(rec), p)) if keep_controls else None
    incs = np.empty((n_paths, grid.n_steps, n)) if keep_increments else None
    for i, _, x, u, dw in euler_steps(model, law, grid, n_paths, x0_arr, seed):
        k = slot.get(i)
        if k is not None:
            states[:, k] = x
            if controls is not None:
                controls[:, k] = u
        if dw is not None and incs is not None:
            incs[:, i] = dw
    return PathEnsemble(grid, n_paths, states, controls, incs, int(seed),
                        np.asarray(x0, dtype=float), int(record_every))


def ensemble_controls(law: ControlLaw, ensemble: PathEnsemble, k: int) -> np.ndarray:
    """Controls at recorded slot ``k`` (recomputed when not stored)."""
    if ensemble.controls is not None:
        return ensemble.controls[:, k]
    return law(ensemble.record_times[k], ensemble.states[:, k])


def simulate_tangent(model: ControlledDiffusion, law: ControlLaw, ensemble: PathEnsemble,
                     direction) -> np.ndarray:
    """Velocity process ``V^h`` along the ensemble with the control frozen per path.

    ``V_{i+1} = V_i + grad_x b V_i dt + (grad_x sigma . V_i) dW_i`` with
    ``V_0 = h``, reusing the ensemble's increments.  Returns an array of
    shape ``(n_paths, n_steps + 1, n)``.
    """
    if ensemble.record_every != 1 or ensemble.brownian_increments is None:
        raise ValueError("tangent simulation needs a fully recorded ensemble with increments")
    h = np.broadcast_to(np.asarray(direction, dtype=float), (ensemble.n_paths, model.state_dim))
    dt = ensemble.grid.dt
    times = ensemble.grid.times
    out = np.empty_like(ensemble.states)
    v = h.copy()
    out[:, 0] = v
    for i in range(ensemble.grid.n_steps):
        t, x = times[i], ensemble.states[:, i]
        u = ensemble_controls(law, ensemble, i)
        jb = model.b_x(t, x, u)
        js = model.sigma_x(t, x, u)
        dw = ensemble.brownian_increments[:, i]
        v = v + np.einsum("mij,mj->mi", jb, v) * dt + np.einsum("mijk,mk,mj->mi", js, v, dw)
        out[:, i + 1] = v
    return out


@dataclass
class MomentFit:
    mu_hat: float
    c_hat: float
    r_squared: float
    amplitude: float
    inconclusive: bool
    bound_holds: bool
    times: np.ndarray
    second_moment: np.ndarray


def _exp_fit(t, m, c):
    """Fit ``m - c ~ A exp(-mu t)`` on the log scale, weighted toward large values."""
    resid = np.maximum(m - c, 1e-12)
    w = resid / resid.max()
    lw = np.log(resid)
    W = w ** 2
    A = np.vstack([np.ones_like(t), t]).T
    coef = np.linalg.lstsq(A * np.sqrt(W)[:, None], lw * np.sqrt(W), rcond=None)[0]
    amp, mu = float(np.exp(coef[0])), float(-coef[1])
    pred = c + amp * np.exp(-mu * t)
    return amp, mu, float(np.sum((m - pred) ** 2))


def estimate_moment_bound(ensemble: PathEnsemble) -> MomentFit:
    """Fit ``E|X_t|^2 ~ A exp(-mu t) + c`` with ``c`` chosen by grid search
    over ``[0, max(min m, 1.1 * tail mean))``.

    The fit is flagged inconclusive when ``r^2 < 0.5`` or ``mu <= 0``.  The
    bound ``E|X_t|^2 <= |x0|^2 exp(-mu t) + 1.05 c`` is checked on every
    recorded time.
    """
    t = ensemble.record_times - ensemble.record_times[0]
    m = np.mean(np.sum(ensemble.states ** 2, axis=2), axis=0)
    # the asymptote may sit above the noisy minimum, so scan up to the tail level
    tail = float(np.mean(m[-max(2, len(m) // 4):]))
    top = max(float(np.min(m)), 1.1 * tail)
    candidates = np.linspace(0.0, top, 201)[:-1] if top > 0 else np.array([0.0])
    best = None
    for c in candidates:
        amp, mu, sse = _exp_fit(t, m, c)
        if best is None or sse < best[3]:
            best = (c, amp, mu, sse)
    step = candidates[1] - candidates[0] if len(candidates) > 1 else 0.0
    if step > 0:
        for c in np.linspace(max(best[0] - step, 0.0), min(best[0] + step, top * (1 - 1e-9)), 101):
            amp, mu, sse = _exp_fit(t, m, c)
            if sse < best[3]:
                best = (c, amp, mu, sse)
    c, amp, mu, sse = best
    sst = float(np.sum((m - m.mean()) ** 2))
    r2 = 1.0 - sse / sst if sst > 0 else 1.0
    x0_sq = float(m[0])
    bound = x0_sq * np.exp(-mu * t) + c * 1.05 + 1e-12
    return MomentFit(
        mu_hat=mu,
        c_hat=float(c),
        r_squared=float(r2),
        amplitude=amp,
        inconclusive=bool(r2 < 0.5 or mu <= 0),
        bound_holds=bool(np.all(m <= bound)),
        times=t,
        second_moment=m,
    )


@dataclass
class LongRunAverage:
    lambda_hat: float
    se: float
    ci_low: float
    ci_high: float
    per_path: np.ndarray
    horizon: float
    burn_in: float

    @property
    def ci_half(self) -> float:
        return 0.5 * (self.ci_high - self.ci_low)


def long_run_average(model: ControlledDiffusion, law: ControlLaw, horizon: float, burn_in: float,
                     n_paths: int, seed: int, dt: float = 0.01, x0=0.0) -> LongRunAverage:
    """Time-averaged running cost over ``[burn_in, horizon]`` (trapezoidal rule).

    The 95% interval comes from the across-path spread of the per-path averages.
    """
    if not horizon > burn_in >= 0:
        raise ValueError("need horizon > burn_in >= 0")
    grid = TimeGrid.from_dt(0.0, horizon, dt)
    i0 = grid.index(burn_in)
    acc = np.zeros(n_paths)
    n = grid.n_steps
    for i, t, x, u, _ in euler_steps(model, law, grid, n_paths, x0, seed):
        if i < i0:
            continue
        w = 0.5 if i in (i0, n) else 1.0
        acc += w * np.broadcast_to(model.L(t, x, u), (n_paths,))
    span = (n - i0) * grid.dt
    per_path = acc * grid.dt / span
    mean = float(np.mean(per_path))
    se = float(np.std(per_path, ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else 0.0
    return LongRunAverage(mean, se, mean - 1.96 * se, mean + 1.96 * se, per_path,
                          grid.t_end, grid.times[i0])


# ----------------------------------------------------------------------------
# persistence

def model_fingerprint(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:16]


def save_ensemble(ensemble: PathEnsemble, directory: str, fingerprint: str = "") -> None:
    """Write one CSV per field plus ``manifest.json``."""
    os.makedirs(directory, exist_ok=True)
    n = ensemble.dim

    def dump(name, arr, label):
        with open(os.path.join(directory, name), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path", label] + [f"c{j}" for j in range(arr.shape[2])])
            for pth in range(arr.shape[0]):
                for k in range(arr.shape[1]):
                    w.writerow([pth, k] + [repr(float(v)) for v in arr[pth, k]])

    dump("states.csv", ensemble.states, "slot")
    if ensemble.controls is not None:
        dump("controls.csv", ensemble.controls, "slot")
    if ensemble.brownian_increments is not None:
        dump("brownian_increments.csv", ensemble.brownian_increments, "step")
    manifest = {
        "seed": ensemble.seed,
        "grid": {"t_start": ensemble.grid.t_start, "t_end": ensemble.grid.t_end,
                 "n_steps": ensemble.grid.n_steps},
        "n_paths": ensemble.n_paths,
        "state_dim": n,
        "record_every": ensemble.record_every,
        "initial_state": np.asarray(ensemble.initial_state).tolist(),
        "model_fingerprint": fingerprint,
    }
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)


def load_ensemble(directory: str) -> PathEnsemble:
    with open(os.path.join(directory, "manifest.json"), encoding="utf-8") as fh:
        man = json.load(fh)
    grid = TimeGrid(man["grid"]["t_start"], man["grid"]["t_end"], man["grid"]["n_steps"])

    def read(name, n_slots):
        path = os.path.join(directory, name)
        if not os.path.exists(path):
            return None
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return rows[:, 2:].reshape(man["n_paths"], n_slots, -1)

    rec = len(np.arange(0, grid.n_steps + 1, man["record_every"]))
    if (grid.n_steps % man["record_every"]) != 0:
        rec += 1
    return PathEnsemble(grid, man["n_paths"], read("states.csv", rec), read("controls.csv", rec),
                        read("brownian_increments.csv", grid.n_steps), man["seed"],
                        np.asarray(man["initial_state"]), man["record_every"])
