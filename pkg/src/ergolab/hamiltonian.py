"""Hamiltonian ``H = b'y + Tr(sigma' z) + L``, its gradients and minimization in ``u``.

Inputs are batched like the model coefficients: ``x (m, n)``, ``u (m, p)``,
``y (m, n)``, ``z (m, n, n)``.  Single points (1-D ``x``) are accepted and
return unbatched results.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._rng import generator
from .model import ControlledDiffusion, _box


def _prep(model, t, x, u, y, z):
    n, p = model.state_dim, model.control_dim
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = x.reshape(-1, n)
    m = x.shape[0]
    u = np.asarray(u, dtype=float).reshape(m, p)
    y = np.asarray(y, dtype=float).reshape(m, n)
    z = np.asarray(z, dtype=float).reshape(m, n, n)
    if np.ndim(t) == 0:
        t = float(t)
    else:
        t = np.asarray(t, dtype=float).reshape(m)
    return t, x, u, y, z, single


def _out(a, single):
    return a[0] if single else a


def eval_H(model: ControlledDiffusion, t, x, u, y, z):
    t, x, u, y, z, single = _prep(model, t, x, u, y, z)
    h = (np.einsum("mi,mi->m", model.b(t, x, u), y)
         + np.einsum("mij,mij->m", model.sigma(t, x, u), z)
         + np.broadcast_to(model.L(t, x, u), (x.shape[0],)))
    return _out(h, single)


def _fd_H(model, t, x, u, y, z, wrt):
    base = x if wrt == "x" else u
    cols = []
    for k in range(base.shape[1]):
        h = 1e-5 * (1.0 + np.abs(base[:, k]))
        plus, minus = base.copy(), base.copy()
        plus[:, k] += h
        minus[:, k] -= h
        if wrt == "x":
            d = eval_H(model, t, plus, u, y, z) - eval_H(model, t, minus, u, y, z)
        else:
            d = eval_H(model, t, x, plus, y, z) - eval_H(model, t, x, minus, y, z)
        cols.append(d / (2 * h))
    return np.stack(cols, axis=1)


def _use_fd(model, names, allow_fd):
    missing = any(getattr(model, nm) is None for nm in names)
    if not missing:
        return False
    if allow_fd is None:
        allow_fd = model.fd_fallback
    if not allow_fd:
        from .model import MissingGradientError
        raise MissingGradientError(
            f"model '{model.name}' lacks analytic gradients {names}; set fd_fallback=True")
    return True


def grad_H_x(model: ControlledDiffusion, t, x, u, y, z, allow_fd: Optional[bool] = None):
    """``(grad_x b)' y + sum_ij d_x sigma_ij z_ij + grad_x L``."""
    t, x, u, y, z, single = _prep(model, t, x, u, y, z)
    if _use_fd(model, ("drift_x", "diffusion_x", "cost_x"), allow_fd):
        return _out(_fd_H(model, t, x, u, y, z, "x"), single)
    g = (np.einsum("mij,mi->mj", model.b_x(t, x, u), y)
         + np.einsum("mijk,mij->mk", model.sigma_x(t, x, u), z)
         + model.L_x(t, x, u))
    return _out(g, single)


def grad_H_u(model: ControlledDiffusion, t, x, u, y, z, allow_fd: Optional[bool] = None):
    t, x, u, y, z, single = _prep(model, t, x, u, y, z)
    if _use_fd(model, ("drift_u", "diffusion_u", "cost_u"), allow_fd):
        return _out(_fd_H(model, t, x, u, y, z, "u"), single)
    g = (np.einsum("mij,mi->mj", model.b_u(t, x, u), y)
         + np.einsum("mijk,mij->mk", model.sigma_u(t, x, u), z)
         + model.L_u(t, x, u))
    return _out(g, single)


@dataclass
class HamiltonianMinimum:
    u: np.ndarray
    value: np.ndarray
    grad_norm: np.ndarray
    converged: np.ndarray
    on_boundary: np.ndarray

    @property
    def all_converged(self) -> bool:
        return bool(np.all(self.converged))


def _project(u, bounds):
    if bounds is None:
        return u
    return np.clip(u, bounds[0], bounds[1])


def _projected_gradient(model, t, x, y, z, u, bounds, tol, max_iter, allow_fd):
    m = u.shape[0]
    step = np.ones(m)
    h = eval_H(model, t, x, u, y, z)
    for _ in range(max_iter):
        g = grad_H_u(model, t, x, u, y, z, allow_fd)
        pg = u - _project(u - g, bounds)
        pgn = np.linalg.norm(pg, axis=1)
        active = pgn > tol * (1.0 + np.abs(h))
        if not active.any():
            break
        step = np.where(active, np.minimum(step * 2.0, 1e6), step)
        trial_step = step.copy()
        accepted = ~active
        for _ in range(60):
            cand = _project(u - trial_step[:, None] * g, bounds)
            hc = eval_H(model, t, x, cand, y, z)
            ok = hc <= h - 1e-4 * np.einsum("mi,mi->m", g, u - cand) + 1e-15 * np.abs(h)
            newly = ok & ~accepted
            u = np.where(newly[:, None], cand, u)
            h = np.where(newly, hc, h)
            step = np.where(newly, trial_step, step)
            accepted |= ok
            if accepted.all():
                break
            trial_step = np.where(accepted, trial_step, trial_step * 0.5)
    g = grad_H_u(model, t, x, u, y, z, allow_fd)
    pgn = np.linalg.norm(u - _project(u - g, bounds), axis=1)
    return u, h, pgn


def minimize_H_u(model: ControlledDiffusion, t, x, y, z, u_init=None, bounds=None,
                 tol: float = 1e-6, max_iter: int = 500, allow_fd: Optional[bool] = None
                 ) -> HamiltonianMinimum:
    """Minimize ``H`` over the control for each sample.

    With a bounded box and control dimension at most 2, a three-level grid
    search (33 points per axis) seeds the search; the result is then polished
    by projected gradient descent with Armijo backtracking.  Samples whose
    projected gradient stays above ``tol * (1 + |H|)`` are flagged
    ``converged = False``.
    """
    n, p = model.state_dim, model.control_dim
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = x.reshape(-1, n)
    m = x.shape[0]
    y = np.asarray(y, dtype=float).reshape(m, n)
    z = np.asarray(z, dtype=float).reshape(m, n, n)
    if np.ndim(t) != 0:
        t = np.asarray(t, dtype=float).reshape(m)
    if bounds is not None:
        bounds = _box(bounds, p)
    u = np.zeros((m, p)) if u_init is None else np.array(u_init, dtype=float).reshape(m, p)
    u = _project(u, bounds)

    if bounds is not None and p <= 2:
        lo = np.broadcast_to(bounds[0], (m, p)).copy()
        hi = np.broadcast_to(bounds[1], (m, p)).copy()
        g = 33
        for _level in range(3):
            axes = [np.linspace(lo[:, j], hi[:, j], g, axis=1) for j in range(p)]
            if p == 1:
                cand = axes[0][:, :, None]
            else:
                a0 = np.repeat(axes[0], g, axis=1)
                a1 = np.tile(axes[1], (1, g))
                cand = np.stack([a0, a1], axis=2)
            k = cand.shape[1]
            tt = t if np.ndim(t) == 0 else np.repeat(t, k)
            vals = eval_H(model, tt, np.repeat(x, k, axis=0), cand.reshape(m * k, p),
                          np.repeat(y, k, axis=0), np.repeat(z, k, axis=0)).reshape(m, k)
            best = cand[np.arange(m), np.argmin(vals, axis=1)]
            u_best_val = vals.min(axis=1)
            cur = eval_H(model, t, x, u, y, z)
            u = np.where((u_best_val < cur)[:, None], best, u)
            width = (hi - lo) / (g - 1) * 2.0
            lo = np.maximum(u - width, bounds[0])
            hi = np.minimum(u + width, bounds[1])

    u, h, pgn = _projected_gradient(model, t, x, y, z, u, bounds, tol, max_iter, allow_fd)
    converged = pgn <= tol * (1.0 + np.abs(h))
    if bounds is not None:
        on_b = np.any(np.isclose(u, bounds[0]) | np.isclose(u, bounds[1]), axis=1)
    else:
        on_b = np.zeros(m, dtype=bool)
    res = HamiltonianMinimum(u, h, pgn, converged, on_b)
    if single:
        res = HamiltonianMinimum(u[0], h[0], pgn[0], converged[0], on_b[0])
    return res


@dataclass
class ConvexityReport:
    passed: bool
    n_samples: int
    max_violation: float
    witness: Optional[dict]


def convexity_probe(model: ControlledDiffusion, n_samples: int, box, seed: int = 0,
                    u_box=(-1.0, 1.0), tol: float = 1e-9, t_range=None) -> ConvexityReport:
    """Sample the midpoint-type convexity inequality of ``H`` in ``(x, u)``.

    Each sample draws a random ``(t, y, z)`` and two points ``p, q`` in the
    ``(x, u)`` box plus ``theta`` in ``[0, 1]``.
    """
    rng = generator(seed, 201)
    n, p = model.state_dim, model.control_dim
    lo, hi = _box(box, n)
    ulo, uhi = _box(u_box, p)
    if t_range is None:
        t_range = (0.0, model.period if model.period else 1.0)
    t = rng.uniform(*t_range, n_samples)
    y = rng.standard_normal((n_samples, n))
    z = rng.standard_normal((n_samples, n, n))
    xp, xq = rng.uniform(lo, hi, (2, n_samples, n))
    up, uq = rng.uniform(ulo, uhi, (2, n_samples, p))
    th = rng.uniform(0, 1, n_samples)
    xm = th[:, None] * xp + (1 - th[:, None]) * xq
    um = th[:, None] * up + (1 - th[:, None]) * uq
    lhs = eval_H(model, t, xm, um, y, z)
    rhs = th * eval_H(model, t, xp, up, y, z) + (1 - th) * eval_H(model, t, xq, uq, y, z)
    viol = lhs - rhs
    j = int(np.argmax(viol))
    passed = bool(viol[j] <= tol)
    witness = None
    if not passed:
        witness = {"t": float(t[j]), "x_p": xp[j].tolist(), "x_q": xq[j].tolist(),
                   "u_p": up[j].tolist(), "u_q": uq[j].tolist(), "theta": float(th[j]),
                   "violation": float(viol[j])}
    return ConvexityReport(passed, int(n_samples), float(viol[j]), witness)
