"""Controlled diffusion models and sampling-based assumption checks.

All coefficient callables are batched: they receive ``t`` (float or ``(m,)``
array), ``x`` of shape ``(m, n)`` and ``u`` of shape ``(m, p)`` and return

* drift ``b``: ``(m, n)``
* diffusion ``sigma``: ``(m, n, n)``
* running cost ``L``: ``(m,)``

Optional analytic gradients follow the index convention
``b_x[m, i, j] = d b_i / d x_j``, ``sigma_x[m, i, j, k] = d sigma_ij / d x_k``,
``L_x[m, k] = d L / d x_k`` and the same with ``u`` in place of ``x``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from ._rng import generator

Array = np.ndarray


class ModelEvaluationError(ValueError):
    """A coefficient returned a non-finite value."""

    def __init__(self, message: str, point: dict | None = None):
        super().__init__(message)
        self.point = point or {}


class MissingGradientError(RuntimeError):
    pass


class AssumptionViolation(RuntimeError):
    """A structural assumption required by an operation does not hold."""


@dataclass
class DeclaredConstants:
    """Structural constants declared for a model (``None`` when unknown).

    ``k`` is the dissipativity rate, ``omega`` the Lipschitz constant of
    ``sigma`` in ``x``, ``inv_sigma_bound`` a bound on ``||sigma^{-1}||`` and
    ``grad_cost_bound`` a bound on ``||grad_x L||``.
    """

    k: Optional[float] = None
    sigma_lo: Optional[float] = None
    sigma_hi: Optional[float] = None
    grad_cost_bound: Optional[float] = None
    drift_at_zero_bound: Optional[float] = None
    omega: Optional[float] = None
    inv_sigma_bound: Optional[float] = None


@dataclass
class ControlledDiffusion:
    state_dim: int
    control_dim: int
    drift: Callable
    diffusion: Callable
    running_cost: Callable
    drift_x: Optional[Callable] = None
    diffusion_x: Optional[Callable] = None
    cost_x: Optional[Callable] = None
    drift_u: Optional[Callable] = None
    diffusion_u: Optional[Callable] = None
    cost_u: Optional[Callable] = None
    constants: DeclaredConstants = field(default_factory=DeclaredConstants)
    period: Optional[float] = None
    name: str = "model"
    fd_fallback: bool = False

    def __post_init__(self):
        if self.state_dim < 1 or self.control_dim < 1:
            raise ValueError("state_dim and control_dim must be positive")
        if self.period is not None and self.period <= 0:
            raise ValueError("period must be positive")

    # coefficient evaluation -------------------------------------------------
    def b(self, t, x, u) -> Array:
        return np.asarray(self.drift(t, x, u), dtype=float)

    def sigma(self, t, x, u) -> Array:
        s = np.asarray(self.diffusion(t, x, u), dtype=float)
        n = self.state_dim
        if s.shape[-2:] != (n, n):
            raise ValueError(f"diffusion must be square {n}x{n}, got shape {s.shape}")
        return s

    def L(self, t, x, u) -> Array:
        return np.asarray(self.running_cost(t, x, u), dtype=float)

    # gradients (analytic, or finite differences when permitted) -------------
    def _grad(self, which: str, t, x, u, allow_fd: bool | None) -> Array:
        fn = getattr(self, which)
        if fn is not None:
            return np.asarray(fn(t, x, u), dtype=float)
        if allow_fd is None:
            allow_fd = self.fd_fallback
        if not allow_fd:
            raise MissingGradientError(
                f"model '{self.name}' has no analytic {which}; pass analytic gradients "
                "or set fd_fallback=True to use centered finite differences")
        bundle = finite_difference_gradients(self, t, x, u)
        return getattr(bundle, which)

    def b_x(self, t, x, u, allow_fd=None):
        return self._grad("drift_x", t, x, u, allow_fd)

    def sigma_x(self, t, x, u, allow_fd=None):
        return self._grad("diffusion_x", t, x, u, allow_fd)

    def L_x(self, t, x, u, allow_fd=None):
        return self._grad("cost_x", t, x, u, allow_fd)

    def b_u(self, t, x, u, allow_fd=None):
        return self._grad("drift_u", t, x, u, allow_fd)

    def sigma_u(self, t, x, u, allow_fd=None):
        return self._grad("diffusion_u", t, x, u, allow_fd)

    def L_u(self, t, x, u, allow_fd=None):
        return self._grad("cost_u", t, x, u, allow_fd)

    def has_gradients(self) -> bool:
        return all(g is not None for g in (self.drift_x, self.diffusion_x, self.cost_x,
                                           self.drift_u, self.diffusion_u, self.cost_u))


@dataclass
class ControlLaw:
    """Feedback ``u(t, x)``, open-loop ``u(t)`` or constant control.

    ``bounds`` is an optional box ``(lo, hi)``; feedback values are clipped
    into it.
    """

    kind: str
    func: Optional[Callable] = None
    value: Optional[Array] = None
    bounds: Optional[tuple] = None
    name: str = "law"

    def __post_init__(self):
        if self.kind not in ("feedback", "open-loop", "constant"):
            raise ValueError(f"unknown control kind {self.kind!r}")
        if self.kind == "constant":
            self.value = np.atleast_1d(np.asarray(self.value, dtype=float))
        elif self.func is None:
            raise ValueError(f"{self.kind} law needs func")
        if self.bounds is not None:
            lo, hi = self.bounds
            self.bounds = (np.atleast_1d(np.asarray(lo, float)), np.atleast_1d(np.asarray(hi, float)))

    @classmethod
    def feedback(cls, func, bounds=None, name="feedback"):
        return cls("feedback", func=func, bounds=bounds, name=name)

    @classmethod
    def open_loop(cls, func, bounds=None, name="open-loop"):
        return cls("open-loop", func=func, bounds=bounds, name=name)

    @classmethod
    def constant(cls, value, bounds=None, name="constant"):
        return cls("constant", value=value, bounds=bounds, name=name)

    def __call__(self, t, x) -> Array:
        x = np.asarray(x, dtype=float)
        m = x.shape[0]
        if self.kind == "constant":
            u = np.broadcast_to(self.value, (m, self.value.size)).copy()
        elif self.kind == "feedback":
            u = np.asarray(self.func(t, x), dtype=float).reshape(m, -1)
        else:
            u = np.atleast_1d(np.asarray(self.func(t), dtype=float))
            u = np.broadcast_to(u, (m, u.shape[-1])).copy()
        if self.bounds is not None:
            u = np.clip(u, self.bounds[0], self.bounds[1])
        return u

    def jacobian(self, t, x) -> Array:
        """``du/dx`` of shape ``(m, p, n)`` by central differences; zero unless feedback."""
        x = np.asarray(x, dtype=float)
        m, n = x.shape
        u0 = self(t, x)
        jac = np.zeros((m, u0.shape[1], n))
        if self.kind != "feedback":
            return jac
        for j in range(n):
            h = 1e-6 * (1.0 + np.abs(x[:, j]))
            xp, xm = x.copy(), x.copy()
            xp[:, j] += h
            xm[:, j] -= h
            jac[:, :, j] = (self(t, xp) - self(t, xm)) / (2 * h[:, None])
        return jac


# ----------------------------------------------------------------------------
# finite differences

@dataclass
class GradientBundle:
    drift_x: Array
    diffusion_x: Array
    cost_x: Array
    drift_u: Array
    diffusion_u: Array
    cost_u: Array


def _batch(a, width) -> tuple[Array, bool]:
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1, 1)
        return a, True
    if a.ndim == 1:
        return a.reshape(1, width), True
    return a, False


def finite_difference_gradients(model: ControlledDiffusion, t, x, u, h=None) -> GradientBundle:
    """Centered-difference gradients of ``b``, ``sigma`` and ``L``.

    The default step is ``1e-5 * (1 + |x_k|)`` per coordinate; truncation
    error is O(h^2).  Accepts a single point (1-D ``x``, ``u``) or a batch.
    """
    x, single = _batch(x, model.state_dim)
    u, _ = _batch(u, model.control_dim)
    m = x.shape[0]
    if np.ndim(t) == 0:
        t = np.full(m, float(t))
    t = np.asarray(t, dtype=float)

    def diff(base, i, step_rule):
        h_i = step_rule(base[:, i])
        plus, minus = base.copy(), base.copy()
        plus[:, i] += h_i
        minus[:, i] -= h_i
        return plus, minus, h_i

    def rule(col):
        if h is not None:
            return np.full_like(col, float(h))
        return 1e-5 * (1.0 + np.abs(col))

    def grads(base, is_x):
        width = base.shape[1]
        gb, gs, gl = [], [], []
        for i in range(width):
            plus, minus, h_i = diff(base, i, rule)
            args_p = (t, plus, u) if is_x else (t, x, plus)
            args_m = (t, minus, u) if is_x else (t, x, minus)
            two_h = 2.0 * h_i
            gb.append((model.b(*args_p) - model.b(*args_m)) / two_h[:, None])
            gs.append((model.sigma(*args_p) - model.sigma(*args_m)) / two_h[:, None, None])
            gl.append((model.L(*args_p) - model.L(*args_m)) / two_h)
        out = (np.stack(gb, axis=-1), np.stack(gs, axis=-1), np.stack(gl, axis=-1))
        for arr in out:
            if not np.all(np.isfinite(arr)):
                raise ModelEvaluationError("non-finite finite-difference gradient",
                                           {"t": t.tolist(), "x": base.tolist()})
        return out

    bx, sx, lx = grads(x, True)
    bu, su, lu = grads(u, False)
    bundle = GradientBundle(bx, sx, lx, bu, su, lu)
    if single:
        bundle = GradientBundle(*(a[0] for a in (bx, sx, lx, bu, su, lu)))
    return bundle


# ----------------------------------------------------------------------------
# assumption checks

def _box(box, n) -> tuple[Array, Array]:
    lo, hi = box
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (n,)).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (n,)).copy()
    if np.any(hi <= lo):
        raise ValueError("box must satisfy lo < hi")
    return lo, hi


def _sample_common(model, rng, box, n_samples, u_box, t_range):
    n, p = model.state_dim, model.control_dim
    lo, hi = _box(box, n)
    ulo, uhi = _box(u_box if u_box is not None else (-1.0, 1.0), p)
    if t_range is None:
        t_range = (0.0, model.period if model.period else 1.0)
    t = rng.uniform(t_range[0], t_range[1], n_samples)
    x = rng.uniform(lo, hi, (n_samples, n))
    u = rng.uniform(ulo, uhi, (n_samples, p))
    return t, x, u, lo, hi


def _finite(name, values, t, x, u):
    values = np.asarray(values)
    flat = values.reshape(values.shape[0], -1)
    bad = ~np.all(np.isfinite(flat), axis=1)
    if bad.any():
        j = int(np.argmax(bad))
        raise ModelEvaluationError(
            f"non-finite {name} at sample {j}",
            {"t": float(np.atleast_1d(t)[j]), "x": x[j].tolist(), "u": u[j].tolist()})
    return values


def _unit_vectors(rng, m, n):
    d = rng.standard_normal((m, n))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


@dataclass
class DissipativityVerdict:
    holds: bool
    k_hat: float
    k_pairwise: float
    k_gradient: float
    rates_agree: bool
    pair_witness: dict
    gradient_witness: dict
    box: tuple
    n_samples: int
    seed: int


def check_dissipativity(model: ControlledDiffusion, box, n_samples: int = 4000, seed: int = 0,
                        u_box=None, t_range=None) -> DissipativityVerdict:
    """Estimate the strong-dissipativity rate two ways on a sampling box.

    The pairwise form uses ``<b(x)-b(y), x-y>/|x-y|^2`` over pairs
    ``y = x + r d`` with ``r`` log-uniform in ``[1e-3, diam]``; the gradient
    form uses the largest eigenvalue of the symmetric part of ``grad_x b``.
    The verdict holds iff both rates are strictly positive.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = generator(seed, 101)
    n = model.state_dim
    t, x, u, lo, hi = _sample_common(model, rng, box, n_samples, u_box, t_range)
    diam = float(np.linalg.norm(hi - lo))
    r = np.exp(rng.uniform(np.log(1e-3), np.log(max(diam, 2e-3)), n_samples))
    y = x + r[:, None] * _unit_vectors(rng, n_samples, n)

    bx = _finite("drift", model.b(t, x, u), t, x, u)
    by = _finite("drift", model.b(t, y, u), t, y, u)
    dxy = x - y
    q = np.einsum("mi,mi->m", bx - by, dxy) / np.einsum("mi,mi->m", dxy, dxy)
    jp = int(np.argmax(q))
    k_pair = -float(q[jp])

    jac = _finite("drift gradient", model.b_x(t, x, u, allow_fd=True), t, x, u)
    sym = 0.5 * (jac + np.swapaxes(jac, 1, 2))
    top = np.linalg.eigvalsh(sym)[:, -1]
    jg = int(np.argmax(top))
    k_grad = -float(top[jg])

    scale = max(abs(k_pair), abs(k_grad), 1e-12)
    return DissipativityVerdict(
        holds=bool(k_pair > 0 and k_grad > 0),
        k_hat=min(k_pair, k_grad),
        k_pairwise=k_pair,
        k_gradient=k_grad,
        rates_agree=bool(abs(k_pair - k_grad) <= 0.1 * scale),
        pair_witness={"t": float(t[jp]), "x": x[jp].tolist(), "y": y[jp].tolist(), "u": u[jp].tolist(),
                      "rate": -float(q[jp])},
        gradient_witness={"t": float(t[jg]), "x": x[jg].tolist(), "u": u[jg].tolist(),
                          "rate": -float(top[jg])},
        box=(lo.tolist(), hi.tolist()),
        n_samples=int(n_samples),
        seed=int(seed),
    )


@dataclass
class EllipticityReport:
    holds: bool
    sigma_lo_hat: float
    sigma_hi_hat: float
    norm_range: tuple
    inv_norm_range: tuple
    singular_witness: Optional[dict]


def check_ellipticity(model: ControlledDiffusion, box, n_samples: int = 2000, seed: int = 0,
                      u_box=None, t_range=None) -> EllipticityReport:
    """Sample ``||sigma|| + ||sigma^{-1}||`` (spectral norms).

    A sample with condition number above ``1e12`` is reported as singular and
    the check fails with that sample as witness.
    """
    rng = generator(seed, 102)
    t, x, u, _, _ = _sample_common(model, rng, box, n_samples, u_box, t_range)
    s = _finite("diffusion", model.sigma(t, x, u), t, x, u)
    sv = np.linalg.svd(s, compute_uv=False)
    smax, smin = sv[:, 0], sv[:, -1]
    with np.errstate(divide="ignore"):
        cond = np.where(smin > 0, smax / np.where(smin > 0, smin, 1.0), np.inf)
    singular = cond > 1e12
    witness = None
    if singular.any():
        j = int(np.argmax(singular))
        witness = {"t": float(t[j]), "x": x[j].tolist(), "u": u[j].tolist(),
                   "condition": float(cond[j]) if np.isfinite(cond[j]) else "inf"}
    ok = ~singular
    if ok.any():
        inv = 1.0 / smin[ok]
        total = smax[ok] + inv
        lo_hat, hi_hat = float(total.min()), float(total.max())
        inv_range = (float(inv.min()), float(inv.max()))
    else:
        lo_hat = hi_hat = float("inf")
        inv_range = (float("inf"), float("inf"))
    return EllipticityReport(
        holds=not singular.any(),
        sigma_lo_hat=lo_hat,
        sigma_hi_hat=hi_hat,
        norm_range=(float(smax.min()), float(smax.max())),
        inv_norm_range=inv_range,
        singular_witness=witness,
    )


@dataclass
class GrowthReport:
    radius: float
    horizon: float
    K_hat: float
    Kbar_hat: float
    omega_hat: float


def _spectral(a):
    if a.shape[-1] == 1 and a.shape[-2] == 1:
        return np.abs(a[..., 0, 0])
    return np.linalg.norm(a, ord=2, axis=(-2, -1))


def check_growth_lipschitz(model: ControlledDiffusion, radius: float, horizon: float,
                           n_samples: int = 20000, seed: int = 0, u_box=None) -> GrowthReport:
    """Sampled Lipschitz, linear-growth and sigma-Lipschitz constants on a ball."""
    rng = generator(seed, 103)
    n, p = model.state_dim, model.control_dim
    ulo, uhi = _box(u_box if u_box is not None else (-1.0, 1.0), p)
    t = rng.uniform(0.0, horizon, n_samples)
    u = rng.uniform(ulo, uhi, (n_samples, p))
    x = _unit_vectors(rng, n_samples, n) * (radius * rng.uniform(0, 1, n_samples) ** (1.0 / n))[:, None]
    r = np.exp(rng.uniform(np.log(1e-4), np.log(2.0 * radius), n_samples))
    y = x + r[:, None] * _unit_vectors(rng, n_samples, n)
    ny = np.linalg.norm(y, axis=1)
    y = np.where((ny > radius)[:, None], y * (radius / np.maximum(ny, 1e-300))[:, None], y)
    dist = np.linalg.norm(x - y, axis=1)
    keep = dist > 0
    t, u, x, y, dist = t[keep], u[keep], x[keep], y[keep], dist[keep]

    bx = _finite("drift", model.b(t, x, u), t, x, u)
    by = _finite("drift", model.b(t, y, u), t, y, u)
    sx = _finite("diffusion", model.sigma(t, x, u), t, x, u)
    sy = _finite("diffusion", model.sigma(t, y, u), t, y, u)
    db = np.linalg.norm(bx - by, axis=1)
    ds = _spectral(sx - sy)
    growth = (np.linalg.norm(bx, axis=1) + _spectral(sx)) / (1.0 + np.linalg.norm(x, axis=1))
    return GrowthReport(
        radius=float(radius),
        horizon=float(horizon),
        K_hat=float(np.max((db + ds) / dist)),
        Kbar_hat=float(np.max(growth)),
        omega_hat=float(np.max(ds / dist)),
    )


@dataclass
class AssumptionReport:
    dissipativity: DissipativityVerdict
    ellipticity: EllipticityReport
    lipschitz_growth: GrowthReport
    sigma_lipschitz: float
    cost_gradient_bound_hat: float
    seed: int
    n_samples: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), sort_keys=True, indent=2)


def check_assumptions(model: ControlledDiffusion, box, n_samples: int = 4000, seed: int = 0,
                      radius: float | None = None, horizon: float = 1.0, u_box=None) -> AssumptionReport:
    """Run every structural check and bundle the estimates."""
    diss = check_dissipativity(model, box, n_samples, seed, u_box=u_box)
    ell = check_ellipticity(model, box, n_samples, seed, u_box=u_box)
    lo, hi = _box(box, model.state_dim)
    if radius is None:
        radius = float(np.max(np.maximum(np.abs(lo), np.abs(hi))))
    growth = check_growth_lipschitz(model, radius, horizon, n_samples, seed, u_box=u_box)
    rng = generator(seed, 104)
    t, x, u, _, _ = _sample_common(model, rng, box, n_samples, u_box, None)
    lx = _finite("cost gradient", model.L_x(t, x, u, allow_fd=True), t, x, u)
    return AssumptionReport(
        dissipativity=diss,
        ellipticity=ell,
        lipschitz_growth=growth,
        sigma_lipschitz=growth.omega_hat,
        cost_gradient_bound_hat=float(np.max(np.linalg.norm(lx, axis=1))),
        seed=int(seed),
        n_samples=int(n_samples),
    )


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if np.isnan(v):
            return "nan"
        if np.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj
