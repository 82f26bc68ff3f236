"""Registered one-dimensional scenarios with closed-form oracles."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..model import ControlLaw, ControlledDiffusion, DeclaredConstants
from .oracles import (OracleError, bounded_cost_gradient_bound, lq_adjoint_slope,
                      lq_cost_for_gain, riccati_oracle)


class UnknownScenario(KeyError):
    pass


def scalar_model(b, s, L, b_x, s_x, L_x, b_u, s_u, L_u, **kw) -> ControlledDiffusion:
    """Build a 1-D model from functions of ``(t, x, u)`` acting on ``(m,)`` arrays."""

    def wrap(f, shape):
        def g(t, x, u):
            x1 = np.asarray(x)[:, 0]
            u1 = np.asarray(u)[:, 0]
            val = np.broadcast_to(np.asarray(f(t, x1, u1), dtype=float), x1.shape)
            return val.reshape((x1.shape[0],) + shape)
        return g

    return ControlledDiffusion(
        1, 1, wrap(b, (1,)), wrap(s, (1, 1)), wrap(L, ()),
        drift_x=wrap(b_x, (1, 1)), diffusion_x=wrap(s_x, (1, 1, 1)), cost_x=wrap(L_x, (1,)),
        drift_u=wrap(b_u, (1, 1)), diffusion_u=wrap(s_u, (1, 1, 1)), cost_u=wrap(L_u, (1,)),
        **kw)


def linear_feedback(K: float, bounds=None) -> ControlLaw:
    return ControlLaw.feedback(lambda t, x: -K * x, bounds=bounds, name=f"u=-{K:g}x")


@dataclass
class ScenarioSpec:
    name: str
    params: dict
    x0: float
    model: ControlledDiffusion
    law: ControlLaw
    oracle: dict = field(default_factory=dict)
    law_family: Optional[Callable[[float], ControlLaw]] = None

    @property
    def constants(self) -> DeclaredConstants:
        return self.model.constants


def _zero(t, x, u):
    return 0.0


def _ou(params):
    k, sig = params["k"], params["sigma"]
    model = scalar_model(
        b=lambda t, x, u: -k * x, s=lambda t, x, u: sig, L=lambda t, x, u: x * x,
        b_x=lambda t, x, u: -k, s_x=_zero, L_x=lambda t, x, u: 2 * x,
        b_u=_zero, s_u=_zero, L_u=_zero,
        constants=DeclaredConstants(k=k, sigma_lo=sig + 1 / sig, sigma_hi=sig + 1 / sig,
                                    grad_cost_bound=None, drift_at_zero_bound=0.0, omega=0.0,
                                    inv_sigma_bound=1 / sig),
        name="ou-quadratic")
    lam = sig ** 2 / (2 * k)
    return model, ControlLaw.constant(0.0, name="u=0"), {"stationary_variance": lam, "lambda": lam}, None


def _lq(params):
    a, q, r, sig = params["a"], params["q"], params["r"], params["sigma"]
    ric = riccati_oracle(a, q, r, sig)
    K = ric.K if params.get("K") is None else params["K"]
    model = scalar_model(
        b=lambda t, x, u: a * x + u, s=lambda t, x, u: sig, L=lambda t, x, u: q * x * x + r * u * u,
        b_x=lambda t, x, u: a, s_x=_zero, L_x=lambda t, x, u: 2 * q * x,
        b_u=lambda t, x, u: 1.0, s_u=_zero, L_u=lambda t, x, u: 2 * r * u,
        constants=DeclaredConstants(k=-a if a < 0 else None, sigma_lo=sig + 1 / sig,
                                    sigma_hi=sig + 1 / sig, grad_cost_bound=None,
                                    drift_at_zero_bound=0.0, omega=0.0, inv_sigma_bound=1 / sig),
        name="lq-1d")
    oracle = {
        "P": ric.P, "K_star": ric.K, "lambda_star": ric.lam, "gain": K,
        "lambda": lq_cost_for_gain(a, q, r, sig, K),
        "adjoint_slope": lq_adjoint_slope(a, q, K),
        "stationary_variance": sig ** 2 / (2 * (K - a)),
        "cost_of_gain": lambda g: lq_cost_for_gain(a, q, r, sig, g),
    }
    if abs(lq_cost_for_gain(a, q, r, sig, ric.K) - ric.lam) > 1e-12 * max(1.0, ric.lam):
        raise OracleError("LQ oracle: stationary cost at K* disagrees with sigma^2 P")
    if abs(lq_adjoint_slope(a, q, ric.K) - 2 * ric.P) > 1e-12 * max(1.0, ric.P):
        raise OracleError("LQ oracle: adjoint slope at K* disagrees with 2P")
    return model, linear_feedback(K), oracle, linear_feedback


def _bounded_cost(params):
    C = bounded_cost_gradient_bound()
    if abs(C - np.sqrt(2 / np.e)) > 1e-9:
        raise OracleError("bounded-cost oracle: numerical max disagrees with sqrt(2/e)")
    gain = params["gain"]
    model = scalar_model(
        b=lambda t, x, u: -x + np.tanh(u), s=lambda t, x, u: 1 + 0.1 * np.tanh(x),
        L=lambda t, x, u: 1 - np.exp(-x * x) + u * u,
        b_x=lambda t, x, u: -1.0, s_x=lambda t, x, u: 0.1 / np.cosh(x) ** 2,
        L_x=lambda t, x, u: 2 * x * np.exp(-x * x),
        b_u=lambda t, x, u: 1 / np.cosh(u) ** 2, s_u=_zero, L_u=lambda t, x, u: 2 * u,
        constants=DeclaredConstants(k=1.0, sigma_lo=0.9 + 1 / 1.1, sigma_hi=1.1 + 1 / 0.9,
                                    grad_cost_bound=C, drift_at_zero_bound=np.tanh(1.0),
                                    omega=0.1, inv_sigma_bound=1 / 0.9),
        name="bounded-cost-1d")
    law = ControlLaw.feedback(lambda t, x: -gain * np.tanh(x), bounds=(-1.0, 1.0),
                              name=f"u=-{gain:g}tanh(x)")
    return model, law, {"grad_cost_bound": C, "bound": C / 1.0}, None


def _periodic(params):
    k, sig, per, amp = params["k"], params["sigma"], params["period"], params["amplitude"]

    def w(t):
        return 1 + amp * np.sin(2 * np.pi * np.asarray(t) / per)

    model = scalar_model(
        b=lambda t, x, u: -k * x, s=lambda t, x, u: sig, L=lambda t, x, u: w(t) * x * x,
        b_x=lambda t, x, u: -k, s_x=_zero, L_x=lambda t, x, u: 2 * w(t) * x,
        b_u=_zero, s_u=_zero, L_u=_zero,
        constants=DeclaredConstants(k=k, sigma_lo=sig + 1 / sig, sigma_hi=sig + 1 / sig,
                                    grad_cost_bound=None, drift_at_zero_bound=0.0, omega=0.0,
                                    inv_sigma_bound=1 / sig),
        period=per, name="periodic-1d")
    lam = sig ** 2 / (2 * k)
    return model, ControlLaw.constant(0.0, name="u=0"), {"lambda": lam}, None


def _nondissipative(params):
    sig, gain = params["sigma"], params["gain"]
    model = scalar_model(
        b=lambda t, x, u: x + u, s=lambda t, x, u: sig, L=lambda t, x, u: x * x,
        b_x=lambda t, x, u: 1.0, s_x=_zero, L_x=lambda t, x, u: 2 * x,
        b_u=lambda t, x, u: 1.0, s_u=_zero, L_u=_zero,
        constants=DeclaredConstants(k=None, sigma_lo=sig + 1 / sig, sigma_hi=sig + 1 / sig,
                                    omega=0.0, inv_sigma_bound=1 / sig),
        name="nondissipative-1d")
    return model, linear_feedback(gain), {}, linear_feedback


REGISTRY = {
    "ou-quadratic": (_ou, {"k": 1.0, "sigma": 1.0, "x0": 1.0}),
    "lq-1d": (_lq, {"a": -1.0, "q": 1.0, "r": 1.0, "sigma": 1.0, "K": None, "x0": 1.0}),
    "bounded-cost-1d": (_bounded_cost, {"gain": 0.5, "x0": 1.0}),
    "periodic-1d": (_periodic, {"k": 1.0, "sigma": 1.0, "period": 1.0, "amplitude": 0.5, "x0": 1.0}),
    "nondissipative-1d": (_nondissipative, {"sigma": 1.0, "gain": 0.5, "x0": 1.0}),
}


def load_scenario(name: str, **overrides) -> ScenarioSpec:
    """Build a registered scenario; oracles are computed and cross-checked here."""
    if name not in REGISTRY:
        raise UnknownScenario(f"unknown scenario {name!r}; registered: {sorted(REGISTRY)}")
    builder, defaults = REGISTRY[name]
    unknown = set(overrides) - set(defaults)
    if unknown:
        raise ValueError(f"unknown parameters for {name}: {sorted(unknown)}")
    params = {**defaults, **overrides}
    model, law, oracle, family = builder(params)
    return ScenarioSpec(name, params, float(params["x0"]), model, law, oracle, family)
