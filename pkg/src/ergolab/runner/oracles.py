"""Closed-form reference values used to cross-validate the solvers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.stats import norm


class OracleError(ValueError):
    pass


@dataclass(frozen=True)
class RiccatiSolution:
    P: float
    K: float
    lam: float
    residual: float


def riccati_oracle(a: float, q: float, r: float, sigma: float) -> RiccatiSolution:
    """Scalar ergodic LQ problem ``dX = (aX + u)dt + sigma dW``, cost ``qX^2 + ru^2``.

    ``P`` is the positive root of ``P^2/r - 2aP - q = 0``; the optimal gain is
    ``K = P/r`` and the ergodic cost ``lambda = sigma^2 P``.
    """
    if r <= 0 or q < 0:
        raise OracleError("need r > 0 and q >= 0")
    if not (a < 0 or q > 0):
        raise OracleError("no stabilising positive root: need a < 0 or q > 0")
    P = r * (a + np.sqrt(a * a + q / r))
    residual = abs(P * P / r - 2 * a * P - q)
    if P < 0 or residual > 1e-12 * max(1.0, q, P * P / r):
        raise OracleError(f"Riccati root failed back-substitution (P={P}, residual={residual})")
    return RiccatiSolution(float(P), float(P / r), float(sigma ** 2 * P), float(residual))


def lq_cost_for_gain(a: float, q: float, r: float, sigma: float, K: float) -> float:
    """Ergodic cost of the feedback ``u = -K x``: ``(q + rK^2) sigma^2 / (2 (K - a))``."""
    if K <= a:
        raise OracleError("gain does not stabilise the closed loop")
    return (q + r * K * K) * sigma ** 2 / (2.0 * (K - a))


def lq_adjoint_slope(a: float, q: float, K: float) -> float:
    """Slope ``c`` of the infinite-horizon adjoint ``Y = cX`` under ``u = -Kx``.

    Matching drifts of ``d(cX)`` against ``-(a Y + 2qX) dt`` gives
    ``c (2a - K) = -2q``.
    """
    return 2.0 * q / (K - 2.0 * a)


@dataclass(frozen=True)
class OUOracle:
    k: float
    sigma: float
    x0: float
    t: float
    mean: float
    variance: float
    stationary_variance: float

    def tv(self, x: float, y: float, t: float | None = None) -> float:
        return ou_tv(self.k, self.sigma, x, y, self.t if t is None else t)


def ou_oracle(k: float, sigma: float, x0: float, t: float) -> OUOracle:
    if k <= 0:
        raise OracleError("OU oracle needs k > 0")
    var = sigma ** 2 * (1 - np.exp(-2 * k * t)) / (2 * k)
    return OUOracle(k, sigma, x0, t, float(x0 * np.exp(-k * t)), float(var),
                    float(sigma ** 2 / (2 * k)))


def ou_tv(k: float, sigma: float, x: float, y: float, t: float) -> float:
    """Total variation between the time-``t`` OU laws started at ``x`` and ``y``."""
    if x == y:
        return 0.0
    if t <= 0:
        return 1.0
    sd = np.sqrt(sigma ** 2 * (1 - np.exp(-2 * k * t)) / (2 * k))
    return float(2 * norm.cdf(abs(x - y) * np.exp(-k * t) / (2 * sd)) - 1)


def ou_second_moment(k: float, sigma: float, x0: float, t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return x0 ** 2 * np.exp(-2 * k * t) + sigma ** 2 * (1 - np.exp(-2 * k * t)) / (2 * k)


def bounded_cost_gradient_bound() -> float:
    """``sup_x |2x exp(-x^2)|`` by numerical maximisation; equals ``sqrt(2/e)``."""
    res = minimize_scalar(lambda x: -2 * x * np.exp(-x * x), bounds=(0.0, 3.0), method="bounded",
                          options={"xatol": 1e-12})
    return float(-res.fun)
