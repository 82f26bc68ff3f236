"""Polynomial least-squares regression used for conditional expectations."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement
from typing import Optional

import numpy as np

RIDGE_THRESHOLD = 1e8
CLIP_QUANTILE = 0.005


@dataclass(frozen=True)
class RegressionBasis:
    """Total-degree polynomials in ``x``, optionally tensored with ``(1, cos, sin)``
    of the phase ``2 pi t / period``."""

    degree: int = 3
    period: Optional[float] = None

    def monomials(self, dim: int) -> list[tuple[int, ...]]:
        out = [()]
        for d in range(1, self.degree + 1):
            out.extend(combinations_with_replacement(range(dim), d))
        return out

    def n_features(self, dim: int) -> int:
        return len(self.monomials(dim)) * (3 if self.period else 1)

    def features(self, z: np.ndarray, t=None) -> np.ndarray:
        cols = []
        for mono in self.monomials(z.shape[1]):
            c = np.ones(z.shape[0])
            for j in mono:
                c = c * z[:, j]
            cols.append(c)
        phi = np.stack(cols, axis=1)
        if self.period:
            if t is None:
                raise ValueError("periodic basis needs times")
            ph = 2 * np.pi * np.broadcast_to(np.asarray(t, dtype=float), (z.shape[0],)) / self.period
            phi = np.concatenate([phi, phi * np.cos(ph)[:, None], phi * np.sin(ph)[:, None]], axis=1)
        return phi


@dataclass
class SliceFit:
    basis: RegressionBasis
    coef: np.ndarray          # (n_features, q)
    center: np.ndarray
    scale: np.ndarray
    condition: float
    ridge: float
    resid_var: np.ndarray     # (q,)
    gram_inv: np.ndarray
    clip_lo: np.ndarray
    clip_hi: np.ndarray

    def design(self, x, t=None) -> np.ndarray:
        x = np.clip(np.asarray(x, dtype=float), self.clip_lo, self.clip_hi)
        return self.basis.features((x - self.center) / self.scale, t)

    def predict(self, x, t=None) -> np.ndarray:
        return self.design(x, t) @ self.coef

    def predict_se(self, x, t=None) -> np.ndarray:
        phi = self.design(x, t)
        lev = np.einsum("mi,ij,mj->m", phi, self.gram_inv, phi)
        return np.sqrt(np.maximum(lev, 0.0)[:, None] * self.resid_var[None, :])

    def to_dict(self) -> dict:
        return {"coef": self.coef.tolist(), "center": self.center.tolist(),
                "scale": self.scale.tolist(), "condition": self.condition, "ridge": self.ridge,
                "resid_var": self.resid_var.tolist(), "gram_inv": self.gram_inv.tolist(),
                "clip_lo": self.clip_lo.tolist(), "clip_hi": self.clip_hi.tolist()}

    @classmethod
    def from_dict(cls, basis: RegressionBasis, d: dict) -> "SliceFit":
        return cls(basis, np.asarray(d["coef"]), np.asarray(d["center"]), np.asarray(d["scale"]),
                   float(d["condition"]), float(d["ridge"]), np.asarray(d["resid_var"]),
                   np.asarray(d["gram_inv"]), np.asarray(d["clip_lo"]), np.asarray(d["clip_hi"]))


class Projector:
    """Least-squares projection onto the basis for one fixed design.

    States are clipped to their central ``[0.5%, 99.5%]`` quantile range, so
    predictions stay bounded outside the well-sampled region, and then
    standardized.  A ridge term is added when the design condition number
    exceeds ``1e8``.
    """

    def __init__(self, basis: RegressionBasis, x: np.ndarray, t=None, clip: float = CLIP_QUANTILE):
        x = np.asarray(x, dtype=float)
        self.basis = basis
        if clip > 0 and x.shape[0] > 1:
            self.clip_lo, self.clip_hi = np.quantile(x, [clip, 1 - clip], axis=0)
        else:
            self.clip_lo = np.full(x.shape[1], -np.inf)
            self.clip_hi = np.full(x.shape[1], np.inf)
        x = np.clip(x, self.clip_lo, self.clip_hi)
        self.t = t
        self.center = x.mean(axis=0)
        sd = x.std(axis=0)
        self.scale = np.where(sd > 1e-8, sd, 1.0)
        self.phi = basis.features((x - self.center) / self.scale, t)
        gram = self.phi.T @ self.phi
        ev = np.linalg.eigvalsh(gram)
        top = max(ev[-1], 1e-300)
        self.condition = float(np.sqrt(top / ev[0])) if ev[0] > 0 else float("inf")
        self.ridge = 0.0
        if not self.condition <= RIDGE_THRESHOLD:
            self.ridge = top * 1e-12 + 1e-12
        self.gram_inv = np.linalg.inv(gram + self.ridge * np.eye(gram.shape[0]))

    def coefficients(self, targets: np.ndarray) -> np.ndarray:
        return self.gram_inv @ (self.phi.T @ targets)

    def fit(self, targets: np.ndarray) -> tuple[SliceFit, np.ndarray]:
        """Return the fitted slice and the fitted values at the design points."""
        targets = np.asarray(targets, dtype=float).reshape(self.phi.shape[0], -1)
        coef = self.coefficients(targets)
        fitted = self.phi @ coef
        dof = max(self.phi.shape[0] - self.phi.shape[1], 1)
        resid_var = np.sum((targets - fitted) ** 2, axis=0) / dof
        return SliceFit(self.basis, coef, self.center, self.scale, self.condition, self.ridge,
                        resid_var, self.gram_inv, self.clip_lo, self.clip_hi), fitted
