"""Design parameters and the quantities derived from them alone.

All contrasts are referenced to the randomized control arm: ``y1`` is
treatment minus control and ``y2`` is external (RWD) minus control.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .numerics import normal_cdf, normal_quantile


class DesignError(ValueError):
    """A design or summary input violates its invariants."""


@dataclass(frozen=True)
class DesignParams:
    n_t: int = 100
    n_c: int = 100
    n_r: int = 200
    var_t: float = 1.0
    var_c: float = 1.0
    var_r: float = 1.0
    alpha: float = 0.05
    alpha_eq: float = 0.05
    delta_eq: float = 0.25

    def __post_init__(self):
        for name in ("n_t", "n_c", "n_r"):
            if getattr(self, name) < 2:
                raise DesignError(f"{name} must be >= 2")
        for name in ("var_t", "var_c", "var_r"):
            if not getattr(self, name) > 0:
                raise DesignError(f"{name} must be > 0")
        if not 0 < self.alpha < 1:
            raise DesignError("alpha must lie in (0, 1)")
        if not 0 < self.alpha_eq < 0.5:
            raise DesignError("alpha_eq must lie in (0, 0.5)")
        if not self.delta_eq > 0:
            raise DesignError("delta_eq must be > 0")

    def replace(self, **changes) -> "DesignParams":
        return DesignParams(**{**asdict(self), **changes})

    @property
    def z_crit(self) -> float:
        """Two-sided critical value z_{1-alpha/2} of the primary test."""
        return normal_quantile(1.0 - self.alpha / 2.0)

    @property
    def z_eq(self) -> float:
        return normal_quantile(1.0 - self.alpha_eq)


@dataclass(frozen=True)
class SummaryStats:
    """Per-dataset sufficient statistics. Fields may be scalars or equal-shape arrays."""

    y1: float
    y2: float
    se_y1: float
    se_y2: float
    rho: float

    def __post_init__(self):
        if np.any(~(np.asarray(self.se_y1) > 0)) or np.any(~(np.asarray(self.se_y2) > 0)):
            raise DesignError("standard errors must be > 0")
        if np.any(~(np.abs(np.asarray(self.rho)) < 1)):
            raise DesignError("|rho| must be < 1")

    def __len__(self):
        return int(np.size(self.y1))

    def row(self, i) -> "SummaryStats":
        return SummaryStats(*(float(np.asarray(v).ravel()[i]) for v in
                              (self.y1, self.y2, self.se_y1, self.se_y2, self.rho)))


@dataclass(frozen=True)
class DerivedDesign:
    se_y1: float
    se_y2: float
    w_star: float
    rho: float
    se_y3: float
    theta: float
    beta_eq: float
    alpha_eq: float
    delta_eq: float

    @property
    def no_borrow(self) -> bool:
        """True when the TOST acceptance region is empty (theta <= 0)."""
        return bool(np.all(np.asarray(self.theta) <= 0))

    @property
    def theta_std(self):
        """Standardized half-width theta / se_y2."""
        return self.theta / self.se_y2

    @property
    def borrow_prob(self):
        return 1.0 - self.beta_eq


def tost_threshold(se_y2, delta_eq, alpha_eq):
    """theta = delta_eq - z_{1-alpha_eq} * se_y2 (may be negative)."""
    return delta_eq - normal_quantile(1.0 - alpha_eq) * se_y2


def _derived(se_y1, se_y2, rho, delta_eq, alpha_eq) -> DerivedDesign:
    w_star = rho * se_y1 / se_y2
    se_y3 = se_y1 * np.sqrt(1.0 - rho * rho)
    theta = tost_threshold(se_y2, delta_eq, alpha_eq)
    t = np.maximum(theta, 0.0) / se_y2
    borrow = normal_cdf(t) - normal_cdf(-t)
    return DerivedDesign(se_y1=se_y1, se_y2=se_y2, w_star=w_star, rho=rho, se_y3=se_y3,
                         theta=theta, beta_eq=1.0 - borrow, alpha_eq=alpha_eq,
                         delta_eq=delta_eq)


def derive(params: DesignParams) -> DerivedDesign:
    """Design-time quantities from known variances and sample sizes."""
    v_t = params.var_t / params.n_t
    v_c = params.var_c / params.n_c
    v_r = params.var_r / params.n_r
    se_y1 = math.sqrt(v_t + v_c)
    se_y2 = math.sqrt(v_r + v_c)
    rho = v_c / (se_y1 * se_y2)
    d = _derived(se_y1, se_y2, rho, params.delta_eq, params.alpha_eq)
    return DerivedDesign(**{k: float(v) for k, v in asdict(d).items()})


def derive_from_stats(stats: SummaryStats, params: DesignParams) -> DerivedDesign:
    """Same formulas as :func:`derive` with observed SEs and correlation plugged in."""
    return _derived(np.asarray(stats.se_y1, float), np.asarray(stats.se_y2, float),
                    np.asarray(stats.rho, float), params.delta_eq, params.alpha_eq)


def tost_borrow_decision(stats: SummaryStats, params: DesignParams):
    """Borrow iff the TOST declares equivalence: |y2| < theta_hat and theta_hat > 0."""
    theta = tost_threshold(np.asarray(stats.se_y2, float), params.delta_eq, params.alpha_eq)
    out = (np.abs(stats.y2) < theta) & (theta > 0)
    return bool(out) if np.ndim(out) == 0 else out


def borrowing_probability(design: DerivedDesign, delta=0.0):
    """P(|Y2| < theta) when Y2 ~ N(delta, se_y2^2); zero when theta <= 0."""
    theta = np.asarray(design.theta, float)
    s = design.se_y2
    p = normal_cdf((theta - delta) / s) - normal_cdf((-theta - delta) / s)
    p = np.where(theta > 0, p, 0.0)
    return float(p) if p.ndim == 0 else p
