"""Frequentist test-then-pool procedures and their analytic calibrations.

Six decision rules share one data model (see :mod:`hybridtrial.design`):

* ``NoBorrow``: plain Z-test on y1.
* ``Yuan``: two-step test, pools via ``y3 = y1 - w* y2`` when TOST declares
  equivalence, with unadjusted critical values.
* ``A1``: pools as Yuan but standardizes by the SD of the mixture statistic.
* ``A2``: one common critical value calibrated to exact size.
* ``A3``: separate critical values per TOST branch from a pre-specified split.
* ``A4``: critical value raised only on the borrowing branch.

Critical values are written in standardized form, i.e. as functions of the
correlation ``rho`` and ``t = theta / se_y2``. The ``*_std`` helpers accept
arrays and use the vectorized bivariate normal; the design-level functions
use the adaptive reference path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .design import (DerivedDesign, DesignParams, SummaryStats, derive_from_stats,
                     tost_borrow_decision)
from .numerics import (NumericsError, bisect_vec, bvn_cdf, bvn_cdf_vec, find_root,
                       normal_cdf, normal_quantile, normal_sf, owen_integral,
                       owen_integral_vec, truncated_moments)


class Method(str, Enum):
    NO_BORROW = "NoBorrow"
    YUAN = "Yuan"
    A1 = "A1"
    A2 = "A2"
    A3 = "A3"
    A4 = "A4"
    POWER_PRIOR = "PowerPrior"


class InfeasibleSplit(ValueError):
    """The requested split asks for a conditional tail probability >= 1."""


@dataclass(frozen=True)
class SplitSpec:
    v: float = 0.5

    def __post_init__(self):
        if not 0 < self.v < 1:
            raise ValueError("split proportion v must lie in (0, 1)")


@dataclass
class TestOutcome:
    __test__ = False  # not a pytest class

    method: str
    reject: bool
    statistic: float
    critical_value: float
    borrowed: bool
    estimate: float
    extras: dict = field(default_factory=dict)


# --- standardized calibration kernels -------------------------------------


def _borrow_mass(t):
    t = np.maximum(t, 0.0)
    return normal_cdf(t) - normal_cdf(-t)


def yuan_inflation_std(rho, t, alpha, exact=False):
    """One-sided size inflation of the Yuan test, ``I(-) - I(+)``.

    ``I(+/-)`` are Owen integrals with ``h = -z_{1-alpha/2}`` and ``k = +/-t``;
    the two-sided type I error is ``alpha + 2 * (I(-) - I(+))``.
    """
    c = normal_quantile(1.0 - alpha / 2.0)
    if exact:
        rho, t = float(rho), float(t)
        if t <= 0:
            return 0.0
        return owen_integral(-c, -t, rho) - owen_integral(-c, t, rho)
    rho, t = np.broadcast_arrays(np.asarray(rho, float), np.asarray(t, float))
    tp = np.maximum(t, 0.0)
    val = owen_integral_vec(-c, -tp, rho) - owen_integral_vec(-c, tp, rho)
    return np.where(t > 0, val, 0.0)


def yuan_type1_error_std(rho, t, alpha, exact=False):
    return alpha + 2.0 * yuan_inflation_std(rho, t, alpha, exact=exact)


def _upper_rect(z, t, rho, bvn):
    """P(Z1 > z, |Z2| < t) for corr(Z1, Z2) = rho."""
    return (normal_cdf(t) - bvn(z, t, rho)) - (normal_cdf(-t) - bvn(z, -t, rho))


def _a2_residual(z, rho, t, alpha, bvn):
    pb = _borrow_mass(t)
    no_borrow_tail = normal_sf(z) - _upper_rect(z, t, rho, bvn)
    return no_borrow_tail + normal_sf(z) * pb - alpha / 2.0


def approach2_critical_std(rho, t, alpha, tol=1e-10):
    rho, t = np.broadcast_arrays(np.asarray(rho, float), np.asarray(t, float))
    c = normal_quantile(1.0 - alpha / 2.0)
    tp = np.maximum(t, 1e-300)
    z = bisect_vec(lambda z: _a2_residual(z, rho, tp, alpha, bvn_cdf_vec), c - 1.0, c + 6.0,
                   tol=tol)
    return np.where(t > 0, z, c)


def approach3_criticals_std(rho, t, alpha, v, tol=1e-10, strict=True):
    """Return ``(z1*, z2*)`` arrays.

    Where a branch level reaches 1 the split is infeasible: with ``strict`` an
    :class:`InfeasibleSplit` is raised, otherwise those elements are NaN.
    """
    rho, t = np.broadcast_arrays(np.asarray(rho, float), np.asarray(t, float))
    c = normal_quantile(1.0 - alpha / 2.0)
    pb = _borrow_mass(t)
    beta = 1.0 - pb
    active = t > 0
    lvl1 = np.where(active, v * alpha / (2.0 * beta), 0.5)
    lvl2 = np.where(active, (1.0 - v) * alpha / (2.0 * np.where(pb > 0, pb, 1.0)), 0.5)
    bad = active & ((lvl1 >= 1) | (lvl2 >= 1) | (pb <= 0))
    if strict and np.any(bad):
        raise InfeasibleSplit(f"split v={v} requires a conditional tail level >= 1")
    lvl2 = np.where(bad, 0.5, lvl2)
    tp = np.maximum(t, 1e-300)

    def resid(z):
        tail = normal_sf(z) - _upper_rect(z, tp, rho, bvn_cdf_vec)
        # infeasible elements get a dummy root so the batch still brackets
        return np.where(bad, -z, tail - v * alpha / 2.0)

    z1 = bisect_vec(resid, -12.0, 12.0, tol=tol)
    z2 = normal_quantile(np.clip(1.0 - lvl2, 1e-300, 1 - 1e-16))
    z1 = np.where(active, z1, c)
    z2 = np.where(active, z2, c)
    return np.where(bad, np.nan, z1), np.where(bad, np.nan, z2)


def approach4_critical_std(rho, t, alpha, exact=False):
    """Borrow-branch critical value cancelling the Yuan inflation on each side."""
    c = normal_quantile(1.0 - alpha / 2.0)
    infl = yuan_inflation_std(rho, t, alpha, exact=exact)
    pb = _borrow_mass(t)
    ok = np.asarray(pb > 0)
    target = normal_cdf(c) + np.where(ok, infl / np.where(ok, pb, 1.0), 0.0)
    z = normal_quantile(np.clip(target, 0.5, 1.0 - 1e-16))
    return float(z) if np.ndim(z) == 0 else z


# --- design-level calibrations (reference quadrature) ---------------------


def yuan_type1_error(design: DerivedDesign, alpha: float) -> float:
    """Analytic null rejection rate of the Yuan two-step test at delta = 0."""
    if design.theta <= 0:
        return float(alpha)
    return float(yuan_type1_error_std(design.rho, design.theta_std, alpha, exact=True))


def approach2_critical(design: DerivedDesign, alpha: float, tol: float = 1e-10) -> float:
    c = normal_quantile(1.0 - alpha / 2.0)
    if design.theta <= 0:
        return c
    rho, t = design.rho, design.theta_std
    return find_root(lambda z: _a2_residual(z, rho, t, alpha, bvn_cdf), c - 1.0, c + 6.0, tol)


def approach3_criticals(design: DerivedDesign, alpha: float, split: SplitSpec,
                        tol: float = 1e-10) -> tuple[float, float]:
    c = normal_quantile(1.0 - alpha / 2.0)
    if design.theta <= 0:
        return c, c
    v = split.v
    rho, t = design.rho, design.theta_std
    beta = design.beta_eq
    pb = 1.0 - beta
    lvl1 = v * alpha / (2.0 * beta)
    lvl2 = (1.0 - v) * alpha / (2.0 * pb) if pb > 0 else np.inf
    if lvl1 >= 1 or lvl2 >= 1:
        raise InfeasibleSplit(f"split v={v} requires a conditional tail level >= 1")

    def resid(z):
        tail = normal_sf(z) - _upper_rect(z, t, rho, bvn_cdf)
        return float(tail) / beta - lvl1

    z1 = find_root(resid, -12.0, 12.0, tol)
    z2 = normal_quantile(1.0 - lvl2)
    return z1, z2


def approach3_levels(design: DerivedDesign, alpha: float, split: SplitSpec):
    """Equivalent unconditional two-sided levels ``(alpha1, alpha2, alpha_star)``.

    ``alpha_star = beta_eq * alpha1 + (1 - beta_eq) * alpha2``.
    """
    z1, z2 = approach3_criticals(design, alpha, split)
    a1 = 2.0 * float(normal_sf(z1))
    a2 = 2.0 * float(normal_sf(z2))
    return a1, a2, design.beta_eq * a1 + (1.0 - design.beta_eq) * a2


def approach4_critical(design: DerivedDesign, alpha: float) -> float:
    if design.theta <= 0:
        return normal_quantile(1.0 - alpha / 2.0)
    return float(approach4_critical_std(design.rho, design.theta_std, alpha, exact=True))


def approach1_variance(design: DerivedDesign, delta=0.0):
    """Variance of ``Y = Y1 - w* Y2 1{|Y2| < theta}`` when ``E[Y2] = delta``.

    ``se_y1^2 - w*^2 (m2 + m1^2) + 2 w*^2 delta m1`` with ``(m1, m2)`` the
    truncated moments of Y2 on ``(-theta, theta)``. Broadcasts over arrays.
    """
    theta = np.asarray(design.theta, float)
    se2 = np.asarray(design.se_y2, float)
    w = np.asarray(design.w_star, float)
    pos = theta > 0
    m1, m2 = truncated_moments(delta, se2, np.where(pos, theta, 1.0))
    m1 = np.where(pos, m1, 0.0)
    m2 = np.where(pos, m2, 0.0)
    var = np.square(design.se_y1) - w * w * (m2 + m1 * m1) + 2.0 * w * w * delta * m1
    if np.any(var <= 0):
        raise NumericsError("non-positive variance for the pooled statistic")
    return float(var) if np.ndim(var) == 0 else var


@dataclass(frozen=True)
class PooledBounds:
    bias_bound: float
    type1_bound: float
    type1_bound_loose: float
    sd_y: float


def pooled_bounds(design: DerivedDesign, alpha: float, delta=None) -> PooledBounds:
    """Bias bound ``w* theta alpha_eq`` and the implied type I error bounds.

    ``type1_bound`` is ``Phi(z_{a/2} - b/sd) + Phi(z_{a/2} + b/sd)``;
    ``type1_bound_loose`` is ``alpha/2 + Phi(z_{a/2} + b/sd)``. The SD of the
    pooled statistic is evaluated at ``delta`` (default: the equivalence margin).
    """
    if delta is None:
        delta = design.delta_eq
    theta = max(float(design.theta), 0.0)
    b = design.w_star * theta * design.alpha_eq
    sd = float(np.sqrt(approach1_variance(design, delta)))
    zl = normal_quantile(alpha / 2.0)
    two = float(normal_cdf(zl - b / sd) + normal_cdf(zl + b / sd))
    loose = float(alpha / 2.0 + normal_cdf(zl + b / sd))
    return PooledBounds(b, two, loose, sd)


# --- batch decision rules --------------------------------------------------


@dataclass
class BatchOutcome:
    """Array-valued decisions for a batch of datasets under one method."""

    method: str
    reject: np.ndarray
    statistic: np.ndarray
    critical: np.ndarray
    borrowed: np.ndarray
    estimate: np.ndarray
    alpha0: np.ndarray | None = None
    valid: np.ndarray | None = None

    def __post_init__(self):
        if self.valid is None:
            self.valid = np.isfinite(self.critical) & np.isfinite(self.statistic)


def _arrays(stats: SummaryStats):
    return tuple(np.atleast_1d(np.asarray(v, float)) for v in
                 (stats.y1, stats.y2, stats.se_y1, stats.se_y2, stats.rho))


def _unique_map(fn, rho, t):
    """Evaluate ``fn(rho, t)`` once per distinct (rho, t) pair."""
    pairs = np.stack([rho, t], axis=1)
    uniq, inv = np.unique(pairs, axis=0, return_inverse=True)
    out = fn(uniq[:, 0], uniq[:, 1])
    if isinstance(out, tuple):
        return tuple(np.asarray(o)[inv.ravel()] for o in out)
    return np.asarray(out)[inv.ravel()]


def _finish(method, stat, crit, borrowed, est):
    return BatchOutcome(method, np.abs(stat) > crit, stat, crit, borrowed, est)


def batch_no_borrow(stats: SummaryStats, params: DesignParams) -> BatchOutcome:
    y1, _, se1, _, _ = _arrays(stats)
    stat = y1 / se1
    crit = np.full_like(stat, params.z_crit)
    return _finish(Method.NO_BORROW.value, stat, crit, np.zeros(stat.shape, bool), y1)


def _borrow_parts(stats, params):
    y1, y2, se1, se2, rho = _arrays(stats)
    d = derive_from_stats(SummaryStats(y1, y2, se1, se2, rho), params)
    borrowed = np.atleast_1d(tost_borrow_decision(SummaryStats(y1, y2, se1, se2, rho), params))
    y3 = y1 - d.w_star * y2
    return y1, y2, d, borrowed, y3


def batch_yuan(stats, params, z_borrow=None, z_keep=None, method=Method.YUAN.value):
    y1, y2, d, borrowed, y3 = _borrow_parts(stats, params)
    c = params.z_crit
    zb = c if z_borrow is None else z_borrow
    zk = c if z_keep is None else z_keep
    stat = np.where(borrowed, y3 / d.se_y3, y1 / d.se_y1)
    crit = np.where(borrowed, zb, zk) * np.ones_like(stat)
    est = np.where(borrowed, y3, y1)
    return _finish(method, stat, crit, borrowed, est)


def batch_approach1(stats, params):
    y1, y2, d, borrowed, y3 = _borrow_parts(stats, params)
    var_y = approach1_variance(d, delta=y2)
    stat = np.where(borrowed, y3 / np.sqrt(var_y), y1 / d.se_y1)
    crit = np.full_like(stat, params.z_crit)
    est = np.where(borrowed, y3, y1)
    return _finish(Method.A1.value, stat, crit, borrowed, est)


def batch_approach2(stats, params):
    _, _, se1, se2, rho = _arrays(stats)
    d = derive_from_stats(stats, params)
    t = np.atleast_1d(d.theta_std)
    z = _unique_map(lambda r, tt: approach2_critical_std(r, tt, params.alpha), rho, t)
    return batch_yuan(stats, params, z_borrow=z, z_keep=z, method=Method.A2.value)


def batch_approach3(stats, params, split: SplitSpec, strict=False):
    _, _, se1, se2, rho = _arrays(stats)
    d = derive_from_stats(stats, params)
    t = np.atleast_1d(d.theta_std)
    z1, z2 = _unique_map(lambda r, tt: approach3_criticals_std(r, tt, params.alpha, split.v,
                                                                 strict=strict),
                         rho, t)
    return batch_yuan(stats, params, z_borrow=z2, z_keep=z1, method=Method.A3.value)


def batch_approach4(stats, params):
    _, _, se1, se2, rho = _arrays(stats)
    d = derive_from_stats(stats, params)
    t = np.atleast_1d(d.theta_std)
    z = _unique_map(lambda r, tt: approach4_critical_std(r, tt, params.alpha), rho, t)
    return batch_yuan(stats, params, z_borrow=z, method=Method.A4.value)


# --- single-dataset tests --------------------------------------------------


def _outcome(method, stat, crit, borrowed, est, **extras) -> TestOutcome:
    stat, crit = float(stat), float(crit)
    return TestOutcome(method, abs(stat) > crit, stat, crit, bool(borrowed), float(est),
                       extras)


def no_borrow_test(stats: SummaryStats, alpha: float) -> TestOutcome:
    stat = stats.y1 / stats.se_y1
    return _outcome(Method.NO_BORROW.value, stat, normal_quantile(1 - alpha / 2), False,
                    stats.y1)


def _two_branch(method, stats, params, z_keep, z_borrow, **extras):
    d = derive_from_stats(stats, params)
    if tost_borrow_decision(stats, params):
        y3 = stats.y1 - float(d.w_star) * stats.y2
        return _outcome(method, y3 / float(d.se_y3), z_borrow, True, y3, **extras)
    return _outcome(method, stats.y1 / stats.se_y1, z_keep, False, stats.y1, **extras)


def yuan_test(stats: SummaryStats, params: DesignParams) -> TestOutcome:
    c = params.z_crit
    return _two_branch(Method.YUAN.value, stats, params, c, c)


def _observed_design(stats, params) -> DerivedDesign:
    d = derive_from_stats(stats, params)
    return DerivedDesign(*(float(getattr(d, f)) for f in
                           ("se_y1", "se_y2", "w_star", "rho", "se_y3", "theta",
                            "beta_eq", "alpha_eq", "delta_eq")))


def approach1_test(stats: SummaryStats, params: DesignParams) -> TestOutcome:
    d = _observed_design(stats, params)
    bounds = pooled_bounds(d, params.alpha) if d.theta > 0 else None
    extras = {}
    if bounds is not None:
        extras = {"bias_bound": bounds.bias_bound, "type1_bound": bounds.type1_bound,
                  "type1_bound_loose": bounds.type1_bound_loose}
    c = params.z_crit
    if tost_borrow_decision(stats, params):
        y3 = stats.y1 - d.w_star * stats.y2
        sd = float(np.sqrt(approach1_variance(d, delta=stats.y2)))
        extras["sd_y"] = sd
        return _outcome(Method.A1.value, y3 / sd, c, True, y3, **extras)
    return _outcome(Method.A1.value, stats.y1 / stats.se_y1, c, False, stats.y1, **extras)


def approach2_test(stats: SummaryStats, params: DesignParams) -> TestOutcome:
    z = approach2_critical(_observed_design(stats, params), params.alpha)
    return _two_branch(Method.A2.value, stats, params, z, z)


def approach3_test(stats: SummaryStats, params: DesignParams,
                   split: SplitSpec = SplitSpec()) -> TestOutcome:
    z1, z2 = approach3_criticals(_observed_design(stats, params), params.alpha, split)
    return _two_branch(Method.A3.value, stats, params, z1, z2, z1_star=z1, z2_star=z2,
                       v=split.v)


def approach4_test(stats: SummaryStats, params: DesignParams) -> TestOutcome:
    z = approach4_critical(_observed_design(stats, params), params.alpha)
    return _two_branch(Method.A4.value, stats, params, params.z_crit, z, z_star=z)
