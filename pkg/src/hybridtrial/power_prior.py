"""Power-prior comparator with empirical-Bayes choice of the discounting exponent.

The marginal likelihood ``m(a0)`` compares two estimates of the same quantity:
one from the randomized comparison and one from the external comparison,
each a normal location with a standard error. Raising the external likelihood
to ``a0`` inflates its variance by ``1/a0``, so every integral is a product of
Gaussian kernels with a closed form.

Reference mapping from :class:`SummaryStats`: the treatment effect against the
randomized control (``y1``, ``se_y1``) versus the treatment effect against the
external controls (``y1 - y2`` with its SE from the joint covariance).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .design import DesignParams, SummaryStats
from .numerics import DomainError, QuadratureSpec, TAIL_CUT, integrate_adaptive, normal_quantile
from .twostep import BatchOutcome, Method, TestOutcome

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
LOG_SQRT2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PriorSpec:
    mu0: float = 0.0
    var0: float = 1e6

    def __post_init__(self):
        if not self.var0 > 0:
            raise DomainError("prior variance must be > 0")


@dataclass(frozen=True)
class ReferencePair:
    """Two normal location estimates entering the marginal likelihood."""

    mu_c: float
    sd_c: float
    mu_r: float
    sd_r: float

    @classmethod
    def from_stats(cls, stats: SummaryStats) -> "ReferencePair":
        y1 = np.asarray(stats.y1, float)
        y2 = np.asarray(stats.y2, float)
        se1 = np.asarray(stats.se_y1, float)
        se2 = np.asarray(stats.se_y2, float)
        cov = np.asarray(stats.rho, float) * se1 * se2
        var_ext = np.maximum(se1 * se1 + se2 * se2 - 2.0 * cov, 1e-300)
        return cls(y1, se1, y1 - y2, np.sqrt(var_ext))


@dataclass
class PowerPriorFit:
    alpha0: float
    estimate: float
    se: float
    marginal_curve: np.ndarray = field(repr=False, default=None)


def _as_ref(ref):
    return ReferencePair.from_stats(ref) if isinstance(ref, SummaryStats) else ref


def log_marginal_likelihood(alpha0, ref, prior: PriorSpec = PriorSpec()):
    """``log m(alpha0)``; broadcasts over ``alpha0`` and array-valued references."""
    ref = _as_ref(ref)
    a = np.asarray(alpha0, float)
    if np.any((a < 0) | (a > 1)):
        raise DomainError("alpha0 must lie in [0, 1]")
    p_c = 1.0 / np.square(ref.sd_c)
    p_r = a / np.square(ref.sd_r)
    p_0 = 1.0 / prior.var0
    mu_c, mu_r, mu_0 = ref.mu_c, ref.mu_r, prior.mu0

    p_d = p_r + p_0
    s_d = p_r * mu_r + p_0 * mu_0
    q_d = p_r * mu_r * mu_r + p_0 * mu_0 * mu_0 - s_d * s_d / p_d
    p_n = p_d + p_c
    s_n = s_d + p_c * mu_c
    q_n = q_d + s_d * s_d / p_d + p_c * mu_c * mu_c - s_n * s_n / p_n
    return -LOG_SQRT2PI + 0.5 * np.log(p_d / p_n) - 0.5 * (q_n - q_d)


def marginal_likelihood(alpha0: float, ref, prior: PriorSpec = PriorSpec()) -> float:
    """Closed-form ``m(alpha0)``: ratio of prior-predictive integrals."""
    return float(np.exp(log_marginal_likelihood(alpha0, ref, prior)))


def _gauss_product_integral(locs, precs, spec):
    """Integrate ``prod_i exp(-p_i (mu - m_i)^2 / 2)`` numerically."""
    P = sum(precs)
    center = sum(p * m for p, m in zip(precs, locs)) / P
    width = TAIL_CUT / math.sqrt(P)
    f = lambda mu: math.exp(-0.5 * sum(p * (mu - m) ** 2 for p, m in zip(precs, locs)))
    peak = f(center)
    g = lambda mu: f(mu) / peak
    return peak * width * integrate_adaptive(lambda u: g(center + width * u), -1.0, 1.0, spec)


def marginal_likelihood_quad(alpha0: float, ref, prior: PriorSpec = PriorSpec(),
                             spec: QuadratureSpec = QuadratureSpec(1e-13, 400)) -> float:
    """``m(alpha0)`` by direct quadrature of both integrals (cross-check)."""
    ref = _as_ref(ref)
    if not 0.0 <= alpha0 <= 1.0:
        raise DomainError("alpha0 must lie in [0, 1]")
    mu_c, sd_c, mu_r, sd_r = (float(v) for v in (ref.mu_c, ref.sd_c, ref.mu_r, ref.sd_r))
    s0 = math.sqrt(prior.var0)
    # phi^a((mu - mu_r)/sd_r) = (2 pi)^(-a/2) exp(-a (mu - mu_r)^2 / (2 sd_r^2))
    locs_d = [prior.mu0]
    precs_d = [1.0 / s0 ** 2]
    if alpha0 > 0:
        locs_d.insert(0, mu_r)
        precs_d.insert(0, alpha0 / sd_r ** 2)
    num = _gauss_product_integral([mu_c] + locs_d, [1.0 / sd_c ** 2] + precs_d, spec)
    den = _gauss_product_integral(locs_d, precs_d, spec)
    # common (2 pi)^(-a/2) and prior constants cancel; control kernel keeps one
    return num / den / math.sqrt(2.0 * math.pi)


def fit_alpha0_batch(ref, prior: PriorSpec = PriorSpec(), tol: float = 1e-6,
                     n_scan: int = 101):
    """Maximize ``m(alpha0)`` over [0, 1] elementwise: scan, then golden section."""
    ref = _as_ref(ref)
    mu_c = np.atleast_1d(np.asarray(ref.mu_c, float))
    r = ReferencePair(mu_c, np.atleast_1d(ref.sd_c), np.atleast_1d(ref.mu_r),
                      np.atleast_1d(ref.sd_r))
    grid = np.linspace(0.0, 1.0, n_scan)
    cols = ReferencePair(*(np.asarray(v, float)[:, None] for v in
                           (r.mu_c, r.sd_c, r.mu_r, r.sd_r)))
    scan = log_marginal_likelihood(grid[None, :], cols, prior)
    best = np.argmax(scan, axis=1)
    lo = grid[np.maximum(best - 1, 0)]
    hi = grid[np.minimum(best + 1, n_scan - 1)]

    def f(a):
        return log_marginal_likelihood(a, r, prior)

    x1 = hi - GOLDEN * (hi - lo)
    x2 = lo + GOLDEN * (hi - lo)
    f1, f2 = f(x1), f(x2)
    while np.max(hi - lo) > tol:
        left = f1 >= f2  # ties toward smaller alpha0
        hi = np.where(left, x2, hi)
        lo = np.where(left, lo, x1)
        nx1 = np.where(left, hi - GOLDEN * (hi - lo), x2)
        nx2 = np.where(left, x1, lo + GOLDEN * (hi - lo))
        nf1 = np.where(left, f(nx1), f2)
        nf2 = np.where(left, f1, f(nx2))
        x1, x2, f1, f2 = nx1, nx2, nf1, nf2
    a = 0.5 * (lo + hi)
    # endpoints are legitimate optima
    cands = np.stack([np.zeros_like(a), a, np.ones_like(a)], axis=1)
    vals = np.stack([f(cands[:, 0]), f(a), f(cands[:, 2])], axis=1)
    pick = np.argmax(vals >= vals.max(axis=1, keepdims=True) - 1e-12, axis=1)
    return cands[np.arange(a.size), pick], scan


def pooled_estimate(stats: SummaryStats, alpha0):
    """Posterior pooled contrast ``y1 - a0 w* y2`` and its SE.

    The SE combines the treatment-arm variance with the posterior variance of
    the control mean (control precision plus ``a0``-scaled external precision).
    """
    y1 = np.asarray(stats.y1, float)
    y2 = np.asarray(stats.y2, float)
    se1 = np.asarray(stats.se_y1, float)
    se2 = np.asarray(stats.se_y2, float)
    v_c = np.asarray(stats.rho, float) * se1 * se2
    v_t = np.maximum(se1 * se1 - v_c, 1e-300)
    v_r = np.maximum(se2 * se2 - v_c, 1e-300)
    w = v_c / (se2 * se2)
    est = y1 - alpha0 * w * y2
    se = np.sqrt(v_t + 1.0 / (1.0 / v_c + alpha0 / v_r))
    return est, se


def fit_alpha0(stats: SummaryStats, prior: PriorSpec = PriorSpec()) -> PowerPriorFit:
    a, scan = fit_alpha0_batch(stats, prior)
    a0 = float(a[0])
    est, se = pooled_estimate(stats, a0)
    return PowerPriorFit(a0, float(est), float(se), np.exp(scan[0]))


def pp_test(stats: SummaryStats, params: DesignParams, prior: PriorSpec = PriorSpec(),
            alpha0: float | None = None) -> TestOutcome:
    """Z-test of the pooled posterior contrast. ``alpha0`` overrides the fit."""
    if alpha0 is None:
        fit = fit_alpha0(stats, prior)
    else:
        est, se = pooled_estimate(stats, alpha0)
        fit = PowerPriorFit(float(alpha0), float(est), float(se))
    stat = fit.estimate / fit.se
    crit = normal_quantile(1.0 - params.alpha / 2.0)
    return TestOutcome(Method.POWER_PRIOR.value, abs(stat) > crit, stat, crit,
                       fit.alpha0 > 0.01, fit.estimate, {"alpha0": fit.alpha0})


def batch_power_prior(stats: SummaryStats, params: DesignParams,
                      prior: PriorSpec = PriorSpec()) -> BatchOutcome:
    a0, _ = fit_alpha0_batch(stats, prior)
    est, se = pooled_estimate(stats, a0)
    stat = np.atleast_1d(est / se)
    crit = np.full_like(stat, params.z_crit)
    return BatchOutcome(Method.POWER_PRIOR.value, np.abs(stat) > crit, stat, crit,
                        a0 > 0.01, np.atleast_1d(est), alpha0=a0)
