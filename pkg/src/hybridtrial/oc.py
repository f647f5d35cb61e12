"""Operating characteristics under the summary-level bivariate normal model."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .design import DesignParams, SummaryStats, borrowing_probability, derive
from .methods import MethodSpec, evaluate_batch, parse_methods
from .numerics import bvn_cdf, normal_sf
from .power_prior import PriorSpec
from .rng import RngPolicy, map_replicates
from .twostep import (BatchOutcome, InfeasibleSplit, SplitSpec, _upper_rect,
                      approach3_criticals, yuan_type1_error)


@dataclass(frozen=True)
class Scenario:
    Delta: float = 0.0
    delta: float = 0.0
    params: DesignParams = DesignParams()


@dataclass
class OCResult:
    method: str
    reject_rate: float
    borrow_rate: float
    bias: float
    mean_alpha0: float
    mc_se_reject: float
    mc_se_bias: float
    n_reps: int
    seed: int
    n_invalid: int = 0
    error: str = ""

    def as_row(self) -> dict:
        return asdict(self)


def aggregate(out: BatchOutcome, truth: float, seed: int) -> OCResult:
    valid = out.valid
    n = int(valid.sum())
    n_bad = int(valid.size - n)
    if n == 0:
        return OCResult(out.method, math.nan, math.nan, math.nan, math.nan, math.nan,
                        math.nan, 0, seed, n_bad, "no valid replicates")
    rej = out.reject[valid]
    p = float(rej.mean())
    est = out.estimate[valid]
    a0 = math.nan if out.alpha0 is None else float(np.mean(out.alpha0[valid]))
    sd = float(est.std(ddof=1)) if n > 1 else math.nan
    return OCResult(out.method, p, float(out.borrowed[valid].mean()),
                    float(est.mean() - truth), a0, math.sqrt(p * (1 - p) / n),
                    sd / math.sqrt(n), n, seed, n_bad)


def error_result(label: str, seed: int, msg: str) -> OCResult:
    nan = math.nan
    return OCResult(label, nan, nan, nan, nan, nan, nan, 0, seed, 0, msg)


def sample_summary(scenario: Scenario, rng: np.random.Generator) -> SummaryStats:
    """One draw of (y1, y2) with the design SEs and correlation attached."""
    d = derive(scenario.params)
    z1, z2 = rng.standard_normal(2)
    y2 = scenario.delta + d.se_y2 * z2
    y1 = scenario.Delta + d.se_y1 * (d.rho * z2 + math.sqrt(1 - d.rho ** 2) * z1)
    return SummaryStats(y1, y2, d.se_y1, d.se_y2, d.rho)


def sample_batch(scenario: Scenario, policy: RngPolicy, scenario_index: int,
                 n_reps: int, threads: int = 1) -> SummaryStats:
    d = derive(scenario.params)

    def draw(a, b):
        z = np.empty((b - a, 2))
        for i in range(a, b):
            z[i - a] = policy.generator(scenario_index, i).standard_normal(2)
        return z

    z = np.concatenate(map_replicates(draw, n_reps, threads))
    y2 = scenario.delta + d.se_y2 * z[:, 1]
    y1 = scenario.Delta + d.se_y1 * (d.rho * z[:, 1] + math.sqrt(1 - d.rho ** 2) * z[:, 0])
    ones = np.ones(n_reps)
    return SummaryStats(y1, y2, d.se_y1 * ones, d.se_y2 * ones, d.rho * ones)


def run_batch(stats: SummaryStats, truth: float, methods, params: DesignParams,
              prior: PriorSpec, seed: int, strict: bool) -> list[OCResult]:
    results = []
    for spec in parse_methods(methods):
        try:
            out = evaluate_batch(spec, stats, params, prior, strict=strict)
        except InfeasibleSplit as exc:
            results.append(error_result(spec.label, seed, str(exc)))
            continue
        results.append(aggregate(out, truth, seed))
    return results


def run_scenario(scenario: Scenario, methods, n_reps: int = 10_000,
                 policy: RngPolicy = RngPolicy(), scenario_index: int = 0,
                 prior: PriorSpec = PriorSpec(), threads: int = 1) -> list[OCResult]:
    """Monte Carlo rejection, borrowing and bias for each method in one scenario."""
    if n_reps < 100:
        raise ValueError("n_reps must be >= 100")
    stats = sample_batch(scenario, policy, scenario_index, n_reps, threads)
    return run_batch(stats, scenario.Delta, methods, scenario.params, prior,
                     policy.master_seed, strict=True)


def sweep(base: Scenario, delta_grid, Delta_values, methods, n_reps: int = 10_000,
          policy: RngPolicy = RngPolicy(), prior: PriorSpec = PriorSpec(),
          threads: int = 1) -> list[dict]:
    """Cartesian product of (Delta, delta) scenarios; one row per scenario x method."""
    if not len(delta_grid) or not len(Delta_values):
        raise ValueError("grids must be non-empty")
    rows = []
    idx = 0
    for Delta in Delta_values:
        for delta in delta_grid:
            sc = Scenario(float(Delta), float(delta), base.params)
            for res in run_scenario(sc, methods, n_reps, policy, idx, prior, threads):
                rows.append({"scenario": idx, "Delta": sc.Delta, "delta": sc.delta,
                             **res.as_row()})
            idx += 1
    return rows


def approach3_power(params: DesignParams, split: SplitSpec, Delta: float) -> float:
    """Exact rejection probability of Approach 3 at effect ``Delta`` with delta = 0."""
    d = derive(params)
    z1, z2 = approach3_criticals(d, params.alpha, split)
    t = max(d.theta_std, 0.0)
    pb = borrowing_probability(d, 0.0)
    m1 = Delta / d.se_y1
    m3 = Delta / d.se_y3
    tail1 = float(normal_sf(z1 - m1) + normal_sf(z1 + m1))
    inside = 0.0
    if t > 0:
        inside = float(_upper_rect(z1 - m1, t, d.rho, bvn_cdf) +
                       _upper_rect(z1 + m1, t, d.rho, bvn_cdf))
    tail3 = float(normal_sf(z2 - m3) + normal_sf(z2 + m3))
    return tail1 - inside + pb * tail3


def table1_report(designs, split_values=(0.25, 0.5, 0.75), power_delta=None) -> list[dict]:
    """Yuan size, Approach-3 levels and borrowing probability per design and split."""
    rows = []
    for params in designs:
        d = derive(params)
        t1 = yuan_type1_error(d, params.alpha)
        for v in split_values:
            split = SplitSpec(v)
            row = {"delta_eq": params.delta_eq, "alpha_eq": params.alpha_eq, "v": v,
                   "type1_yuan": t1}
            try:
                z1, z2 = approach3_criticals(d, params.alpha, split)
            except InfeasibleSplit:
                z1 = z2 = math.nan
            a1 = 2 * float(normal_sf(z1))
            a2 = 2 * float(normal_sf(z2))
            row.update(z1_star=z1, z2_star=z2, alpha1=a1, alpha2=a2,
                       alpha_star=d.beta_eq * a1 + (1 - d.beta_eq) * a2,
                       beta_eq=d.beta_eq, borrow_prob=1 - d.beta_eq)
            if power_delta is not None:
                row["power_delta"] = power_delta
                row["power_a3"] = (approach3_power(params, split, power_delta)
                                   if math.isfinite(z1) else math.nan)
            rows.append(row)
    return rows


def table1_designs(base: DesignParams = DesignParams(), delta_eqs=(0.25, 0.30),
                   alpha_eqs=(0.05, 0.10, 0.15, 0.20)) -> list[DesignParams]:
    return [base.replace(delta_eq=de, alpha_eq=ae) for de in delta_eqs for ae in alpha_eqs]
