"""Individual-level survival simulation of a hybrid trial.

Pipeline per replicate: covariate registry, propensity-weighted enrollment and
1:1 randomization, logistic propensity model with greedy nearest-neighbour
matching of external controls, proportional-hazards survival times, event-driven
administrative censoring, and a Cox fit whose group coefficients become the
``(y1, y2)`` summary consumed by the test procedures.

Group codes: 0 control, 1 treatment, 2 external (RWD).
"""

from __future__ import annotations

import bisect
import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .design import DesignParams, SummaryStats
from .methods import MethodSpec, evaluate_batch, parse_methods
from .numerics import find_root, normal_quantile
from .oc import aggregate, error_result
from .power_prior import PriorSpec
from .rng import RngPolicy, map_replicates
from .twostep import InfeasibleSplit

log = logging.getLogger(__name__)

CONTROL, TREATMENT, RWD = 0, 1, 2
GROUP_NAMES = {CONTROL: "control", TREATMENT: "treatment", RWD: "rwd"}
GROUP_CODES = {v: k for k, v in GROUP_NAMES.items()}


class SurvivalError(RuntimeError):
    """A replicate of the survival pipeline could not be completed."""


class RankDeficiency(SurvivalError, ValueError):
    pass


@dataclass(frozen=True)
class Covariate:
    kind: str = "normal"  # "normal" or "binary"
    mean: float = 0.0
    sd: float = 1.0
    p: float = 0.5

    def draw(self, rng, n):
        if self.kind == "binary":
            return (rng.random(n) < self.p).astype(float)
        if self.kind == "normal":
            return self.mean + self.sd * rng.standard_normal(n)
        raise ValueError(f"unknown covariate kind {self.kind!r}")


DEFAULT_COVARIATES = (Covariate("binary", p=0.4), Covariate("normal"), Covariate("normal"))


@dataclass(frozen=True)
class Baseline:
    """Parametric baseline: cumulative hazard ``(rate * t) ** shape``.

    ``rate=None`` calibrates the rate so that the marginal median control
    survival over the covariate model equals ``median``.
    """

    family: str = "exponential"
    rate: float | None = None
    shape: float = 1.0
    median: float = 24.0

    def __post_init__(self):
        if self.family not in ("exponential", "weibull"):
            raise ValueError("baseline family must be 'exponential' or 'weibull'")
        if self.family == "exponential" and self.shape != 1.0:
            raise ValueError("exponential baseline has shape 1")


@dataclass(frozen=True)
class SurvivalScenario:
    theta_T: float = 1.0
    theta_R: float = 1.0
    baseline: Baseline = Baseline()
    cox_coeffs: tuple = (0.5, 0.3, -0.2)
    covariate_model: tuple = DEFAULT_COVARIATES
    enrollment_coeffs: tuple = (0.4, 0.3, -0.3)
    n_registry: int = 1000
    n_trial: int = 200
    n_external: int = 200
    target_events: int = 196
    registry_followup: float = 60.0
    adjust_covariates: bool = False
    test_params: DesignParams = DesignParams(alpha=0.05, alpha_eq=0.10, delta_eq=0.30)

    def __post_init__(self):
        if not (self.theta_T > 0 and self.theta_R > 0):
            raise ValueError("hazard ratios must be positive")
        k = len(self.covariate_model)
        if len(self.cox_coeffs) != k or len(self.enrollment_coeffs) != k:
            raise ValueError("coefficient vectors must match the covariate model")
        if self.n_trial % 2:
            raise ValueError("n_trial must be even for 1:1 randomization")
        if self.n_registry < self.n_trial + self.n_external:
            raise ValueError("n_registry must be >= n_trial + n_external")
        if not 1 <= self.target_events <= self.n_trial + self.n_external:
            raise ValueError("target_events must lie in [1, total subjects]")
        if not self.registry_followup > 0:
            raise ValueError("registry_followup must be > 0")

    @property
    def baseline_rate(self) -> float:
        if self.baseline.rate is not None:
            return self.baseline.rate
        return calibrate_baseline_rate(self)

    def with_log_hr(self, log_theta_T: float, log_theta_R: float) -> "SurvivalScenario":
        from dataclasses import replace
        return replace(self, theta_T=math.exp(log_theta_T), theta_R=math.exp(log_theta_R))


_RATE_CACHE: dict = {}


def calibrate_baseline_rate(sc: SurvivalScenario) -> float:
    """Rate giving marginal control median ``sc.baseline.median``.

    Binary covariates are enumerated; normal ones combine into one normal
    linear predictor integrated by Gauss-Hermite quadrature.
    """
    key = (sc.baseline, sc.cox_coeffs, sc.covariate_model)
    if key in _RATE_CACHE:
        return _RATE_CACHE[key]
    mu_n, var_n = 0.0, 0.0
    binaries = []
    for a, cov in zip(sc.cox_coeffs, sc.covariate_model):
        if cov.kind == "binary":
            binaries.append((a, cov.p))
        else:
            mu_n += a * cov.mean
            var_n += (a * cov.sd) ** 2
    nodes, weights = np.polynomial.hermite_e.hermegauss(60)
    weights = weights / weights.sum()
    lp = mu_n + math.sqrt(var_n) * nodes
    probs = weights
    for a, p in binaries:
        lp = np.concatenate([lp, lp + a])
        probs = np.concatenate([probs * (1 - p), probs * p])
    risk = np.exp(lp)
    # survival at the median: E[exp(-H * exp(lp))] = 1/2 with H = (rate * median) ** shape
    logH = find_root(lambda x: float(np.dot(probs, np.exp(-math.exp(x) * risk))) - 0.5,
                     -30.0, 30.0, 1e-13)
    rate = math.exp(logH / sc.baseline.shape) / sc.baseline.median
    _RATE_CACHE[key] = rate
    return rate


@dataclass
class SubjectTable:
    """Column-oriented subjects; ``time``/``event`` are NaN/False until simulated."""

    id: np.ndarray
    covariates: np.ndarray
    group: np.ndarray
    time: np.ndarray
    event: np.ndarray

    def __len__(self):
        return len(self.id)

    def take(self, idx) -> "SubjectTable":
        return SubjectTable(self.id[idx], self.covariates[idx], self.group[idx],
                            self.time[idx], self.event[idx])

    @classmethod
    def concat(cls, parts) -> "SubjectTable":
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                     ("id", "covariates", "group", "time", "event")))


def generate_registry(n: int, scenario: SurvivalScenario, rng) -> SubjectTable:
    if n < scenario.n_trial + scenario.n_external:
        raise ValueError(f"registry of {n} cannot supply {scenario.n_trial} trial and "
                         f"{scenario.n_external} external subjects")
    cols = [c.draw(rng, n) for c in scenario.covariate_model]
    X = np.column_stack(cols) if cols else np.zeros((n, 0))
    return SubjectTable(np.arange(n), X, np.full(n, -1), np.full(n, np.nan),
                        np.zeros(n, bool))


def fit_logistic(X, y, max_iter=50, tol=1e-10):
    """Newton-Raphson logistic regression with intercept. Returns (coef, converged)."""
    Z = np.column_stack([np.ones(len(y)), X])
    beta = np.zeros(Z.shape[1])
    for _ in range(max_iter):
        p = expit(Z @ beta)
        grad = Z.T @ (y - p)
        W = p * (1 - p)
        H = (Z * W[:, None]).T @ Z
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            return beta, False
        beta = beta + step
        if np.max(np.abs(beta)) > 30:
            return beta, False
        if np.max(np.abs(step)) < tol:
            return beta, True
    return beta, False


def greedy_match(trial_scores, pool_scores, n_match):
    """Greedy 1-NN without replacement; trial units in descending score order.

    Returns indices into ``pool_scores``. Distance ties go to the lower pool index.
    """
    order = np.argsort(pool_scores, kind="stable")
    keys = list(pool_scores[order])
    avail = list(order)
    out = []
    for i in np.argsort(-trial_scores, kind="stable"):
        if len(out) == n_match or not avail:
            break
        s = trial_scores[i]
        j = bisect.bisect_left(keys, s)
        best = None
        for k in (j - 1, j):
            if 0 <= k < len(keys):
                cand = (abs(keys[k] - s), avail[k], k)
                if best is None or cand < best:
                    best = cand
        out.append(best[1])
        del keys[best[2]]
        del avail[best[2]]
    # more externals than trial units: keep cycling over the trial order
    while len(out) < n_match and avail:
        extra = greedy_match(trial_scores, pool_scores[avail], n_match - len(out))
        chosen = [avail[k] for k in extra]
        out.extend(chosen)
        avail = [a for a in avail if a not in set(chosen)]
    return np.asarray(out, dtype=int)


def _euclid_match(trial_X, pool_X, n_match):
    sd = pool_X.std(axis=0)
    sd[sd == 0] = 1.0
    T, P = trial_X / sd, pool_X / sd
    used = np.zeros(len(P), bool)
    out = []
    for i in range(len(T)):
        if len(out) == n_match:
            break
        d = np.sum((P - T[i]) ** 2, axis=1)
        d[used] = np.inf
        k = int(np.argmin(d))
        used[k] = True
        out.append(k)
    return np.asarray(out, dtype=int)


@dataclass
class Enrollment:
    treatment: np.ndarray
    control: np.ndarray
    externals: np.ndarray
    propensity_coef: np.ndarray | None
    fallback: bool = False


def enroll_and_match(registry: SubjectTable, scenario: SurvivalScenario, rng) -> Enrollment:
    """Propensity-weighted enrollment, 1:1 randomization, matched external controls.

    Returns registry indices for each arm and the matched externals.
    """
    n = len(registry)
    X = registry.covariates
    w = expit(X @ np.asarray(scenario.enrollment_coeffs, float)) if X.shape[1] else np.ones(n)
    trial = rng.choice(n, size=scenario.n_trial, replace=False, p=w / w.sum())
    trial = rng.permutation(trial)
    half = scenario.n_trial // 2
    treat, ctrl = np.sort(trial[:half]), np.sort(trial[half:])
    in_trial = np.zeros(n, bool)
    in_trial[trial] = True
    pool = np.flatnonzero(~in_trial)
    coef, ok = fit_logistic(X, in_trial.astype(float))
    trial_sorted = np.sort(trial)
    if ok:
        ps = X @ coef[1:] + coef[0]
        picked = greedy_match(ps[trial_sorted], ps[pool], scenario.n_external)
        fallback = False
    else:
        log.warning("propensity model did not converge; matching on covariates")
        picked = _euclid_match(X[trial_sorted], X[pool], scenario.n_external)
        fallback = True
        coef = None
    return Enrollment(treat, ctrl, pool[picked], coef, fallback)


def simulate_outcomes(subjects: SubjectTable, scenario: SurvivalScenario, rng) -> SubjectTable:
    """Inverse-transform survival times under proportional hazards.

    ``S_group(t) = S0(t) ** (exp(a'u) * theta_group)`` with ``theta`` equal to 1,
    ``theta_T`` or ``theta_R`` for control, treatment and external subjects.
    """
    g = subjects.group
    if np.any(g < 0):
        raise ValueError("all subjects need a group before outcomes are simulated")
    hr = np.where(g == TREATMENT, scenario.theta_T, np.where(g == RWD, scenario.theta_R, 1.0))
    risk = np.exp(subjects.covariates @ np.asarray(scenario.cox_coeffs, float)) * hr
    u = rng.random(len(g))
    # (rate t)^shape * risk = -log U
    t = (-np.log1p(-u) / risk) ** (1.0 / scenario.baseline.shape) / scenario.baseline_rate
    return SubjectTable(subjects.id, subjects.covariates, g, t, np.ones(len(g), bool))


def survival_function(t, covariates, group, scenario: SurvivalScenario):
    """Analytic S_group(t; u) of the generator (used for checks)."""
    hr = {CONTROL: 1.0, TREATMENT: scenario.theta_T, RWD: scenario.theta_R}[group]
    risk = math.exp(float(np.dot(covariates, scenario.cox_coeffs))) * hr
    H0 = (scenario.baseline_rate * np.asarray(t)) ** scenario.baseline.shape
    return np.exp(-H0 * risk)


@dataclass
class CensorResult:
    subjects: SubjectTable
    cutoff: float
    underpowered: bool


def administrative_censor(subjects: SubjectTable, target_events: int,
                          registry_followup: float) -> CensorResult:
    """End the trial at its ``target_events``-th event; externals also stop at the
    registry follow-up, whichever comes first."""
    if target_events < 1:
        raise ValueError("target_events must be >= 1")
    t, g, ids = subjects.time, subjects.group, subjects.id
    in_trial = g != RWD
    tr = np.flatnonzero(in_trial)
    order = tr[np.lexsort((ids[tr], t[tr]))]
    underpowered = len(order) < target_events
    if underpowered:
        cutoff = float(np.max(t))
        trial_event = in_trial.copy()
    else:
        last = order[target_events - 1]
        cutoff = float(t[last])
        trial_event = np.zeros(len(t), bool)
        trial_event[order[:target_events]] = True
    ext_limit = min(cutoff, registry_followup)
    time = np.where(in_trial, np.minimum(t, cutoff), np.minimum(t, ext_limit))
    event = np.where(in_trial, trial_event, t <= ext_limit)
    out = SubjectTable(ids, subjects.covariates, g, time, event)
    return CensorResult(out, cutoff, underpowered)


@dataclass
class CoxFit:
    coef: np.ndarray
    covariance: np.ndarray
    iterations: int
    converged: bool
    loglik: float = math.nan
    columns: tuple = field(default_factory=tuple)


def design_matrix(subjects: SubjectTable, adjust_covariates: bool = False):
    g = subjects.group
    cols = [(g == TREATMENT).astype(float), (g == RWD).astype(float)]
    names = ["treatment", "rwd"]
    if adjust_covariates:
        for j in range(subjects.covariates.shape[1]):
            cols.append(subjects.covariates[:, j])
            names.append(f"cov_{j + 1}")
    return np.column_stack(cols), tuple(names)


def _check_rank(X, names):
    Xc = X - X.mean(axis=0)
    for j in range(X.shape[1]):
        if np.linalg.matrix_rank(Xc[:, :j + 1]) < j + 1:
            raise RankDeficiency(f"design column {names[j]!r} is constant or collinear")


def cox_partial_loglik(beta, time, event, X):
    """Breslow log partial likelihood, gradient and information."""
    order = np.argsort(time, kind="stable")
    t = time[order]
    d = event[order]
    Xs = X[order]
    eta = Xs @ beta
    shift = eta.max()
    r = np.exp(eta - shift)
    S0 = np.cumsum(r[::-1])[::-1]
    S1 = np.cumsum((r[:, None] * Xs)[::-1], axis=0)[::-1]
    S2 = np.cumsum((r[:, None, None] * Xs[:, :, None] * Xs[:, None, :])[::-1], axis=0)[::-1]
    first = np.searchsorted(t, t, side="left")
    ev = np.flatnonzero(d)
    f = first[ev]
    s0 = S0[f]
    xbar = S1[f] / s0[:, None]
    ll = float(np.sum(eta[ev] - shift - np.log(s0)))
    grad = np.sum(Xs[ev] - xbar, axis=0)
    info = np.sum(S2[f] / s0[:, None, None], axis=0) - xbar.T @ xbar
    return ll, grad, info


def cox_fit(subjects: SubjectTable, adjust_covariates: bool = False, max_iter: int = 25,
            gtol: float = 1e-8, X=None, names=None) -> CoxFit:
    """Maximize the Cox partial likelihood (Breslow ties) by Newton-Raphson."""
    if X is None:
        X, names = design_matrix(subjects, adjust_covariates)
    names = names or tuple(f"x{j}" for j in range(X.shape[1]))
    time = np.asarray(subjects.time, float)
    event = np.asarray(subjects.event, bool)
    if len(np.unique(time[event])) < 2:
        raise SurvivalError("need at least two distinct event times")
    _check_rank(X, names)
    beta = np.zeros(X.shape[1])
    ll, grad, info = cox_partial_loglik(beta, time, event, X)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            break
        new = beta + step
        nll, ngrad, ninfo = cox_partial_loglik(new, time, event, X)
        halvings = 0
        while nll < ll - 1e-12 and halvings < 30:
            step /= 2
            new = beta + step
            nll, ngrad, ninfo = cox_partial_loglik(new, time, event, X)
            halvings += 1
        beta, ll, grad, info = new, nll, ngrad, ninfo
        if np.max(np.abs(beta)) > 30:
            break
        if np.linalg.norm(grad) <= gtol:
            # a vanishing gradient with a large pending step means the likelihood is
            # monotone (estimates drifting to infinity), not converged
            try:
                pending = np.linalg.solve(info, grad)
            except np.linalg.LinAlgError:
                break
            converged = bool(np.max(np.abs(pending)) < 1e-6)
            break
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        cov = np.full((len(beta), len(beta)), np.nan)
        converged = False
    cov = 0.5 * (cov + cov.T)
    return CoxFit(beta, cov, it, converged, ll, names)


def to_summary(fit: CoxFit) -> SummaryStats:
    """Treatment and external log hazard ratios (both vs control) as ``(y1, y2)``."""
    if not fit.converged:
        raise SurvivalError("Cox fit did not converge")
    se1 = math.sqrt(fit.covariance[0, 0])
    se2 = math.sqrt(fit.covariance[1, 1])
    rho = fit.covariance[0, 1] / (se1 * se2)
    return SummaryStats(float(fit.coef[0]), float(fit.coef[1]), se1, se2, float(rho))


@dataclass
class ReplicateResult:
    stats: SummaryStats
    trial_events: int
    external_events: int
    fallback: bool
    underpowered: bool


def build_trial(scenario: SurvivalScenario, rng) -> SubjectTable:
    """Registry, enrollment and matching; groups assigned, outcomes unset."""
    reg = generate_registry(scenario.n_registry, scenario, rng)
    enr = enroll_and_match(reg, scenario, rng)
    parts = []
    for idx, code in ((enr.control, CONTROL), (enr.treatment, TREATMENT),
                      (enr.externals, RWD)):
        part = reg.take(idx)
        part.group = np.full(len(idx), code)
        parts.append(part)
    return SubjectTable.concat(parts), enr.fallback


def simulate_replicate(scenario: SurvivalScenario, rng) -> ReplicateResult:
    subjects, fallback = build_trial(scenario, rng)
    subjects = simulate_outcomes(subjects, scenario, rng)
    cens = administrative_censor(subjects, scenario.target_events, scenario.registry_followup)
    s = cens.subjects
    fit = cox_fit(s, scenario.adjust_covariates)
    stats = to_summary(fit)
    is_ext = s.group == RWD
    return ReplicateResult(stats, int(s.event[~is_ext].sum()), int(s.event[is_ext].sum()),
                           fallback, cens.underpowered)


def schoenfeld_events(alpha=0.05, power=0.8, hr=0.67) -> int:
    z = normal_quantile(1 - alpha / 2) + normal_quantile(power)
    return math.ceil(4 * z * z / math.log(hr) ** 2)


def simulate_summaries(scenario: SurvivalScenario, n_reps: int, policy: RngPolicy,
                       scenario_index: int = 0, threads: int = 1):
    """Run the pipeline ``n_reps`` times; returns (SummaryStats arrays, ok mask)."""
    def work(a, b):
        out = np.full((b - a, 5), np.nan)
        for i in range(a, b):
            rng = policy.generator(scenario_index, i)
            try:
                r = simulate_replicate(scenario, rng).stats
            except (SurvivalError, np.linalg.LinAlgError, FloatingPointError) as exc:
                log.debug("replicate %d failed: %s", i, exc)
                continue
            out[i - a] = (r.y1, r.y2, r.se_y1, r.se_y2, r.rho)
        return out

    arr = np.concatenate(map_replicates(work, n_reps, threads))
    ok = np.all(np.isfinite(arr), axis=1)
    return arr, ok


def survival_oc(scenario: SurvivalScenario, grid, methods, n_reps: int = 10_000,
                policy: RngPolicy = RngPolicy(), prior: PriorSpec = PriorSpec(),
                threads: int = 1, max_fail_frac: float = 0.01) -> list[dict]:
    """Operating characteristics over (log theta_T, log theta_R) pairs."""
    specs = parse_methods(methods)
    rows = []
    for idx, (lt, lr) in enumerate(grid):
        sc = scenario.with_log_hr(lt, lr)
        arr, ok = simulate_summaries(sc, n_reps, policy, idx, threads)
        n_fail = int((~ok).sum())
        if n_fail > max_fail_frac * n_reps:
            raise SurvivalError(f"scenario {idx}: {n_fail} of {n_reps} replicates failed")
        a = arr[ok]
        stats = SummaryStats(a[:, 0], a[:, 1], a[:, 2], a[:, 3], a[:, 4])
        for spec in specs:
            try:
                out = evaluate_batch(spec, stats, sc.test_params, prior, strict=False)
                res = aggregate(out, lt, policy.master_seed)
            except InfeasibleSplit as exc:
                res = error_result(spec.label, policy.master_seed, str(exc))
            row = {"scenario": idx, "log_theta_T": lt, "log_theta_R": lr, **res.as_row()}
            row["n_failed"] = n_fail
            rows.append(row)
    return rows


SUBJECT_COLUMNS = ("id", "group", "time", "event")


def write_subjects(path, subjects: SubjectTable):
    k = subjects.covariates.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(SUBJECT_COLUMNS) + [f"cov_{j + 1}" for j in range(k)])
        for i in range(len(subjects)):
            w.writerow([int(subjects.id[i]), GROUP_NAMES[int(subjects.group[i])],
                        repr(float(subjects.time[i])), int(bool(subjects.event[i]))]
                       + [repr(float(x)) for x in subjects.covariates[i]])


def read_subjects(path) -> SubjectTable:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    header, body = rows[0], rows[1:]
    missing = [c for c in SUBJECT_COLUMNS if c not in header]
    if missing:
        raise ValueError(f"subject file lacks columns: {', '.join(missing)}")
    col = {name: j for j, name in enumerate(header)}
    cov_cols = sorted((c for c in header if c.startswith("cov_")), key=lambda c: int(c[4:]))
    try:
        groups = np.array([GROUP_CODES[r[col["group"]].strip().lower()] for r in body])
    except KeyError as exc:
        raise ValueError(f"unknown group label {exc.args[0]!r}") from None
    X = np.array([[float(r[col[c]]) for c in cov_cols] for r in body]).reshape(len(body), -1)
    return SubjectTable(np.array([int(r[col["id"]]) for r in body]), X, groups,
                        np.array([float(r[col["time"]]) for r in body]),
                        np.array([r[col["event"]].strip() in ("1", "true", "True")
                                  for r in body]))
