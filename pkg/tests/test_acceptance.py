"""Acceptance suite. Each test checks one criterion at its stated tolerance and
runtime budget, and records a PASS/FAIL line shown in the terminal summary."""

import math
import time
from dataclasses import replace

import numpy as np

from hybridtrial.cli import main
from hybridtrial.design import (DesignParams, SummaryStats, borrowing_probability, derive)
from hybridtrial.methods import MethodSpec, evaluate_batch
from hybridtrial.numerics import normal_quantile
from hybridtrial.oc import Scenario, run_scenario, sample_batch, table1_designs, table1_report
from hybridtrial.power_prior import (ReferencePair, fit_alpha0_batch, marginal_likelihood,
                                     marginal_likelihood_quad)
from hybridtrial.rng import RngPolicy
from hybridtrial.survival import (CONTROL, RWD, TREATMENT, SubjectTable, SurvivalScenario,
                                  administrative_censor, build_trial, cox_fit, generate_registry,
                                  simulate_outcomes, survival_oc)
from hybridtrial.twostep import (pooled_bounds, yuan_type1_error, yuan_type1_error_std)

from acceptance_log import record
from oracles import brute_force_cox, log_marginal_gauss, partial_loglik_loops

# published reference table, rows ordered (delta_eq, alpha_eq) over
# {0.25, 0.30} x {0.05, 0.10, 0.15, 0.20}
BORROW_PROB = [0.3082, 0.5526, 0.6850, 0.7697, 0.5790, 0.7572, 0.8424, 0.8921]
YUAN_TYPE1 = [0.0599, 0.0658, 0.0673, 0.0670, 0.0663, 0.0672, 0.0656, 0.0635]
# (alpha*, alpha1, alpha2) for splits v = 0.25, 0.5, 0.75
APPROACH3 = [
    [(0.0467, 0.0134, 0.1216), (0.0440, 0.0274, 0.0812), (0.0414, 0.0418, 0.0406)],
    [(0.0441, 0.0148, 0.0678), (0.0390, 0.0314, 0.0452), (0.0344, 0.0490, 0.0226)],
    [(0.0428, 0.0166, 0.0548), (0.0363, 0.0362, 0.0364), (0.0307, 0.0580, 0.0182)],
    [(0.0419, 0.0188, 0.0488), (0.0347, 0.0426, 0.0324), (0.0286, 0.0700, 0.0162)],
    [(0.0438, 0.0150, 0.0648), (0.0385, 0.0320, 0.0432), (0.0336, 0.0502, 0.0216)],
    [(0.0420, 0.0184, 0.0496), (0.0350, 0.0414, 0.0330), (0.0290, 0.0676, 0.0166)],
    [(0.0412, 0.0228, 0.0446), (0.0335, 0.0542, 0.0296), (0.0271, 0.0930, 0.0148)],
    [(0.0406, 0.0290, 0.0420), (0.0329, 0.0734, 0.0280), (0.0269, 0.1332, 0.0140)],
]
SPLITS = (0.25, 0.5, 0.75)

ALPHA = 0.05
BASE = DesignParams()
D = derive(BASE)


def _binom_se(p, n):
    return math.sqrt(p * (1 - p) / n)


def _finish(number, title, failures, elapsed, budget, extra=""):
    ok = not failures and elapsed < budget
    detail = f"{elapsed:.1f}s (budget {budget:g}s)"
    if extra:
        detail += "; " + extra
    if failures:
        detail += "; " + "; ".join(failures[:6])
        if len(failures) > 6:
            detail += f"; ... {len(failures) - 6} more"
    record(number, title, ok, detail)
    assert not failures, "; ".join(failures)
    assert elapsed < budget, f"took {elapsed:.1f}s, budget {budget}s"


def test_criterion_01_borrowing_probability():
    t0 = time.perf_counter()
    got = [borrowing_probability(derive(p)) for p in table1_designs()]
    elapsed = time.perf_counter() - t0
    fails = [f"row {i}: {g:.5f} vs {r}" for i, (g, r) in enumerate(zip(got, BORROW_PROB))
             if abs(g - r) > 5e-4]
    worst = max(abs(g - r) for g, r in zip(got, BORROW_PROB))
    _finish(1, "borrowing probabilities within 5e-4", fails, elapsed, 1.0,
            f"max |err| {worst:.2e}")


def test_criterion_02_approach3_levels():
    t0 = time.perf_counter()
    rows = table1_report(table1_designs(), SPLITS)
    elapsed = time.perf_counter() - t0
    fails = []
    worst = [0.0, 0.0, 0.0]
    for i, row in enumerate(rows):
        ref_star, ref_a1, ref_a2 = APPROACH3[i // 3][i % 3]
        v = row["v"]
        closed_a2 = (1 - v) * ALPHA / (2 * (1 - row["beta_eq"])) * 2
        checks = ((abs(row["alpha2"] - closed_a2), 1e-10, "alpha2 vs closed form"),
                  (abs(row["alpha2"] - ref_a2), 1e-4, "alpha2"),
                  (abs(row["alpha1"] - ref_a1), 1e-3, "alpha1"),
                  (abs(row["alpha_star"] - ref_star), 1e-3, "alpha*"))
        for k, (err, tol, name) in enumerate(checks):
            if k:
                worst[k - 1] = max(worst[k - 1], err)
            if not err <= tol:
                fails.append(f"({row['delta_eq']}, {row['alpha_eq']}, v={v}) {name} err {err:.2e}")
    _finish(2, "Approach-3 levels (alpha2 1e-4, alpha1 1e-3, alpha* 1e-3), 24 cells",
            fails, elapsed, 5.0,
            "max errs a2 {:.1e} a1 {:.1e} a* {:.1e}".format(*worst))


def test_criterion_03_yuan_type1():
    t0 = time.perf_counter()
    got = [yuan_type1_error(derive(p), p.alpha) for p in table1_designs()]
    elapsed = time.perf_counter() - t0
    fails = [f"row {i}: {g:.5f} vs {r}" for i, (g, r) in enumerate(zip(got, YUAN_TYPE1))
             if abs(g - r) > 3e-3]
    worst = max(abs(g - r) for g, r in zip(got, YUAN_TYPE1))
    _finish(3, "Yuan type I error within 3e-3", fails, elapsed, 5.0, f"max |err| {worst:.2e}")


def test_criterion_04_yuan_size_inflation():
    t0 = time.perf_counter()
    rhos = np.linspace(0.1, 0.9, 9)
    ts = np.linspace(0.1, 3.0, 20)
    fails = []
    size = np.empty((9, 20))
    for i, r in enumerate(rhos):
        for j, t in enumerate(ts):
            size[i, j] = yuan_type1_error_std(float(r), float(t), ALPHA)
            if not size[i, j] > ALPHA:
                fails.append(f"rho={r:.2f} t={t:.2f}: {size[i, j]:.6f}")
    # Monte Carlo at five grid points with unit standard errors
    n = 100_000
    z_eq = normal_quantile(0.95)
    policy = RngPolicy(4101)
    for k, (i, j) in enumerate([(0, 0), (2, 7), (4, 10), (6, 14), (8, 19)]):
        r, t = float(rhos[i]), float(ts[j])
        rng = policy.generator(k, 0)
        z2 = rng.standard_normal(n)
        z1 = r * z2 + math.sqrt(1 - r * r) * rng.standard_normal(n)
        one = np.ones(n)
        stats = SummaryStats(z1, z2, one, one, r * one)
        params = DesignParams(alpha=ALPHA, alpha_eq=0.05, delta_eq=t + z_eq)
        p = float(evaluate_batch(MethodSpec.parse("Yuan"), stats, params).reject.mean())
        se = _binom_se(size[i, j], n)
        if abs(p - size[i, j]) > 3 * se:
            fails.append(f"MC rho={r:.2f} t={t:.2f}: {p:.5f} vs {size[i, j]:.5f} (se {se:.5f})")
    elapsed = time.perf_counter() - t0
    _finish(4, "Yuan size > alpha on 9x20 grid, MC agreement on 5 points", fails, elapsed, 120.0,
            f"min inflation {size.min() - ALPHA:.2e}")


CALIBRATED = ["NoBorrow", "A2", "A3@0.25", "A3@0.5", "A3@0.75", "A4", "A1"]


def test_criterion_05_calibration():
    t0 = time.perf_counter()
    res = run_scenario(Scenario(), CALIBRATED, n_reps=100_000, policy=RngPolicy(5001))
    elapsed = time.perf_counter() - t0
    fails = []
    rates = []
    for r in res:
        rates.append(f"{r.method} {r.reject_rate:.4f}")
        if r.method == "A1":
            if not r.reject_rate <= 0.052:
                fails.append(f"A1 {r.reject_rate:.4f} > 0.052")
        elif not abs(r.reject_rate - 0.05) <= 0.0065:
            fails.append(f"{r.method} {r.reject_rate:.4f} outside 0.05 +- 0.0065")
    _finish(5, "calibrated null rejection (10^5 reps)", fails, elapsed, 180.0, ", ".join(rates))


def _a1_outcome(delta, idx, n):
    stats = sample_batch(Scenario(0.0, delta), RngPolicy(6001), idx, n)
    return evaluate_batch(MethodSpec.parse("A1"), stats, BASE)


def test_criterion_06_pooled_bounds():
    t0 = time.perf_counter()
    n = 100_000
    fails = []
    notes = []
    out = _a1_outcome(0.0, 0, n)
    est = out.estimate
    bias, se_bias = float(est.mean()), float(est.std(ddof=1)) / math.sqrt(n)
    var_y = float(est.var(ddof=1))
    notes.append(f"delta=0 bias {bias:.5f} (se {se_bias:.5f}), var {var_y:.5f} vs {D.se_y1 ** 2:.5f}")
    if abs(bias) > 3 * se_bias:
        fails.append("delta=0 bias beyond 3 SE")
    if not var_y < D.se_y1 ** 2:
        fails.append("Var(Y) >= Var(Y1) at delta=0")
    b = pooled_bounds(D, ALPHA)
    for k, delta in enumerate((D.delta_eq, -D.delta_eq), start=1):
        out = _a1_outcome(delta, k, n)
        bias = float(out.estimate.mean())
        rate = float(out.reject.mean())
        notes.append(f"delta={delta:+.2f} bias {bias:.5f}, type I {rate:.5f}")
        if abs(bias) > b.bias_bound:
            fails.append(f"delta={delta:+.2f} |bias| {abs(bias):.5f} > {b.bias_bound:.5f}")
        if rate > b.type1_bound_loose:
            fails.append(f"delta={delta:+.2f} type I {rate:.5f} > bound {b.type1_bound_loose:.5f}")
    elapsed = time.perf_counter() - t0
    notes.append(f"bias bound {b.bias_bound:.5f}, type I bound {b.type1_bound_loose:.5f}")
    _finish(6, "pooled-statistic bias and type I bounds", fails, elapsed, 120.0, "; ".join(notes))


def test_criterion_07_power_prior():
    t0 = time.perf_counter()
    fails = []
    rng = np.random.default_rng(7007)
    grid = np.linspace(0.0, 1.0, 1001)
    worst = 0.0
    for k in range(100):
        ref = ReferencePair(rng.normal(0, 0.3), rng.uniform(0.05, 0.3), rng.normal(0, 0.3),
                            rng.uniform(0.05, 0.3))
        curve = log_marginal_gauss(grid, ref.mu_c, ref.sd_c, ref.mu_r, ref.sd_r)
        a0 = float(fit_alpha0_batch(ref)[0][0])
        err = abs(a0 - grid[np.argmax(curve)])
        worst = max(worst, err)
        if err > 1e-3:
            fails.append(f"config {k}: alpha0 {a0:.4f} vs grid {grid[np.argmax(curve)]:.3f}")
    quad_worst = 0.0
    for k in range(10):
        ref = ReferencePair(rng.normal(0, 0.3), rng.uniform(0.05, 0.3), rng.normal(0, 0.3),
                            rng.uniform(0.05, 0.3))
        for a0 in (0.0, 0.05, 0.4, 1.0):
            closed, quad = marginal_likelihood(a0, ref), marginal_likelihood_quad(a0, ref)
            rel = abs(closed - quad) / abs(quad)
            quad_worst = max(quad_worst, rel)
            if rel > 1e-8:
                fails.append(f"quadrature config {k} a0={a0}: rel err {rel:.1e}")
    deltas = np.round(np.arange(-0.7, 0.71, 0.1), 10)
    rates = {}
    for idx, d in enumerate(deltas):
        r = run_scenario(Scenario(0.0, float(d)), ["PowerPrior"], n_reps=10_000,
                         policy=RngPolicy(7001), scenario_index=idx)[0]
        rates[float(d)] = r.reject_rate
    null = rates[0.0]
    peak_at = max(rates, key=rates.get)
    if not 0.05 <= null <= 0.06:
        fails.append(f"null rejection {null:.4f} outside [0.05, 0.06]")
    if not rates[peak_at] >= 0.12:
        fails.append(f"peak rejection {rates[peak_at]:.4f} < 0.12")
    elapsed = time.perf_counter() - t0
    _finish(7, "power prior: alpha0 fit, marginal likelihood, null/peak rejection", fails,
            elapsed, 180.0,
            f"max alpha0 err {worst:.1e}, max quad rel err {quad_worst:.1e}, null {null:.4f}, "
            f"peak {rates[peak_at]:.4f} at delta={peak_at:+.1f}")


def _tiny_instance(rng, n):
    while True:
        g = rng.integers(0, 3, n)
        if len(set(g.tolist())) < 3:
            continue
        t = rng.permutation(n) + 1.0 + rng.random(n) * 0.5
        e = rng.random(n) < 0.8
        if len(np.unique(t[e])) >= 2:
            return SubjectTable(np.arange(n), np.zeros((n, 0)), g, t, e)


def test_criterion_08_cox():
    t0 = time.perf_counter()
    fails = []
    rng = np.random.default_rng(8008)
    checked = skipped = 0
    worst = 0.0
    for n in range(4, 9):
        for _ in range(80):
            s = _tiny_instance(rng, n)
            fit = cox_fit(s)
            if not fit.converged:
                skipped += 1  # monotone likelihood, the optimum is at infinity
                continue
            X = np.column_stack([s.group == TREATMENT, s.group == RWD]).astype(float)
            ref = brute_force_cox(s.time, s.event, X)
            err = float(np.max(np.abs(fit.coef - ref)))
            ll_err = abs(fit.loglik - partial_loglik_loops(fit.coef, s.time, s.event, X))
            worst = max(worst, err)
            if err > 1e-5 or ll_err > 1e-8:
                fails.append(f"n={n}: coef err {err:.1e}, loglik err {ll_err:.1e}")
            checked += 1
    if checked < 100:
        fails.append(f"only {checked} instances had a finite optimum")

    sc = SurvivalScenario(theta_T=0.7)
    rep = np.random.default_rng(81)
    s, _ = build_trial(sc, rep)
    s = administrative_censor(simulate_outcomes(s, sc, rep), 196, 60.0).subjects
    fit = cox_fit(s)
    g = s.group
    swapped = np.where(g == TREATMENT, CONTROL, np.where(g == CONTROL, TREATMENT, g))
    fit2 = cox_fit(SubjectTable(s.id, s.covariates, swapped, s.time, s.event))
    if not (fit2.coef[0] == -fit.coef[0] or abs(fit2.coef[0] + fit.coef[0]) < 1e-12):
        fails.append(f"antisymmetry: {fit.coef[0]!r} vs {fit2.coef[0]!r}")
    if abs(fit2.coef[1] - (fit.coef[1] - fit.coef[0])) > 1e-12:
        fails.append("antisymmetry of the external contrast")
    anti = abs(fit2.coef[0] + fit.coef[0])

    n = 10_000
    big = SurvivalScenario(theta_T=0.67)
    rng = np.random.default_rng(8080)
    groups = np.repeat([CONTROL, TREATMENT, RWD], n)
    X = generate_registry(3 * n, replace(big, n_registry=3 * n), rng).covariates
    blank = SubjectTable(np.arange(3 * n), X, groups, np.full(3 * n, np.nan),
                         np.zeros(3 * n, bool))
    fit = cox_fit(simulate_outcomes(blank, big, rng), adjust_covariates=True)
    hr = math.exp(fit.coef[0])
    if abs(hr - 0.67) > 0.02:
        fails.append(f"large-n hazard ratio {hr:.4f}")
    elapsed = time.perf_counter() - t0
    _finish(8, "Cox fitter: brute force, antisymmetry, large n", fails, elapsed, 300.0,
            f"{checked} instances (skipped {skipped} monotone), max coef err {worst:.1e}, "
            f"antisymmetry residual {anti:.1e}, HR at n=10^4 per arm {hr:.4f}")


SURV_METHODS = ["NoBorrow", "Yuan", "A1", "A2", "A3", "A4", "PowerPrior"]
LOG_R = [round(x, 1) for x in np.arange(-0.7, 0.71, 0.1)]


def test_criterion_09_survival_patterns():
    t0 = time.perf_counter()
    n = 10_000
    grid = [(0.0, lr) for lr in LOG_R] + [(-0.4, 0.0)]
    rows = survival_oc(SurvivalScenario(), grid, SURV_METHODS, n_reps=n,
                       policy=RngPolicy(9001))
    elapsed = time.perf_counter() - t0
    by = {(r["log_theta_T"], r["log_theta_R"], r["method"]): r for r in rows}
    fails = []
    notes = []

    def rate(lt, lr, m):
        return by[(lt, lr, m)]["reject_rate"]

    def se(lt, lr, m):
        return by[(lt, lr, m)]["mc_se_reject"]

    # (a)
    y = rate(0.0, 0.0, "Yuan")
    if not y > 0.055:
        fails.append(f"(a) Yuan null {y:.4f} <= 0.055")
    for m in ("A1", "A2", "A3@0.5", "A4"):
        if rate(0.0, 0.0, m) > 0.055 + 3 * se(0.0, 0.0, m):
            fails.append(f"(a) {m} null {rate(0.0, 0.0, m):.4f}")
    notes.append("null " + ", ".join(f"{m} {rate(0.0, 0.0, m):.4f}" for m in
                                     ("Yuan", "A1", "A2", "A3@0.5", "A4", "PowerPrior")))
    # (b)
    for m in ("Yuan", "PowerPrior"):
        curve = {lr: rate(0.0, lr, m) for lr in LOG_R}
        peak = max(curve, key=curve.get)
        notes.append(f"{m} peak {curve[peak]:.4f} at {peak:+.1f}")
        if not 0.1 - 1e-9 <= abs(peak) <= 0.3 + 1e-9:
            fails.append(f"(b) {m} peaks at log HR {peak:+.1f}")
    # (c)
    for lr in LOG_R:
        if abs(lr) < 0.5 - 1e-9:
            continue
        for m in ("Yuan", "A1", "A2", "A3@0.5", "A4"):
            b = by[(0.0, lr, m)]["borrow_rate"]
            if not b < 0.02:
                fails.append(f"(c) {m} borrows {b:.4f} at {lr:+.1f}")
        a0 = by[(0.0, lr, "PowerPrior")]["mean_alpha0"]
        if not a0 > 0.05:
            fails.append(f"(c) mean alpha0 {a0:.4f} at {lr:+.1f}")
    notes.append("alpha0 at |logHR|>=0.5: " + ", ".join(
        f"{lr:+.1f}:{by[(0.0, lr, 'PowerPrior')]['mean_alpha0']:.3f}"
        for lr in LOG_R if abs(lr) >= 0.5 - 1e-9))
    # (d)
    order = [["PowerPrior"], ["Yuan"], ["A2", "A3@0.5", "A4"], ["A1"], ["NoBorrow"]]
    for hi_group, lo_group in zip(order, order[1:]):
        for hi in hi_group:
            for lo in lo_group:
                tol = math.hypot(se(-0.4, 0.0, hi), se(-0.4, 0.0, lo))
                if rate(-0.4, 0.0, hi) < rate(-0.4, 0.0, lo) - tol:
                    fails.append(f"(d) {hi} {rate(-0.4, 0.0, hi):.4f} < "
                                 f"{lo} {rate(-0.4, 0.0, lo):.4f} beyond 1 SE")
    notes.append("power " + ", ".join(f"{m} {rate(-0.4, 0.0, m):.4f}" for g in order for m in g))
    failed = max(r["n_failed"] for r in rows)
    notes.append(f"max failed replicates per scenario {failed}")
    _finish(9, "survival pipeline qualitative patterns (10^4 reps)", fails, elapsed, 1800.0,
            "; ".join(notes))


def test_criterion_10_determinism(tmp_path):
    t0 = time.perf_counter()
    fails = []
    configs = {
        "oc-normal": "command: oc-normal\nn_reps: 2000\n",
        "oc-survival": ("command: oc-survival\nn_reps: 200\n"
                        "survival: {log_theta_T: [0.0], log_theta_R: [0.0, 0.3]}\n"),
    }
    for name, text in configs.items():
        cfg = tmp_path / f"{name}.yaml"
        cfg.write_text(text)
        outputs = []
        for run, threads in enumerate(("1", "8", "1")):
            out = tmp_path / f"{name}-{run}.csv"
            code = main(["--config", str(cfg), "--out", str(out), "--threads", threads])
            if code != 0:
                fails.append(f"{name} exited {code}")
                break
            outputs.append(out.read_bytes())
        if len(outputs) == 3 and not outputs[0] == outputs[1] == outputs[2]:
            fails.append(f"{name}: CSV differs between runs")
    elapsed = time.perf_counter() - t0
    _finish(10, "byte-identical CSV at 1 vs 8 threads", fails, elapsed, math.inf,
            ", ".join(configs))
