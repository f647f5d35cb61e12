"""Command-line front end.

One YAML schema serves every command; blocks a command does not use are
validated but ignored. Flags override file values::

    command: oc-normal          # calibrate | table1 | oc-normal | oc-survival | fit
    design: {n_t: 100, n_c: 100, n_r: 200, var_t: 1, var_c: 1, var_r: 1,
             alpha: 0.05, alpha_eq: 0.05, delta_eq: 0.25}
    methods: [NoBorrow, Yuan, A1, A2, A3@0.5, A4, PowerPrior]
    n_reps: 10000
    seed: 20190101
    threads: 1
    output_path: out.csv
    prior: {mu0: 0, var0: 1.0e6}
    table1: {delta_eqs: [0.25, 0.30], alpha_eqs: [0.05, 0.10, 0.15, 0.20],
             splits: [0.25, 0.5, 0.75], power_delta: null}
    grid: {Delta: [0.0], delta: [-0.7, ..., 0.7]}
    survival: {log_theta_T: [0.0, -0.4], log_theta_R: [...], n_registry: 1000, ...}
    fit: {y1: 0.0, y2: 0.0, se_y1: ..., se_y2: ..., rho: ...}   # or {subjects: file.csv}
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import yaml

from .design import DesignError, DesignParams, SummaryStats, derive
from .methods import MethodSpec, evaluate_one, parse_methods
from .oc import Scenario, sweep, table1_designs, table1_report
from .power_prior import PriorSpec
from .report import write_csv
from .rng import RngPolicy
from .survival import (Baseline, Covariate, SurvivalScenario, cox_fit, read_subjects,
                       survival_oc, to_summary)
from .twostep import (InfeasibleSplit, SplitSpec, approach2_critical, approach3_criticals,
                      approach4_critical, yuan_type1_error)

log = logging.getLogger("hybridtrial")

COMMANDS = ("calibrate", "table1", "oc-normal", "oc-survival", "fit")
DEFAULT_METHODS = ("NoBorrow", "Yuan", "A1", "A2", "A3@0.25", "A3@0.5", "A3@0.75", "A4",
                   "PowerPrior")
DEFAULT_DELTA_GRID = tuple(round(0.1 * k, 1) for k in range(-7, 8))
TOP_KEYS = {"command", "design", "methods", "n_reps", "seed", "threads", "output_path",
            "prior", "table1", "grid", "survival", "fit"}
TABLE1_KEYS = {"delta_eqs", "alpha_eqs", "splits", "power_delta"}
GRID_KEYS = {"Delta", "delta"}
FIT_KEYS = {"y1", "y2", "se_y1", "se_y2", "rho", "subjects", "adjust_covariates"}
SURV_SCALARS = {"n_registry": int, "n_trial": int, "n_external": int, "target_events": int,
                "registry_followup": float, "adjust_covariates": bool}
SURV_KEYS = set(SURV_SCALARS) | {"log_theta_T", "log_theta_R", "baseline", "cox_coeffs",
                                 "enrollment_coeffs", "covariates", "max_fail_frac"}
# survival defaults for the equivalence test differ from the summary-level design
SURVIVAL_TEST_DEFAULTS = {"alpha_eq": 0.10, "delta_eq": 0.30}

EXIT_OK, EXIT_CONFIG, EXIT_ENGINE = 0, 2, 3


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems) if isinstance(problems, (list, tuple)) else [problems]
        super().__init__("; ".join(self.problems))


@dataclass
class RunConfig:
    command: str
    design: DesignParams = DesignParams()
    methods: tuple = DEFAULT_METHODS
    n_reps: int = 10_000
    seed: int = 20190101
    threads: int = 1
    output_path: str | None = None
    prior: PriorSpec = PriorSpec()
    table1: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    survival: dict = field(default_factory=dict)
    fit: dict = field(default_factory=dict)

    def semantic(self) -> dict:
        """Fields that influence the produced numbers, per command."""
        used = {"calibrate": ("design", "methods"),
                "table1": ("design", "table1"),
                "oc-normal": ("design", "methods", "n_reps", "seed", "prior", "grid"),
                "oc-survival": ("design", "methods", "n_reps", "seed", "prior", "survival"),
                "fit": ("design", "methods", "prior", "fit")}[self.command]
        out = {"command": self.command}
        for name in used:
            v = getattr(self, name)
            if hasattr(v, "__dataclass_fields__"):
                v = asdict(v)
            out[name] = v
        return out

    def config_hash(self) -> str:
        blob = json.dumps(_jsonable(self.semantic()), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, float):
        return repr(x)
    return x


def _check_keys(block, allowed, where, problems):
    if block is None:
        return {}
    if not isinstance(block, dict):
        problems.append(f"{where}: expected a mapping")
        return {}
    for k in block:
        if k not in allowed:
            problems.append(f"{where}: unknown key {k!r}")
    return block


def _num_list(value, where, problems, kind=float):
    if value is None:
        return None
    if not isinstance(value, (list, tuple)) or not value:
        problems.append(f"{where}: expected a non-empty list")
        return None
    try:
        return tuple(kind(v) for v in value)
    except (TypeError, ValueError):
        problems.append(f"{where}: entries must be numbers")
        return None


def _positive_int(value, where, problems, minimum=1):
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        problems.append(f"{where} must be an integer >= {minimum}")
        return None
    return value


def build_config(raw: dict, overrides: dict | None = None) -> RunConfig:
    """Validate a parsed mapping (plus flag overrides) into a RunConfig."""
    problems = []
    raw = dict(raw or {})
    for k, v in (overrides or {}).items():
        if v is not None:
            raw[k] = v
    _check_keys(raw, TOP_KEYS, "config", problems)

    command = raw.get("command")
    if command not in COMMANDS:
        problems.append(f"command must be one of {', '.join(COMMANDS)}")
        raise ConfigError(problems)

    design_raw = _check_keys(raw.get("design"), {f.name for f in fields(DesignParams)},
                             "design", problems)
    if command == "oc-survival":
        design_raw = {**SURVIVAL_TEST_DEFAULTS, **design_raw}
    design = DesignParams()
    try:
        design = DesignParams(**design_raw)
    except DesignError as exc:
        problems.append(f"design: {exc}")
    except TypeError as exc:
        problems.append(f"design: {exc}")

    methods = raw.get("methods", DEFAULT_METHODS)
    if not isinstance(methods, (list, tuple)) or not methods:
        problems.append("methods: expected a non-empty list")
        methods = DEFAULT_METHODS
    else:
        try:
            methods = tuple(MethodSpec.parse(m).label for m in methods)
        except ValueError as exc:
            problems.append(f"methods: {exc}")

    n_reps = _positive_int(raw.get("n_reps", 10_000), "n_reps", problems, 100) or 10_000
    seed = raw.get("seed", 20190101)
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2 ** 64:
        problems.append("seed must be an integer in [0, 2^64)")
        seed = 20190101
    threads = _positive_int(raw.get("threads", 1), "threads", problems) or 1
    out = raw.get("output_path")
    if out is not None and not isinstance(out, str):
        problems.append("output_path must be a string")

    prior = PriorSpec()
    prior_raw = _check_keys(raw.get("prior"), {"mu0", "var0"}, "prior", problems)
    try:
        prior = PriorSpec(**{k: float(v) for k, v in prior_raw.items()})
    except (ValueError, TypeError) as exc:
        problems.append(f"prior: {exc}")

    t1 = _check_keys(raw.get("table1"), TABLE1_KEYS, "table1", problems)
    table1 = {"delta_eqs": _num_list(t1.get("delta_eqs", (0.25, 0.30)), "table1.delta_eqs", problems),
              "alpha_eqs": _num_list(t1.get("alpha_eqs", (0.05, 0.10, 0.15, 0.20)),
                                     "table1.alpha_eqs", problems),
              "splits": _num_list(t1.get("splits", (0.25, 0.5, 0.75)), "table1.splits", problems),
              "power_delta": t1.get("power_delta")}
    for v in table1["splits"] or ():
        if not 0 < v < 1:
            problems.append("table1.splits: v must lie in (0, 1)")

    g = _check_keys(raw.get("grid"), GRID_KEYS, "grid", problems)
    grid = {"Delta": _num_list(g.get("Delta", (0.0,)), "grid.Delta", problems),
            "delta": _num_list(g.get("delta", DEFAULT_DELTA_GRID), "grid.delta", problems)}

    s = _check_keys(raw.get("survival"), SURV_KEYS, "survival", problems)
    survival = _survival_block(s, problems)

    f = _check_keys(raw.get("fit"), FIT_KEYS, "fit", problems)
    fit = dict(f)
    if command == "fit" and "subjects" not in f and not {"y1", "y2"} <= set(f):
        problems.append("fit: provide y1 and y2 (optionally se_y1, se_y2, rho) or subjects")

    if problems:
        raise ConfigError(problems)
    cfg = RunConfig(command, design, tuple(methods), n_reps, seed, threads, out, prior,
                    table1, grid, survival, fit)
    if command == "oc-survival":
        try:
            survival_scenario(cfg)
        except ValueError as exc:
            raise ConfigError(f"survival: {exc}") from None
    return cfg


def _survival_block(s, problems) -> dict:
    out = {"log_theta_T": _num_list(s.get("log_theta_T", (0.0, -0.4)), "survival.log_theta_T",
                                    problems),
           "log_theta_R": _num_list(s.get("log_theta_R", DEFAULT_DELTA_GRID),
                                    "survival.log_theta_R", problems),
           "max_fail_frac": float(s.get("max_fail_frac", 0.01))}
    for key, kind in SURV_SCALARS.items():
        if key in s:
            if kind is bool and not isinstance(s[key], bool):
                problems.append(f"survival.{key} must be true or false")
                continue
            try:
                out[key] = kind(s[key])
            except (TypeError, ValueError):
                problems.append(f"survival.{key} must be a {kind.__name__}")
    for key in ("cox_coeffs", "enrollment_coeffs"):
        if key in s:
            out[key] = _num_list(s[key], f"survival.{key}", problems)
    if "baseline" in s:
        b = _check_keys(s["baseline"], {"family", "rate", "shape", "median"},
                        "survival.baseline", problems)
        out["baseline"] = dict(b)
    if "covariates" in s:
        covs = s["covariates"]
        if not isinstance(covs, list):
            problems.append("survival.covariates: expected a list")
        else:
            out["covariates"] = [dict(_check_keys(c, {"kind", "mean", "sd", "p"},
                                                  f"survival.covariates[{i}]", problems))
                                 for i, c in enumerate(covs)]
    return out


def survival_scenario(cfg: RunConfig) -> SurvivalScenario:
    s = cfg.survival
    kw = {k: s[k] for k in SURV_SCALARS if k in s}
    if "baseline" in s:
        kw["baseline"] = Baseline(**s["baseline"])
    if "covariates" in s:
        kw["covariate_model"] = tuple(Covariate(**c) for c in s["covariates"])
    for key in ("cox_coeffs", "enrollment_coeffs"):
        if key in s:
            kw[key] = tuple(s[key])
    kw["test_params"] = cfg.design
    return SurvivalScenario(**kw)


def load_config(path: str | None, overrides: dict) -> RunConfig:
    raw = {}
    if path:
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config file must contain a mapping")
    return build_config(raw, overrides)


# --- commands --------------------------------------------------------------


def _meta(cfg: RunConfig) -> dict:
    return {"hybridtrial": cfg.command, "config_hash": cfg.config_hash(), "seed": cfg.seed}


def _emit(cfg, rows, columns=None):
    if cfg.output_path:
        write_csv(cfg.output_path, rows, _meta(cfg), columns)
        print(f"wrote {len(rows)} rows to {cfg.output_path}")


def cmd_calibrate(cfg: RunConfig):
    d = derive(cfg.design)
    a = cfg.design.alpha
    rows = [{"quantity": "yuan_type1_error", "value": yuan_type1_error(d, a)},
            {"quantity": "borrow_prob", "value": d.borrow_prob},
            {"quantity": "A2_z_star", "value": approach2_critical(d, a)}]
    splits = sorted({MethodSpec.parse(m).split.v for m in cfg.methods
                     if m.startswith("A3")} or {0.5})
    for v in splits:
        try:
            z1, z2 = approach3_criticals(d, a, SplitSpec(v))
        except InfeasibleSplit:
            z1 = z2 = math.nan
        rows.append({"quantity": f"A3_z1_star@{v:g}", "value": z1})
        rows.append({"quantity": f"A3_z2_star@{v:g}", "value": z2})
    rows.append({"quantity": "A4_z_star", "value": approach4_critical(d, a)})
    for r in rows:
        print(f"{r['quantity']:>20s}  {r['value']:.6f}")
    _emit(cfg, rows, ["quantity", "value"])
    return rows


def cmd_table1(cfg: RunConfig):
    t = cfg.table1
    designs = table1_designs(cfg.design, t["delta_eqs"], t["alpha_eqs"])
    rows = table1_report(designs, t["splits"], t["power_delta"])
    for r in rows:
        print(f"delta_eq={r['delta_eq']:.2f} alpha_eq={r['alpha_eq']:.2f} v={r['v']:.2f}  "
              f"yuan={r['type1_yuan']:.4f} alpha*={r['alpha_star']:.4f} "
              f"({r['alpha1']:.4f}/{r['alpha2']:.4f}) borrow={r['borrow_prob']:.4f}")
    _emit(cfg, rows)
    return rows


OC_COLUMNS = ["method", "reject_rate", "borrow_rate", "bias", "mean_alpha0", "mc_se_reject",
              "mc_se_bias", "n_reps", "seed", "n_invalid", "error"]


def cmd_oc_normal(cfg: RunConfig):
    rows = sweep(Scenario(params=cfg.design), cfg.grid["delta"], cfg.grid["Delta"],
                 cfg.methods, cfg.n_reps, RngPolicy(cfg.seed), cfg.prior, cfg.threads)
    _summarize(rows, ("Delta", "delta"))
    _emit(cfg, rows, ["scenario", "Delta", "delta"] + OC_COLUMNS)
    return rows


def cmd_oc_survival(cfg: RunConfig):
    sc = survival_scenario(cfg)
    s = cfg.survival
    grid = [(lt, lr) for lt in s["log_theta_T"] for lr in s["log_theta_R"]]
    rows = survival_oc(sc, grid, cfg.methods, cfg.n_reps, RngPolicy(cfg.seed), cfg.prior,
                       cfg.threads, s["max_fail_frac"])
    _summarize(rows, ("log_theta_T", "log_theta_R"))
    _emit(cfg, rows, ["scenario", "log_theta_T", "log_theta_R"] + OC_COLUMNS + ["n_failed"])
    return rows


def _summarize(rows, keys):
    for r in rows:
        lead = " ".join(f"{k}={r[k]:+.2f}" for k in keys)
        print(f"{lead}  {r['method']:<10s} reject={r['reject_rate']:.4f} "
              f"borrow={r['borrow_rate']:.4f}")


def _fit_stats(cfg: RunConfig) -> SummaryStats:
    f = cfg.fit
    if "subjects" in f:
        subjects = read_subjects(f["subjects"])
        return to_summary(cox_fit(subjects, bool(f.get("adjust_covariates", False))))
    d = derive(cfg.design)
    return SummaryStats(float(f["y1"]), float(f["y2"]), float(f.get("se_y1", d.se_y1)),
                        float(f.get("se_y2", d.se_y2)), float(f.get("rho", d.rho)))


def cmd_fit(cfg: RunConfig):
    stats = _fit_stats(cfg)
    print(f"y1={stats.y1:.6g} y2={stats.y2:.6g} se_y1={stats.se_y1:.6g} "
          f"se_y2={stats.se_y2:.6g} rho={stats.rho:.6g}")
    rows = []
    for spec in parse_methods(cfg.methods):
        try:
            o = evaluate_one(spec, stats, cfg.design, cfg.prior)
            row = {"method": spec.label, "reject": bool(o.reject), "statistic": float(o.statistic),
                   "critical_value": float(o.critical_value), "borrowed": bool(o.borrowed),
                   "estimate": float(o.estimate), "error": ""}
        except InfeasibleSplit as exc:
            row = {"method": spec.label, "reject": None, "statistic": math.nan,
                   "critical_value": math.nan, "borrowed": None, "estimate": math.nan,
                   "error": str(exc)}
        rows.append(row)
    print(f"{'method':<10s} {'reject':>6s} {'stat':>9s} {'crit':>9s} {'borrow':>6s} {'est':>9s}")
    for r in rows:
        print(f"{r['method']:<10s} {str(r['reject']):>6s} {r['statistic']:9.4f} "
              f"{r['critical_value']:9.4f} {str(r['borrowed']):>6s} {r['estimate']:9.4f}")
    _emit(cfg, rows)
    return rows


DISPATCH = {"calibrate": cmd_calibrate, "table1": cmd_table1, "oc-normal": cmd_oc_normal,
            "oc-survival": cmd_oc_survival, "fit": cmd_fit}


def run(cfg: RunConfig):
    return DISPATCH[cfg.command](cfg)


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hybridtrial",
                                description="Hybrid-control trial calibration and simulation.")
    p.add_argument("command", nargs="?", choices=COMMANDS)
    p.add_argument("--config", metavar="PATH")
    p.add_argument("--seed", type=int)
    p.add_argument("--reps", type=int, dest="n_reps")
    p.add_argument("--out", dest="output_path", metavar="PATH")
    p.add_argument("--threads", type=int)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: getattr(args, k) for k in ("command", "seed", "n_reps", "output_path",
                                               "threads")}
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        for msg in exc.problems:
            print(f"config error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with np.errstate(all="ignore"):
            run(cfg)
    except Exception as exc:  # engine failure: report and exit nonzero
        log.debug("engine failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ENGINE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
