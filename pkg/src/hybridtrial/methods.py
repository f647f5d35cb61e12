"""Method identifiers and a single batch dispatcher over all decision rules."""

from __future__ import annotations

from dataclasses import dataclass

from .design import DesignParams, SummaryStats
from .power_prior import PriorSpec, batch_power_prior, pp_test
from .twostep import (BatchOutcome, Method, SplitSpec, TestOutcome, approach1_test,
                      approach2_test, approach3_test, approach4_test, batch_approach1,
                      batch_approach2, batch_approach3, batch_approach4, batch_no_borrow,
                      batch_yuan, no_borrow_test, yuan_test)

ALL_METHODS = ("NoBorrow", "Yuan", "A1", "A2", "A3", "A4", "PowerPrior")


@dataclass(frozen=True)
class MethodSpec:
    """A method plus its tuning; ``A3`` carries a split, written ``A3@0.25``."""

    method: Method
    split: SplitSpec | None = None

    @classmethod
    def parse(cls, text: str) -> "MethodSpec":
        if isinstance(text, MethodSpec):
            return text
        name, _, arg = str(text).partition("@")
        try:
            m = Method(name)
        except ValueError:
            raise ValueError(f"unknown method {name!r}; choose from {', '.join(ALL_METHODS)}")
        if m is Method.A3:
            return cls(m, SplitSpec(float(arg) if arg else 0.5))
        if arg:
            raise ValueError(f"method {name} takes no argument")
        return cls(m)

    @property
    def label(self) -> str:
        if self.method is Method.A3:
            return f"A3@{self.split.v:g}"
        return self.method.value


def parse_methods(items) -> list[MethodSpec]:
    return [MethodSpec.parse(x) for x in items]


def evaluate_batch(spec: MethodSpec, stats: SummaryStats, params: DesignParams,
                   prior: PriorSpec = PriorSpec(), strict: bool = False) -> BatchOutcome:
    m = spec.method
    if m is Method.NO_BORROW:
        out = batch_no_borrow(stats, params)
    elif m is Method.YUAN:
        out = batch_yuan(stats, params)
    elif m is Method.A1:
        out = batch_approach1(stats, params)
    elif m is Method.A2:
        out = batch_approach2(stats, params)
    elif m is Method.A3:
        out = batch_approach3(stats, params, spec.split, strict=strict)
    elif m is Method.A4:
        out = batch_approach4(stats, params)
    else:
        out = batch_power_prior(stats, params, prior)
    out.method = spec.label
    return out


def evaluate_one(spec: MethodSpec, stats: SummaryStats, params: DesignParams,
                 prior: PriorSpec = PriorSpec()) -> TestOutcome:
    m = spec.method
    if m is Method.NO_BORROW:
        out = no_borrow_test(stats, params.alpha)
    elif m is Method.YUAN:
        out = yuan_test(stats, params)
    elif m is Method.A1:
        out = approach1_test(stats, params)
    elif m is Method.A2:
        out = approach2_test(stats, params)
    elif m is Method.A3:
        out = approach3_test(stats, params, spec.split)
    elif m is Method.A4:
        out = approach4_test(stats, params)
    else:
        out = pp_test(stats, params, prior)
    out.method = spec.label
    return out
