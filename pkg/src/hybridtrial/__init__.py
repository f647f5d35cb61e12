"""Hybrid-control trial designs: two-step borrowing tests, calibrated variants,
a power-prior comparator and simulation engines for their operating characteristics."""

from .design import DerivedDesign, DesignParams, SummaryStats, derive, borrowing_probability
from .methods import ALL_METHODS, MethodSpec, evaluate_batch, evaluate_one
from .rng import RngPolicy

__all__ = ["DerivedDesign", "DesignParams", "SummaryStats", "derive", "borrowing_probability",
           "ALL_METHODS", "MethodSpec", "evaluate_batch", "evaluate_one", "RngPolicy"]
__version__ = "0.1.0"
