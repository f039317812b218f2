"""Detection of correlated coordinate sets under a budgeted, possibly adaptive, sensing protocol."""
from __future__ import annotations

from .divergence import (adaptive_lower_bound, class_complexity, d_bound, kl_chi2_scale,
                         kl_normalized, kl_unnormalized, nonadaptive_lower_bound)
from .model import ClassKind, ContaminationClass, ModelKind, ProblemInstance, sample_rounds
from .risk import Procedure, RiskEstimate, estimate_risk, hoeffding_ci
from .sensing import Budget, BudgetRefused, History, SensingSession, run_session

__version__ = "0.1.0"

__all__ = [
    "Budget", "BudgetRefused", "ClassKind", "ContaminationClass", "History", "ModelKind",
    "ProblemInstance", "Procedure", "RiskEstimate", "SensingSession", "adaptive_lower_bound",
    "class_complexity", "d_bound", "estimate_risk", "hoeffding_ci", "kl_chi2_scale",
    "kl_normalized", "kl_unnormalized", "nonadaptive_lower_bound", "run_session", "sample_rounds",
]
