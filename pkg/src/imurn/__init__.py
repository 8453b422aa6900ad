"""Simulation and asymptotic theory for urn designs with immigration."""

from .designs import build, build_bdu, build_const, build_dl, build_gdl, build_mdl
from .montecarlo import McConfig, McReport, covariance_gap, run_replications, scaling_consistency_check
from .theory import (
    LinearRuleSpec,
    MomentSpec,
    TheoreticalSummary,
    asymptotic_covariance,
    limit_proportions,
    lower_bound,
    summarize,
    validate_assumptions,
)
from .urn import DesignSpec, run

__all__ = [
    "DesignSpec", "LinearRuleSpec", "McConfig", "McReport", "MomentSpec", "TheoreticalSummary",
    "asymptotic_covariance", "build", "build_bdu", "build_const", "build_dl", "build_gdl", "build_mdl",
    "covariance_gap", "limit_proportions", "lower_bound", "run", "run_replications",
    "scaling_consistency_check", "summarize", "validate_assumptions",
]
