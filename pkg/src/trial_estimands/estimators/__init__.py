"""Proposed estimators of the sequential-trial estimands."""

from .estimands import (
    estimate,
    estimate_odds_scale,
    estimate_psi_b,
    estimate_psi_e,
    estimate_psi_u,
    trial_contrasts,
)
from .nuisance import ConditionalEligibility, NuisanceSet, fit_nuisance, propensity_scores
from .report import Estimand, EstimateReport, Method, Scale, reports_frame
from .weights import truncate_weights, weight_cap

__all__ = [
    "ConditionalEligibility",
    "Estimand",
    "EstimateReport",
    "Method",
    "NuisanceSet",
    "Scale",
    "estimate",
    "estimate_odds_scale",
    "estimate_psi_b",
    "estimate_psi_e",
    "estimate_psi_u",
    "fit_nuisance",
    "propensity_scores",
    "reports_frame",
    "trial_contrasts",
    "truncate_weights",
    "weight_cap",
]
