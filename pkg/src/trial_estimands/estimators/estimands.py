"""The proposed estimators of the three model-free estimands.

Each estimator aggregates trial-specific counterfactual means over the sequence of
emulated trials, either by inverse probability weighting or by G-computation:

- ``psi_u`` weights every trial equally,
- ``psi_e`` weights trials by their share of eligible individuals,
- ``psi_b`` standardizes each trial to the baseline covariate distribution.
"""

from __future__ import annotations

import logging
import math
from typing import Any

import numpy as np
import pandas as pd

from ..audit import audit_logger, timed_operation
from ..config import FormulaConfig
from ..errors import EstimandUndefinedError, PositivityError
from ..mestim import EstimatingSystem, delta_method, sandwich_variance, wald_ci
from ..panel import OutcomeFamily, PanelDataset
from .nuisance import NuisanceSet, fit_nuisance
from .report import Estimand, EstimateReport, Method, Scale
from .stacks import EstimandStack, build_estimand_stack

logger = logging.getLogger(__name__)


def estimate(
    ds: PanelDataset,
    nuis: NuisanceSet | None = None,
    estimand: Estimand | str = Estimand.PSI_U,
    method: Method | str = Method.IPW,
    *,
    scale: Scale | str = Scale.RISK_DIFFERENCE,
    truncation: float | None = None,
    level: float = 0.95,
    inference: bool = True,
    formulas: FormulaConfig | None = None,
) -> EstimateReport:
    """Estimate one estimand with one method on one scale.

    Args:
        ds: Person-time data
        nuis: Fitted or supplied nuisances; fitted from ``formulas`` when omitted
        estimand: psi_u, psi_e or psi_b
        method: ipw or gcomp
        scale: Risk difference, or log odds for binary outcomes
        truncation: Percentile at which inverse weights are capped (IPW only)
        level: Confidence level of the Wald interval
        inference: Compute the sandwich standard error; when False the report
            carries se = 0 and a degenerate interval
        formulas: Working-model conditioning sets used when ``nuis`` is omitted

    Raises:
        PositivityError: A positivity condition of the estimand fails
        EstimandUndefinedError: psi_b on calendar-time data, or the odds scale
            on a non-binary outcome or an arm mean at 0 or 1
    """
    estimand, method, scale = Estimand(estimand), Method(method), Scale(scale)
    if scale == Scale.LOG_ODDS and ds.outcome_family != OutcomeFamily.BINARY:
        raise EstimandUndefinedError("The log-odds scale requires a binary outcome")
    label = f"{estimand.value}-{method.value}"
    if truncation is not None and method != Method.IPW:
        logger.debug(f"Truncation ignored for {label}")
        truncation = None

    with timed_operation() as timing:
        if nuis is None:
            nuis = fit_nuisance(ds, formulas, baseline=estimand == Estimand.PSI_B)
        try:
            built = build_estimand_stack(ds, nuis, estimand, method, truncation)
        except PositivityError as e:
            audit_logger.log_positivity_violation(e.assumption, e.trial, e.message)
            raise

        point, gradient = _contrast(built, scale)
        se = _standard_error(ds, built, gradient) if inference else 0.0

    lower, upper = wald_ci(point, se, level)
    audit_logger.log_estimate(
        estimator=label if scale == Scale.RISK_DIFFERENCE else f"{label}[logodds]",
        point=point,
        se=se,
        duration_ms=timing["duration_ms"],
        truncation=truncation,
    )
    return EstimateReport(
        estimand=estimand,
        method=method,
        scale=scale,
        point=point,
        se=se,
        ci_lower=lower,
        ci_upper=upper,
        level=level,
        truncation_percentile=truncation,
        mean_treated=built.mean_treated,
        mean_control=built.mean_control,
        n_patients=ds.n_patients,
        n_rows=ds.n_rows,
    )


def _contrast(built: EstimandStack, scale: Scale) -> tuple[float, np.ndarray[Any, np.dtype[np.float64]]]:
    m1, m0 = built.mean_treated, built.mean_control
    gradient = np.zeros(built.stack.size)
    i1, i0 = built.arm_indices
    if scale == Scale.RISK_DIFFERENCE:
        gradient[i1], gradient[i0] = 1.0, -1.0
        return m1 - m0, gradient
    for arm, mean in (("treated", m1), ("control", m0)):
        if not 0.0 < mean < 1.0:
            raise EstimandUndefinedError(f"Logit undefined: {arm} arm mean is {mean:.6g}")
    gradient[i1] = 1.0 / (m1 * (1.0 - m1))
    gradient[i0] = -1.0 / (m0 * (1.0 - m0))
    return _logit(m1) - _logit(m0), gradient


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def _standard_error(
    ds: PanelDataset, built: EstimandStack, gradient: np.ndarray[Any, np.dtype[np.float64]]
) -> float:
    stack = built.stack
    system = EstimatingSystem(
        psi=stack.psi,
        dim=stack.size,
        clusters=ds.cluster_codes,
        theta_hat=stack.theta_hat,
        names=stack.names,
    )
    vcov = sandwich_variance(system)
    return delta_method(gradient, vcov)


def estimate_psi_u(
    ds: PanelDataset, nuis: NuisanceSet | None = None, method: Method | str = Method.IPW, **kwargs: Any
) -> EstimateReport:
    """Uniformly weighted average of the trial-specific effects."""
    return estimate(ds, nuis, Estimand.PSI_U, method, **kwargs)


def estimate_psi_e(
    ds: PanelDataset, nuis: NuisanceSet | None = None, method: Method | str = Method.IPW, **kwargs: Any
) -> EstimateReport:
    """Trial effects weighted by P(I_t=1) / sum_j P(I_j=1); empty trials get zero weight."""
    return estimate(ds, nuis, Estimand.PSI_E, method, **kwargs)


def estimate_psi_b(
    ds: PanelDataset, nuis: NuisanceSet | None = None, method: Method | str = Method.IPW, **kwargs: Any
) -> EstimateReport:
    """Trial effects standardized to the baseline population (visit-time data only)."""
    return estimate(ds, nuis, Estimand.PSI_B, method, **kwargs)


def estimate_odds_scale(
    ds: PanelDataset,
    nuis: NuisanceSet | None,
    estimand: Estimand | str,
    method: Method | str,
    **kwargs: Any,
) -> EstimateReport:
    """logit(M1) - logit(M0) of the aggregated arm means.

    The logit is applied after averaging over trials.
    """
    return estimate(ds, nuis, estimand, method, scale=Scale.LOG_ODDS, **kwargs)


def trial_contrasts(
    ds: PanelDataset,
    nuis: NuisanceSet | None = None,
    method: Method | str = Method.IPW,
    estimand: Estimand | str = Estimand.PSI_U,
    *,
    truncation: float | None = None,
    formulas: FormulaConfig | None = None,
) -> pd.DataFrame:
    """Per-trial arm means and contrasts behind an aggregated estimate.

    Columns: t, at_risk, eligible, p_eligible, weight, mean_treated,
    mean_control, contrast. Under psi_b the arm means are standardized to the
    baseline population.
    """
    estimand = Estimand(estimand)
    if nuis is None:
        nuis = fit_nuisance(ds, formulas, baseline=estimand == Estimand.PSI_B)
    built = build_estimand_stack(ds, nuis, estimand, Method(method), truncation)
    return pd.DataFrame(
        [
            {
                "t": s.t,
                "at_risk": s.at_risk,
                "eligible": s.eligible,
                "p_eligible": s.p_eligible,
                "weight": s.weight,
                "mean_treated": s.mean_treated,
                "mean_control": s.mean_control,
                "contrast": s.contrast,
            }
            for s in built.trials
        ]
    )
