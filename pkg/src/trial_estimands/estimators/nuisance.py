"""Working-model fits shared by the IPW and G-computation estimators."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import pandas as pd

from ..audit import audit_logger
from ..config import FormulaConfig
from ..errors import PARTICIPATION_POSITIVITY, TREATMENT_POSITIVITY, PositivityError
from ..glm import FittedModel, Link, ModelSpec, RowFilter, fit_arrays, predict_mean
from ..panel import A_LAG, ELIG, T, TREAT, Y, Design, PanelDataset

logger = logging.getLogger(__name__)

Array = np.ndarray[Any, np.dtype[np.float64]]


@dataclass(frozen=True, eq=False)
class ConditionalEligibility:
    """P(I_t = 1 | L_1) for one trial.

    Exactly one representation applies: a logistic ``model`` over baseline rows,
    ``complement_of_propensity`` (1 minus the t=1 propensity at the baseline row),
    or neither, meaning every baseline patient is eligible and the probability is 1.
    """

    model: FittedModel | None = None
    complement_of_propensity: bool = False


@dataclass(frozen=True, eq=False)
class NuisanceSet:
    """Fitted (or supplied) nuisance quantities keyed by trial.

    Attributes:
        propensity: P(A_t=1 | W_t, I_t=1) per trial.
        outcome: E(Y_t | A_t, W_t, I_t=1) per trial, with ``treat`` among its terms.
        eligibility_marginal: P(I_t=1) per trial.
        eligibility_conditional: P(I_t=1 | L_1) per trial (baseline-adjusted only).
        baseline_regression: Regression of predicted outcomes on L_1 keyed (t, arm).
        supplied: True when values were given externally and are held fixed
            when stacking estimating equations.
    """

    propensity: dict[int, FittedModel] = field(default_factory=dict)
    outcome: dict[int, FittedModel] = field(default_factory=dict)
    eligibility_marginal: dict[int, float] = field(default_factory=dict)
    eligibility_conditional: dict[int, ConditionalEligibility] = field(default_factory=dict)
    baseline_regression: dict[tuple[int, int], FittedModel] = field(default_factory=dict)
    supplied: bool = False

    def __post_init__(self) -> None:
        for t, p in self.eligibility_marginal.items():
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"P(I_{t}=1) = {p} outside [0, 1]")


def eligibility_proportions(ds: PanelDataset) -> dict[int, float]:
    """Sample proportion of eligible among at-risk rows at each t."""
    at_risk = ds.at_risk_counts()
    eligible = ds.eligible_counts()
    return {t: (eligible[t] / at_risk[t]) if at_risk[t] else 0.0 for t in at_risk}


def varying_terms(rows: pd.DataFrame, terms: list[str] | tuple[str, ...]) -> tuple[str, ...]:
    """Drop terms that are constant on ``rows`` (e.g. y_lag at t=1)."""
    kept = []
    for term in terms:
        values = rows[term].to_numpy(dtype=np.float64)
        if values.size and np.ptp(values) > 0.0:
            kept.append(term)
        else:
            logger.debug(f"Dropping constant term '{term}'")
    return tuple(kept)


def fit_nuisance(
    ds: PanelDataset,
    formulas: FormulaConfig | None = None,
    *,
    baseline: bool | None = None,
) -> NuisanceSet:
    """Fit the per-trial working models.

    Args:
        ds: Person-time data with eligibility
        formulas: Conditioning sets and links; defaults resolve against ``ds``
        baseline: Also fit the baseline-adjusted nuisances; defaults to True for
            visit-time data

    Raises:
        PositivityError: A non-empty trial without treatment variation
    """
    formulas = (formulas or FormulaConfig()).resolved(ds)
    if baseline is None:
        baseline = ds.design == Design.VISIT_TIME
    frame = ds.frame
    counts = ds.eligible_counts()

    propensity: dict[int, FittedModel] = {}
    outcome: dict[int, FittedModel] = {}
    for t in range(1, ds.tau + 1):
        if counts[t] == 0:
            continue
        rows = frame.loc[(frame[T] == t) & (frame[ELIG] == 1)]
        treated = rows[TREAT].to_numpy()
        if treated.min() == treated.max():
            raise PositivityError(
                f"all {counts[t]} eligible rows at t={t} have A={int(treated[0])}",
                TREATMENT_POSITIVITY,
                trial=t,
            )
        propensity[t] = _fit_on_rows(
            ModelSpec(
                response=TREAT,
                terms=varying_terms(rows, formulas.propensity_terms or []),
                link=formulas.propensity_link,
                subset=RowFilter(t=t, eligible=True),
            ),
            rows,
        )
        outcome_link = formulas.outcome_link or Link.IDENTITY
        outcome[t] = _fit_on_rows(
            ModelSpec(
                response=Y,
                terms=(TREAT, *varying_terms(rows, formulas.outcome_terms or [])),
                link=outcome_link,
                subset=RowFilter(t=t, eligible=True),
            ),
            rows,
        )

    conditional: dict[int, ConditionalEligibility] = {}
    regressions: dict[tuple[int, int], FittedModel] = {}
    if baseline and ds.design == Design.VISIT_TIME:
        conditional = _fit_conditional_eligibility(ds, formulas, propensity)
        regressions = _fit_baseline_regressions(ds, formulas, outcome)

    return NuisanceSet(
        propensity=propensity,
        outcome=outcome,
        eligibility_marginal=eligibility_proportions(ds),
        eligibility_conditional=conditional,
        baseline_regression=regressions,
    )


def _fit_on_rows(spec: ModelSpec, rows: pd.DataFrame) -> FittedModel:
    model = fit_arrays(spec, spec.design(rows), rows[spec.response].to_numpy(dtype=np.float64))
    audit_logger.log_model_fit(
        response=spec.response,
        link=spec.link.value,
        trial=spec.subset.t,
        n_used=model.n_used,
        iterations=model.iterations,
    )
    return model


def baseline_eligibility(ds: PanelDataset, t: int) -> Array:
    """I_t for every baseline patient (0 when the patient is no longer at risk)."""
    frame = ds.frame
    codes = ds.cluster_codes
    flags = np.zeros(ds.n_patients)
    at_t = (frame[T] == t).to_numpy()
    flags[codes[at_t]] = frame.loc[at_t, ELIG].to_numpy(dtype=np.float64)
    return flags[codes[ds.baseline_mask]]


def _follows_treatment_naive(ds: PanelDataset) -> bool:
    return bool((ds.frame[ELIG] == 1 - ds.frame[A_LAG]).all())


def _fit_conditional_eligibility(
    ds: PanelDataset, formulas: FormulaConfig, propensity: dict[int, FittedModel]
) -> dict[int, ConditionalEligibility]:
    base_rows = ds.frame.loc[ds.baseline_mask]
    n_base = len(base_rows)
    at_risk = ds.at_risk_counts()
    terms = tuple(formulas.eligibility_terms or ())
    result: dict[int, ConditionalEligibility] = {}
    for t in range(1, ds.tau + 1):
        flags = baseline_eligibility(ds, t)
        if np.all(flags == 1.0):
            result[t] = ConditionalEligibility()
            continue
        if not np.any(flags == 1.0):
            raise PositivityError(
                f"no baseline patient is eligible at t={t}", PARTICIPATION_POSITIVITY, trial=t
            )
        reuse = (
            ds.tau == 2
            and t == 2
            and at_risk[2] == n_base
            and 1 in propensity
            and _follows_treatment_naive(ds)
            and bool((base_rows[ELIG] == 1).all())
        )
        if reuse:
            result[t] = ConditionalEligibility(complement_of_propensity=True)
            continue
        spec = ModelSpec(
            response=f"elig[t={t}]",
            terms=varying_terms(base_rows, terms),
            link=Link.LOGIT,
        )
        model = fit_arrays(spec, spec.design(base_rows), flags)
        result[t] = ConditionalEligibility(model=model)
    return result


def _fit_baseline_regressions(
    ds: PanelDataset, formulas: FormulaConfig, outcome: dict[int, FittedModel]
) -> dict[tuple[int, int], FittedModel]:
    frame = ds.frame
    terms = tuple(formulas.eligibility_terms or ())
    regressions: dict[tuple[int, int], FittedModel] = {}
    for t, model in outcome.items():
        rows = frame.loc[(frame[T] == t) & (frame[ELIG] == 1)]
        kept = varying_terms(rows, terms)
        for arm in (1, 0):
            predicted = predict_mean(model, rows, {TREAT: arm})
            spec = ModelSpec(response=f"m{arm}[t={t}]", terms=kept, link=Link.IDENTITY)
            regressions[(t, arm)] = fit_arrays(spec, spec.design(rows), predicted)
    return regressions


def propensity_scores(ds: PanelDataset, nuis: NuisanceSet) -> Array:
    """Fitted propensity per dataset row (NaN on rows without a trial model or ineligible)."""
    frame = ds.frame
    scores = np.full(ds.n_rows, np.nan)
    for t, model in nuis.propensity.items():
        mask = ((frame[T] == t) & (frame[ELIG] == 1)).to_numpy()
        if mask.any():
            scores[mask] = predict_mean(model, frame.loc[mask])
    return scores
