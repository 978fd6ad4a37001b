"""Pooled-regression comparators and their Monte Carlo population limits.

These are the estimators that pool eligible person-time rows into one regression:
pooled OLS, the semiparametric g-estimator and the pooled logistic MLE. Their
population limits are weighted mixtures of the trial-specific effects.
"""

from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from typing import Any

import numpy as np

from .audit import audit_logger, timed_operation
from .errors import EstimandUndefinedError
from .estimators.nuisance import varying_terms
from .estimators.report import EstimateReport, Method, Scale
from .estimators.stacks import ParameterStack
from .glm import FittedModel, Link, ModelSpec, RowFilter, fit_arrays, score_contributions
from .mestim import EstimatingSystem, sandwich_variance, wald_ci
from .panel import ELIG, T, TREAT, Y, OutcomeFamily, PanelDataset
from .simgen.dgp import DgpSpec
from .simgen.oracles import PopulationLimit, oracle_draw, ratio_limit

logger = logging.getLogger(__name__)

Array = np.ndarray[Any, np.dtype[np.float64]]


def _eligible_rows(ds: PanelDataset, trial: int | None = None) -> np.ndarray[Any, np.dtype[np.bool_]]:
    mask = RowFilter(t=trial, eligible=True).mask(ds.frame)
    if not mask.any():
        where = f" at t={trial}" if trial is not None else ""
        raise EstimandUndefinedError(f"No eligible rows{where}")
    return mask


def _default_terms(ds: PanelDataset) -> list[str]:
    return [*ds.covariates, "y_lag"]


def _coefficient_report(
    model: FittedModel,
    X: Array,
    y: Array,
    clusters: np.ndarray[Any, Any],
    *,
    method: Method,
    scale: Scale,
    label: str,
    level: float,
    inference: bool,
    duration_ms: float,
) -> EstimateReport:
    index = model.spec.names.index(TREAT)
    point = float(model.coefficients[index])
    se = 0.0
    if inference:
        link = model.spec.link
        system = EstimatingSystem(
            psi=lambda beta: score_contributions(link, X, y, beta),
            dim=model.dim,
            clusters=clusters,
            theta_hat=model.coefficients,
            names=model.spec.names,
            jacobian=(lambda _: -(X.T @ X) / len(np.unique(clusters))) if link is Link.IDENTITY else None,
        )
        se = float(np.sqrt(max(sandwich_variance(system)[index, index], 0.0)))
    lower, upper = wald_ci(point, se, level)
    audit_logger.log_estimate(estimator=label, point=point, se=se, duration_ms=duration_ms)
    return EstimateReport(
        estimand=None,
        method=method,
        scale=scale,
        point=point,
        se=se,
        ci_lower=lower,
        ci_upper=upper,
        level=level,
        label=label,
        n_patients=len(np.unique(clusters)),
        n_rows=len(y),
    )


def pooled_ols(
    ds: PanelDataset,
    terms: Sequence[str] | None = None,
    *,
    trial: int | None = None,
    level: float = 0.95,
    inference: bool = True,
) -> EstimateReport:
    """Treatment coefficient of y ~ 1 + terms + treat over pooled eligible rows.

    The standard error is the patient-clustered sandwich.

    Args:
        ds: Person-time data with a continuous outcome
        terms: Adjustment columns; defaults to the covariates and ``y_lag``
        trial: Restrict to the eligible rows of one trial

    Raises:
        EstimandUndefinedError: Binary outcome or no eligible rows
        RankDeficiencyError: Collinear design
    """
    if ds.outcome_family != OutcomeFamily.CONTINUOUS:
        raise EstimandUndefinedError("Pooled OLS is only reported for continuous outcomes")
    with timed_operation() as timing:
        mask = _eligible_rows(ds, trial)
        rows = ds.frame.loc[mask]
        kept = varying_terms(rows, list(terms) if terms is not None else _default_terms(ds))
        spec = ModelSpec(response=Y, terms=(*kept, TREAT), link=Link.IDENTITY, subset=RowFilter(t=trial, eligible=True))
        X = spec.design(rows)
        y = rows[Y].to_numpy(dtype=np.float64)
        model = fit_arrays(spec, X, y)
    return _coefficient_report(
        model,
        X,
        y,
        ds.cluster_codes[mask],
        method=Method.OLS,
        scale=Scale.RISK_DIFFERENCE,
        label="pooled_ols" if trial is None else f"ols[t={trial}]",
        level=level,
        inference=inference,
        duration_ms=timing["duration_ms"],
    )


def pooled_logistic_mle(
    ds: PanelDataset,
    terms: Sequence[str] | None = None,
    include_time: bool = False,
    trial: int | None = None,
    *,
    link: Link = Link.LOGIT,
    level: float = 0.95,
    inference: bool = True,
) -> EstimateReport:
    """Treatment log-odds ratio from a pooled (or per-trial) logistic regression.

    Raises:
        EstimandUndefinedError: Non-binary outcome or no eligible rows
        SeparationError: Fitted probabilities collapse to 0 or 1
        ConvergenceError: IRLS did not converge
    """
    if ds.outcome_family != OutcomeFamily.BINARY:
        raise EstimandUndefinedError("Pooled logistic regression requires a binary outcome")
    with timed_operation() as timing:
        mask = _eligible_rows(ds, trial)
        rows = ds.frame.loc[mask]
        requested = list(terms) if terms is not None else _default_terms(ds)
        if include_time and trial is None:
            requested.append(T)
        kept = varying_terms(rows, requested)
        spec = ModelSpec(response=Y, terms=(*kept, TREAT), link=link, subset=RowFilter(t=trial, eligible=True))
        X = spec.design(rows)
        y = rows[Y].to_numpy(dtype=np.float64)
        model = fit_arrays(spec, X, y)
    label = "pooled_logistic" if trial is None else f"logistic[t={trial}]"
    return _coefficient_report(
        model,
        X,
        y,
        ds.cluster_codes[mask],
        method=Method.MLE,
        scale=Scale.LOG_ODDS,
        label=label,
        level=level,
        inference=inference,
        duration_ms=timing["duration_ms"],
    )


def fit_pooled_propensity(
    ds: PanelDataset, terms: Sequence[str] | None = None, link: Link = Link.LOGIT
) -> FittedModel:
    """Propensity model fitted once over all eligible rows."""
    mask = _eligible_rows(ds)
    rows = ds.frame.loc[mask]
    kept = varying_terms(rows, list(terms) if terms is not None else _default_terms(ds))
    spec = ModelSpec(response=TREAT, terms=kept, link=link, subset=RowFilter(eligible=True))
    return fit_arrays(spec, spec.design(rows), rows[TREAT].to_numpy(dtype=np.float64))


def g_estimate(
    ds: PanelDataset,
    propensity: FittedModel | Mapping[int, FittedModel],
    *,
    level: float = 0.95,
    inference: bool = True,
) -> EstimateReport:
    """Semiparametric g-estimator sum I(A - pi)Y / sum I(A - pi)A.

    Args:
        ds: Person-time data
        propensity: One pooled model over eligible rows, or one model per trial

    Raises:
        EstimandUndefinedError: Zero denominator (no residual treatment variation)
    """
    with timed_operation() as timing:
        frame = ds.frame
        eligible = (frame[ELIG] == 1).to_numpy()
        if isinstance(propensity, FittedModel):
            blocks = {0: (propensity, np.flatnonzero(eligible))}
        else:
            t_arr = frame[T].to_numpy()
            blocks = {}
            for t, model in sorted(propensity.items()):
                rows = np.flatnonzero(eligible & (t_arr == t))
                if rows.size:
                    blocks[t] = (model, rows)
            if np.flatnonzero(eligible).size != sum(r.size for _, r in blocks.values()):
                raise ValueError("Propensity models do not cover every trial with eligible rows")

        A = frame[TREAT].to_numpy(dtype=np.float64)
        Yv = frame[Y].to_numpy(dtype=np.float64)
        stack = ParameterStack(ds.n_rows)
        designs = {}
        for key, (model, rows) in blocks.items():
            X = model.spec.design(frame.iloc[rows])
            designs[key] = (X, model.spec.link, rows)
            if model.estimated:

                def score(theta: Array, block: Array, key: Any = key, X: Array = X, rows: Any = rows, link: Link = model.spec.link) -> None:
                    block[rows] = score_contributions(link, X, A[rows], stack.get(("propensity", key), theta))

                stack.add(("propensity", key), model.coefficients, score, label=f"propensity[{key}]")
            else:
                stack.fix(("propensity", key), model.coefficients)

        def residuals(theta: Array) -> tuple[Array, Array]:
            resid = np.zeros(ds.n_rows)
            for key, (X, link, rows) in designs.items():
                resid[rows] = A[rows] - link.inverse(X @ stack.get(("propensity", key), theta))
            return resid, eligible.astype(np.float64)

        resid0, weight = residuals(stack.theta_hat)
        numerator = float(np.sum(weight * resid0 * Yv))
        denominator = float(np.sum(weight * resid0 * A))
        if abs(denominator) <= 1e-12 * max(1.0, float(np.sum(weight))):
            raise EstimandUndefinedError("g-estimator undefined: zero denominator (no treatment variation)")
        point = numerator / denominator

        def moment(theta: Array, block: Array) -> None:
            resid, w = residuals(theta)
            block[:, 0] = w * resid * (Yv - stack.get("psi", theta)[0] * A)

        stack.add("psi", point, moment, label="psi")
        se = 0.0
        if inference:
            system = EstimatingSystem(
                psi=stack.psi,
                dim=stack.size,
                clusters=ds.cluster_codes,
                theta_hat=stack.theta_hat,
                names=stack.names,
            )
            index = stack.index("psi")
            se = float(np.sqrt(max(sandwich_variance(system)[index, index], 0.0)))

    lower, upper = wald_ci(point, se, level)
    audit_logger.log_estimate(estimator="g_estimation", point=point, se=se, duration_ms=timing["duration_ms"])
    return EstimateReport(
        estimand=None,
        method=Method.G_ESTIMATION,
        point=point,
        se=se,
        ci_lower=lower,
        ci_upper=upper,
        level=level,
        label="g_estimation",
        n_patients=ds.n_patients,
        n_rows=int(eligible.sum()),
    )


def _ols_projection(X: Array, target: Array) -> Array:
    coef, *_ = np.linalg.lstsq(X, target, rcond=None)
    return X @ coef


def ols_population_limit(
    dgp: DgpSpec,
    mc_n: int = 200_000,
    seed: int = 0,
    terms: Sequence[str] | None = None,
) -> PopulationLimit:
    """Limit of the pooled OLS treatment coefficient.

    pi_tilde is the population least-squares projection of the true propensity on
    (1, terms) over the pooled eligible rows, with ``terms`` defaulting to the
    covariates and ``y_lag`` exactly as in :func:`pooled_ols`. The limit is

        sum E[I pi (1 - pi_tilde)(Y1 - Y0)] + sum E[I (pi - pi_tilde) Y0]
        ------------------------------------------------------------------
                        sum E[I pi (1 - pi_tilde)]

    Raises:
        ConfigError: mc_n below 100000
        EstimandUndefinedError: Zero denominator
    """
    draw, joined = oracle_draw(dgp, mc_n, seed)
    columns = list(varying_terms(joined, list(terms) if terms is not None else _default_terms(draw.dataset)))
    X = np.column_stack([np.ones(len(joined)), joined[columns].to_numpy(dtype=np.float64)])
    pi = joined["pi"].to_numpy()
    pi_tilde = _ols_projection(X, pi)
    mu1, mu0 = joined["mu1"].to_numpy(), joined["mu0"].to_numpy()
    numerator = pi * (1.0 - pi_tilde) * (mu1 - mu0) + (pi - pi_tilde) * mu0
    denominator = pi * (1.0 - pi_tilde)
    limit, mc_se = ratio_limit(numerator, denominator, joined["cluster"].to_numpy(), draw.dataset.n_patients)
    return PopulationLimit(estimator="pooled_ols", limit=limit, mc_se=mc_se, mc_n=mc_n, seed=seed)


def g_population_limit(dgp: DgpSpec, mc_n: int = 200_000, seed: int = 0) -> PopulationLimit:
    """Limit of the g-estimator with a correct propensity model.

    sum E[I pi (1 - pi)(Y1 - Y0)] / sum E[I pi (1 - pi)]

    Raises:
        ConfigError: mc_n below 100000
        EstimandUndefinedError: Var(A_t | history) = 0 on every eligible row
    """
    draw, joined = oracle_draw(dgp, mc_n, seed)
    pi = joined["pi"].to_numpy()
    variance = pi * (1.0 - pi)
    contrast = (joined["mu1"] - joined["mu0"]).to_numpy()
    limit, mc_se = ratio_limit(
        variance * contrast, variance, joined["cluster"].to_numpy(), draw.dataset.n_patients
    )
    return PopulationLimit(estimator="g_estimation", limit=limit, mc_se=mc_se, mc_n=mc_n, seed=seed)

