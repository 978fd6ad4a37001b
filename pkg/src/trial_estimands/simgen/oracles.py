"""Monte Carlo population limits of the estimands.

Limits are computed on one large draw from the counterfactual table, using the
expected counterfactual means rather than the realized potential outcomes.
Standard errors come from per-patient influence contributions.
"""

from __future__ import annotations

import logging
import math
from typing import Any

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict

from ..cache import memoized
from ..errors import ELIGIBILITY_POSITIVITY, ConfigError, EstimandUndefinedError, PositivityError
from ..estimators.report import Estimand
from ..panel import ELIG, ID, T, Design
from .dgp import DgpSpec, SimulatedData, generate

logger = logging.getLogger(__name__)

Array = np.ndarray[Any, np.dtype[np.float64]]

MIN_MC_N = 100_000
# Replication key reserved for oracle draws
ORACLE_STREAM = 2**31 - 1
POLYNOMIAL_DEGREE = 3


class PopulationLimit(BaseModel):
    """Population limit of an estimator with its Monte Carlo standard error."""

    model_config = ConfigDict(frozen=True)

    estimator: str
    limit: float
    mc_se: float
    mc_n: int
    seed: int

    def to_record(self) -> dict[str, Any]:
        return self.model_dump()


def oracle_draw(dgp: DgpSpec, mc_n: int, seed: int) -> tuple[SimulatedData, pd.DataFrame]:
    """Large draw with counterfactuals, joined to the eligible rows.

    Returns:
        The draw and a frame of eligible rows carrying the counterfactual columns
        plus the integer patient code ``cluster``.

    Raises:
        ConfigError: mc_n below the precision floor
    """
    if mc_n < MIN_MC_N:
        raise ConfigError(f"mc_n must be at least {MIN_MC_N}, got {mc_n}")
    spec = dgp if dgp.emit_counterfactuals else dgp.model_copy(update={"emit_counterfactuals": True})
    draw = generate(spec, mc_n, seed, replication=ORACLE_STREAM)
    ds = draw.dataset
    assert draw.counterfactuals is not None
    eligible = (ds.frame[ELIG] == 1).to_numpy()
    rows = ds.frame.loc[eligible].reset_index(drop=True)
    cf = draw.counterfactuals
    if len(cf) != len(rows) or not (cf[ID].to_numpy() == rows[ID].to_numpy()).all():
        raise RuntimeError("Counterfactual table is not aligned with the eligible rows")
    joined = pd.concat([rows, cf.drop(columns=[ID, T])], axis=1)
    joined["cluster"] = ds.cluster_codes[eligible]
    return draw, joined


def per_patient(values: Array, clusters: np.ndarray[Any, Any], n_patients: int) -> Array:
    return np.bincount(clusters, weights=values, minlength=n_patients)


def ratio_limit(
    numerator: Array, denominator: Array, clusters: np.ndarray[Any, Any], n_patients: int
) -> tuple[float, float]:
    """Ratio of sums with its per-patient influence standard error.

    Raises:
        EstimandUndefinedError: Zero denominator
    """
    den_total = float(np.sum(denominator))
    if abs(den_total) <= 1e-12 * max(1.0, float(np.sum(np.abs(denominator)))):
        raise EstimandUndefinedError("Population limit undefined: zero denominator")
    ratio = float(np.sum(numerator)) / den_total
    num_i = per_patient(numerator, clusters, n_patients)
    den_i = per_patient(denominator, clusters, n_patients)
    influence = (num_i - ratio * den_i) / (den_total / n_patients)
    return ratio, float(np.std(influence, ddof=1) / math.sqrt(n_patients))


def _trial_moments(
    joined: pd.DataFrame, draw: SimulatedData
) -> tuple[list[int], dict[int, tuple[Array, Array, Array]]]:
    """Per-patient contrast sums, eligible counts and at-risk counts per trial."""
    ds = draw.dataset
    m = ds.n_patients
    contrast = (joined["mu1"] - joined["mu0"]).to_numpy()
    t_elig = joined[T].to_numpy()
    clusters = joined["cluster"].to_numpy()
    t_all = ds.frame[T].to_numpy()
    moments = {}
    for t in range(1, ds.tau + 1):
        at_t = t_elig == t
        moments[t] = (
            per_patient(contrast[at_t], clusters[at_t], m),
            per_patient(np.ones(int(at_t.sum())), clusters[at_t], m),
            per_patient(np.ones(int((t_all == t).sum())), ds.cluster_codes[t_all == t], m),
        )
    return list(range(1, ds.tau + 1)), moments


def _uniform_limit(joined: pd.DataFrame, draw: SimulatedData) -> tuple[float, float]:
    trials, moments = _trial_moments(joined, draw)
    m = draw.dataset.n_patients
    total, influence = 0.0, np.zeros(m)
    for t in trials:
        s, e, _ = moments[t]
        e_bar = e.mean()
        if e_bar == 0.0:
            raise PositivityError(f"trial {t} is empty in the oracle draw", ELIGIBILITY_POSITIVITY, trial=t)
        theta = s.mean() / e_bar
        total += theta / len(trials)
        influence += (s - theta * e) / e_bar / len(trials)
    return total, float(np.std(influence, ddof=1) / math.sqrt(m))


def _eligible_limit(joined: pd.DataFrame, draw: SimulatedData) -> tuple[float, float]:
    trials, moments = _trial_moments(joined, draw)
    m = draw.dataset.n_patients
    num = den = 0.0
    inf_num, inf_den = np.zeros(m), np.zeros(m)
    for t in trials:
        s, e, r = moments[t]
        r_bar = r.mean()
        if r_bar == 0.0:
            continue
        a, b = s.mean() / r_bar, e.mean() / r_bar
        num, den = num + a, den + b
        inf_num += (s - a * r) / r_bar
        inf_den += (e - b * r) / r_bar
    if den == 0.0:
        raise PositivityError("every trial is empty in the oracle draw", ELIGIBILITY_POSITIVITY)
    limit = num / den
    influence = (inf_num - limit * inf_den) / den
    return limit, float(np.std(influence, ddof=1) / math.sqrt(m))


def _polynomial(values: Array) -> Array:
    columns = [np.ones(values.shape[0])]
    for k in range(values.shape[1]):
        columns.extend(values[:, k] ** d for d in range(1, POLYNOMIAL_DEGREE + 1))
    return np.column_stack(columns)


def _baseline_limit(joined: pd.DataFrame, draw: SimulatedData) -> tuple[float, float]:
    ds = draw.dataset
    if ds.design != Design.VISIT_TIME:
        raise EstimandUndefinedError("psi_b is undefined for calendar-time data")
    m = ds.n_patients
    base = ds.frame.loc[ds.baseline_mask]
    base_codes = ds.cluster_codes[ds.baseline_mask]
    X_base = _polynomial(base[list(ds.baseline_columns)].to_numpy(dtype=np.float64))
    x_bar = X_base.mean(axis=0)
    n_base = X_base.shape[0]

    contrast = (joined["mu1"] - joined["mu0"]).to_numpy()
    t_elig = joined[T].to_numpy()
    clusters = joined["cluster"].to_numpy()
    X_elig_all = _polynomial(joined[list(ds.baseline_columns)].to_numpy(dtype=np.float64))

    total, influence = 0.0, np.zeros(m)
    tau = ds.tau
    for t in range(1, tau + 1):
        at_t = t_elig == t
        if not at_t.any():
            raise PositivityError(f"trial {t} is empty in the oracle draw", ELIGIBILITY_POSITIVITY, trial=t)
        X = X_elig_all[at_t]
        coef, *_ = np.linalg.lstsq(X, contrast[at_t], rcond=None)
        fitted_base = X_base @ coef
        value = float(fitted_base.mean())
        total += value / tau
        # Linearization of the regression plus the baseline average
        gram = X.T @ X / n_base
        direction = np.linalg.solve(gram, x_bar)
        residual = contrast[at_t] - X @ coef
        influence += per_patient(X @ direction * residual, clusters[at_t], m) / tau
        influence += per_patient(fitted_base - value, base_codes, m) / tau
    return total, float(np.std(influence[np.unique(base_codes)], ddof=1) / math.sqrt(n_base))


@memoized("estimand_limit_oracle")
def estimand_limit_oracle(
    dgp: DgpSpec, estimand: Estimand | str, mc_n: int = 200_000, seed: int = 0
) -> PopulationLimit:
    """Population value of psi_u, psi_e or psi_b under ``dgp``.

    Raises:
        ConfigError: mc_n below 100000
        PositivityError: An empty trial under psi_u or psi_b
        EstimandUndefinedError: psi_b for a calendar-time design
    """
    estimand = Estimand(estimand)
    if estimand == Estimand.PSI_B and dgp.design != Design.VISIT_TIME:
        raise EstimandUndefinedError("psi_b is undefined for calendar-time data")
    draw, joined = oracle_draw(dgp, mc_n, seed)
    compute = {
        Estimand.PSI_U: _uniform_limit,
        Estimand.PSI_E: _eligible_limit,
        Estimand.PSI_B: _baseline_limit,
    }[estimand]
    limit, mc_se = compute(joined, draw)
    logger.info(f"{estimand.value} limit {limit:.5f} (MC SE {mc_se:.2g}, mc_n={mc_n})")
    return PopulationLimit(estimator=estimand.value, limit=limit, mc_se=mc_se, mc_n=mc_n, seed=seed)
