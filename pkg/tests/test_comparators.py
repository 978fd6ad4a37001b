"""Tests for the pooled-regression comparators and their limits."""

import math

import numpy as np
import pandas as pd
import pytest

from trial_estimands.comparators import (
    fit_pooled_propensity,
    g_estimate,
    g_population_limit,
    ols_population_limit,
    pooled_logistic_mle,
    pooled_ols,
)
from trial_estimands.errors import ConfigError, EstimandUndefinedError
from trial_estimands.estimators import Method, Scale, fit_nuisance
from trial_estimands.glm import FittedModel, Link, ModelSpec, RowFilter
from trial_estimands.panel import PanelDataset
from trial_estimands.simgen import DgpSpec, generate


class TestPooledOls:
    """Tests for the pooled OLS treatment coefficient."""

    def test_unadjusted_difference_in_means(self, one_trial_ds: PanelDataset):
        report = pooled_ols(one_trial_ds, terms=[], inference=False)
        assert report.point == pytest.approx(1.0)
        assert report.method == Method.OLS
        assert report.label == "pooled_ols"
        assert report.estimand is None

    def test_matches_normal_equations(self):
        frame = pd.DataFrame(
            {
                "id": list("abcde"),
                "t": [1] * 5,
                "treat": [1, 0, 1, 0, 1],
                "y": [1.3, 0.2, 2.0, 0.7, 0.9],
                "L_x": [0.2, -0.1, 0.5, 0.3, -0.4],
            }
        )
        ds = PanelDataset.from_frame(frame)
        X = np.column_stack([np.ones(5), frame["L_x"], frame["treat"]])
        beta = np.linalg.solve(X.T @ X, X.T @ frame["y"].to_numpy())
        report = pooled_ols(ds, terms=["L_x"], inference=False)
        assert report.point == pytest.approx(beta[2], abs=1e-10)

    def test_per_trial_label(self, two_trial_ds: PanelDataset):
        report = pooled_ols(two_trial_ds, terms=[], trial=2, inference=False)
        assert report.label == "ols[t=2]"
        assert report.point == pytest.approx(3.0)
        assert report.n_rows == 2

    def test_clustered_se(self, calendar_ds: PanelDataset):
        report = pooled_ols(calendar_ds)
        assert report.se > 0
        assert report.ci_lower < report.point < report.ci_upper

    def test_binary_outcome_rejected(self, binary_one_trial_ds: PanelDataset):
        with pytest.raises(EstimandUndefinedError, match="continuous"):
            pooled_ols(binary_one_trial_ds)

    def test_no_eligible_rows(self, two_trial_ds: PanelDataset):
        ds = two_trial_ds.with_frame(two_trial_ds.frame.assign(elig=0))
        with pytest.raises(EstimandUndefinedError, match="No eligible rows"):
            pooled_ols(ds, terms=[])


class TestPooledLogistic:
    """Tests for the pooled logistic MLE."""

    def test_single_trial_log_odds_ratio(self, binary_one_trial_ds: PanelDataset):
        report = pooled_logistic_mle(binary_one_trial_ds, terms=[], inference=False)
        # Odds 3 among treated, 1 among controls
        assert report.point == pytest.approx(math.log(3), abs=1e-8)
        assert report.scale == Scale.LOG_ODDS
        assert report.label == "pooled_logistic"

    def test_continuous_outcome_rejected(self, one_trial_ds: PanelDataset):
        with pytest.raises(EstimandUndefinedError, match="binary"):
            pooled_logistic_mle(one_trial_ds)

    def test_time_term_with_sandwich(self, binary_visit_ds: PanelDataset):
        report = pooled_logistic_mle(binary_visit_ds, include_time=True)
        assert math.isfinite(report.point)
        assert report.se > 0
        assert report.as_row()["odds_ratio"] == pytest.approx(math.exp(report.point))


class TestGEstimate:
    """Tests for the semiparametric g-estimator."""

    def test_identity_propensity_matches_pooled_ols(self, calendar_ds: PanelDataset):
        propensity = fit_pooled_propensity(calendar_ds, link=Link.IDENTITY)
        g = g_estimate(calendar_ds, propensity, inference=False)
        ols = pooled_ols(calendar_ds, inference=False)
        assert g.point == pytest.approx(ols.point, abs=1e-8)

    def test_per_trial_propensity(self, calendar_ds: PanelDataset):
        nuis = fit_nuisance(calendar_ds)
        report = g_estimate(calendar_ds, nuis.propensity)
        assert report.method == Method.G_ESTIMATION
        assert report.se > 0
        assert report.point == pytest.approx(1.0, abs=0.3)

    def test_matches_ratio_transcription(self):
        frame = pd.DataFrame(
            {
                "id": ["a", "a", "b", "b", "c", "c"],
                "t": [1, 2] * 3,
                "treat": [0, 1, 1, 1, 0, 0],
                "y": [0.4, 1.7, 1.1, 0.3, -0.2, 0.6],
                "L_x": [0.1, 0.9, -0.5, 0.2, 0.7, -0.3],
            }
        )
        ds = PanelDataset.from_frame(frame)
        propensity = FittedModel.fixed(ModelSpec("treat", ("L_x",), Link.LOGIT, subset=RowFilter(eligible=True)), [0.2, 0.8])
        report = g_estimate(ds, propensity, inference=False)

        numerator = denominator = 0.0
        for row in ds.frame.itertuples():
            if row.elig == 1:
                pi = 1.0 / (1.0 + math.exp(-(0.2 + 0.8 * row.L_x)))
                numerator += (row.treat - pi) * row.y
                denominator += (row.treat - pi) * row.treat
        assert report.point == pytest.approx(numerator / denominator, rel=1e-12, abs=1e-12)
        assert report.n_rows == 5

    def test_zero_denominator(self):
        frame = pd.DataFrame({"id": list("abc"), "t": [1] * 3, "treat": [0, 0, 0], "y": [0.1, 0.5, 0.9]})
        ds = PanelDataset.from_frame(frame)
        propensity = FittedModel.fixed(ModelSpec("treat", (), subset=RowFilter(eligible=True)), [0.0])
        with pytest.raises(EstimandUndefinedError, match="zero denominator"):
            g_estimate(ds, propensity, inference=False)

    def test_missing_trial_model(self, two_trial_ds: PanelDataset):
        propensity = {1: FittedModel.fixed(ModelSpec("treat", (), Link.LOGIT), [0.0])}
        with pytest.raises(ValueError, match="do not cover"):
            g_estimate(two_trial_ds, propensity, inference=False)


class TestPopulationLimits:
    """Tests for the comparator limits under a known process."""

    def test_mc_n_floor(self, setting1_calendar: DgpSpec):
        with pytest.raises(ConfigError, match="at least 100000"):
            g_population_limit(setting1_calendar, mc_n=1000)

    @pytest.mark.slow
    def test_constant_effect_limits(self, setting1_calendar: DgpSpec):
        # With a constant effect every weighting of the trial contrasts returns it
        g = g_population_limit(setting1_calendar, mc_n=100_000, seed=3)
        assert g.limit == pytest.approx(1.0, abs=1e-9)
        ols = ols_population_limit(setting1_calendar, mc_n=100_000, seed=3)
        assert np.isfinite(ols.limit)
        assert ols.estimator == "pooled_ols"

    @pytest.mark.slow
    def test_g_limit_between_trial_effects(self):
        # Variance-weighted average of the trial effects 1 and 2
        g = g_population_limit(DgpSpec(effect_schedule="linear"), mc_n=100_000, seed=3)
        assert 1.0 < g.limit < 2.0

    @pytest.mark.slow
    def test_ols_limit_matches_repeated_fits(self):
        dgp = DgpSpec(effect_schedule="linear")
        limit = ols_population_limit(dgp, mc_n=200_000, seed=5)
        fits = [
            pooled_ols(generate(dgp, 20_000, seed=9, replication=r).dataset, inference=False).point
            for r in range(20)
        ]
        assert np.mean(fits) == pytest.approx(limit.limit, abs=0.015)

    @pytest.mark.slow
    def test_ols_limit_follows_terms(self):
        dgp = DgpSpec(effect_schedule="linear")
        default = ols_population_limit(dgp, mc_n=100_000, seed=5)
        explicit = ols_population_limit(dgp, mc_n=100_000, seed=5, terms=["L_x", "y_lag"])
        assert explicit.limit == pytest.approx(default.limit, abs=1e-12)
        unadjusted = ols_population_limit(dgp, mc_n=100_000, seed=5, terms=[])
        assert unadjusted.limit != pytest.approx(default.limit, abs=1e-6)
