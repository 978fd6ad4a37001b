"""Tests for person-time panel handling."""

import io
import logging

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trial_estimands.errors import SchemaError
from trial_estimands.panel import (
    ColumnSchema,
    Design,
    OutcomeFamily,
    PanelDataset,
    derive_eligibility,
    emit_long_csv,
    emulate_trials,
    ingest_long_csv,
    positivity_diagnostics,
)

VALID_CSV = b"""id,t,elig,treat,y,L_x
1,1,1,0,0.5,0.1
1,2,1,1,0.7,0.2
2,1,1,0,1.5,-0.3
2,2,1,0,1.1,0.4
"""


def _treatments(values: list[list[int]]) -> pd.DataFrame:
    rows = []
    for i, arms in enumerate(values):
        for t, a in enumerate(arms, start=1):
            rows.append({"id": f"p{i}", "t": t, "treat": a, "y": 0.5})
    return pd.DataFrame(rows)


class TestIngestLongCsv:
    """Tests for reading long-format CSV."""

    def test_valid_csv(self):
        ds = ingest_long_csv(VALID_CSV)
        assert ds.tau == 2
        assert ds.n_rows == 4
        assert len(list(ds.observations())) == 4
        assert ds.covariates == ("L_x",)
        assert ds.outcome_family == OutcomeFamily.CONTINUOUS

    def test_ids_read_as_strings(self):
        ds = ingest_long_csv(b"id,t,treat,y\n007,1,0,1\n")
        assert ds.frame["id"].tolist() == ["007"]

    def test_non_monotone_treatment(self):
        csv = b"id,t,treat,y\n1,1,0,0\n1,2,1,0\n2,1,1,0\n2,2,0,0\n"
        with pytest.raises(SchemaError, match="non-monotone"):
            ingest_long_csv(csv)

    def test_missing_elig_derived_treatment_naive(self):
        ds = ingest_long_csv(b"id,t,treat,y\n1,1,0,0\n1,2,1,1\n")
        assert ds.frame["elig"].tolist() == [1, 1]

    def test_supplied_elig_departing_from_rule_is_kept_with_warning(self, caplog):
        csv = b"id,t,elig,treat,y\n1,1,1,0,0\n1,2,0,0,1\n2,1,1,0,1\n2,2,1,1,0\n"
        with caplog.at_level(logging.WARNING, logger="trial_estimands.panel"):
            ds = ingest_long_csv(csv)
        assert ds.frame["elig"].tolist() == [1, 0, 1, 1]
        warnings = [r for r in caplog.records if r.levelno == logging.WARNING]
        assert len(warnings) == 1
        assert "treatment-naive" in warnings[0].getMessage()
        assert "1 rows" in warnings[0].getMessage()

    def test_supplied_elig_following_rule_is_silent(self, caplog):
        with caplog.at_level(logging.WARNING, logger="trial_estimands.panel"):
            ingest_long_csv(VALID_CSV)
        assert not [r for r in caplog.records if r.levelno == logging.WARNING]

    def test_missing_required_column(self):
        with pytest.raises(SchemaError, match="treat") as exc:
            ingest_long_csv(b"id,t,y\n1,1,0\n")
        assert exc.value.column == "treat"

    def test_duplicate_visit(self):
        with pytest.raises(SchemaError, match="Duplicate"):
            ingest_long_csv(b"id,t,treat,y\n1,1,0,0\n1,1,0,1\n")

    def test_gap_in_visits(self):
        with pytest.raises(SchemaError, match="non-contiguous"):
            ingest_long_csv(b"id,t,treat,y\n1,1,0,0\n1,3,0,1\n")

    def test_late_entry_rejected_in_visit_time(self):
        with pytest.raises(SchemaError, match="enters after"):
            ingest_long_csv(b"id,t,treat,y\n1,1,0,0\n2,2,0,1\n")

    def test_late_entry_allowed_in_calendar_time(self):
        ds = ingest_long_csv(b"id,t,treat,y\n1,1,0,0\n2,2,0,1\n", design=Design.CALENDAR_TIME)
        assert ds.at_risk_counts() == {1: 1, 2: 1}

    def test_non_integer_visit(self):
        with pytest.raises(SchemaError, match="integer"):
            ingest_long_csv(b"id,t,treat,y\n1,1.5,0,0\n")

    def test_unparseable_csv(self):
        with pytest.raises(SchemaError):
            ingest_long_csv(b"")

    def test_binary_outcome_inferred(self):
        ds = ingest_long_csv(b"id,t,treat,y\n1,1,0,0\n2,1,1,1\n")
        assert ds.outcome_family == OutcomeFamily.BINARY

    def test_forced_binary_rejects_continuous_values(self):
        with pytest.raises(SchemaError, match="binary outcome"):
            ingest_long_csv(VALID_CSV, outcome_family="binary")

    def test_tau_smaller_than_visits(self):
        with pytest.raises(SchemaError, match="tau"):
            ingest_long_csv(VALID_CSV, tau=1)

    def test_custom_schema(self):
        csv = b"pid,visit,eligible,a,outcome,cov\n1,1,1,0,0.5,0.1\n"
        schema = ColumnSchema(id="pid", t="visit", elig="eligible", treat="a", y="outcome", covariates=["cov"])
        ds = ingest_long_csv(csv, schema)
        assert ds.covariates == ("cov",)
        assert ds.frame["y"].tolist() == [0.5]

    def test_schema_rejects_outcome_delay(self):
        with pytest.raises(ValueError, match="outcome_delay"):
            ColumnSchema(outcome_delay=1)


class TestDerivedColumns:
    """Tests for lags and baseline copies."""

    def test_lags_and_baseline(self):
        ds = ingest_long_csv(VALID_CSV)
        first = ds.frame[ds.frame["id"] == "1"]
        assert first["y_lag"].tolist() == [0.0, 0.5]
        assert first["a_lag"].tolist() == [0, 0]
        assert first["base_L_x"].tolist() == [0.1, 0.1]

    def test_cluster_codes_follow_patients(self):
        ds = ingest_long_csv(VALID_CSV)
        assert ds.cluster_codes.tolist() == [0, 0, 1, 1]
        assert ds.n_patients == 2
        assert ds.baseline_mask.sum() == 2


class TestEmitRoundTrip:
    """Tests for writing the canonical CSV."""

    def test_round_trip(self, visit_ds: PanelDataset):
        buffer = io.StringIO()
        emit_long_csv(visit_ds, buffer)
        back = ingest_long_csv(io.StringIO(buffer.getvalue()), outcome_family=visit_ds.outcome_family)
        pd.testing.assert_frame_equal(back.frame, visit_ds.frame)
        assert back.tau == visit_ds.tau

    def test_custom_schema_round_trip(self, one_trial_ds: PanelDataset):
        schema = ColumnSchema(id="pid", y="outcome")
        buffer = io.StringIO()
        emit_long_csv(one_trial_ds, buffer, schema)
        assert buffer.getvalue().splitlines()[0] == "pid,t,elig,treat,outcome"
        back = ingest_long_csv(io.StringIO(buffer.getvalue()), schema)
        pd.testing.assert_frame_equal(back.frame, one_trial_ds.frame)


class TestDeriveEligibility:
    """Tests for the treatment-naive rule and custom rules."""

    def test_initiation_at_third_visit(self):
        ds = derive_eligibility(PanelDataset.from_frame(_treatments([[0, 0, 1]])))
        assert ds.frame["elig"].tolist() == [1, 1, 1]

    def test_initiation_at_first_visit(self):
        ds = derive_eligibility(PanelDataset.from_frame(_treatments([[1, 1]])))
        assert ds.frame["elig"].tolist() == [1, 0]

    def test_never_treated(self):
        ds = derive_eligibility(PanelDataset.from_frame(_treatments([[0, 0, 0]])))
        assert ds.frame["elig"].tolist() == [1, 1, 1]

    def test_custom_rule(self):
        ds = PanelDataset.from_frame(_treatments([[0, 0, 0]]))
        only_first = derive_eligibility(ds, lambda rows: (rows["t"] == 1).to_numpy())
        assert only_first.frame["elig"].tolist() == [1, 0, 0]

    def test_custom_rule_wrong_length(self):
        ds = PanelDataset.from_frame(_treatments([[0, 0]]))
        with pytest.raises(SchemaError, match="wrong number"):
            derive_eligibility(ds, lambda rows: np.ones(1))

    def test_unknown_rule(self):
        ds = PanelDataset.from_frame(_treatments([[0]]))
        with pytest.raises(SchemaError, match="Unknown eligibility rule"):
            derive_eligibility(ds, "ever_treated")

monotone_histories = st.lists(
    st.tuples(st.integers(min_value=1, max_value=6), st.integers(min_value=0, max_value=6)),
    min_size=1,
    max_size=8,
).map(lambda pairs: [[0] * untreated + [1] * max(length - untreated, 0) for length, untreated in pairs])


class TestEligibilityProperties:
    """Property checks for the treatment-naive rule."""

    @given(monotone_histories)
    @settings(max_examples=50, deadline=None)
    def test_eligible_through_first_initiation(self, histories):
        ds = derive_eligibility(PanelDataset.from_frame(_treatments(histories)))
        for i, arms in enumerate(histories):
            flags = ds.frame.loc[ds.frame["id"] == f"p{i}", "elig"].tolist()
            first = arms.index(1) if 1 in arms else len(arms)
            assert flags == [1] * min(first + 1, len(arms)) + [0] * max(len(arms) - first - 1, 0)

    @given(monotone_histories)
    @settings(max_examples=50, deadline=None)
    def test_idempotent(self, histories):
        once = derive_eligibility(PanelDataset.from_frame(_treatments(histories)))
        twice = derive_eligibility(once)
        pd.testing.assert_frame_equal(once.frame, twice.frame)


class TestEmulateTrials:
    """Tests for per-trial clone expansion."""

    def test_counts(self):
        arms = [[1, 1]] * 4 + [[0, 0]] * 6
        table = emulate_trials(PanelDataset.from_frame(_treatments(arms)))
        assert table.counts == {1: 10, 2: 6}
        assert table.eligibility_proportions == {1: 1.0, 2: 0.6}
        assert len(table.clones) == 16

    def test_nobody_initiates(self):
        table = emulate_trials(PanelDataset.from_frame(_treatments([[0, 0]] * 3)))
        assert (table.clones["arm"] == 0).all()
        assert table.counts == {1: 3, 2: 3}

    def test_empty_trial_reported(self):
        table = emulate_trials(PanelDataset.from_frame(_treatments([[1, 1]] * 2)))
        assert table.empty_trials == [2]


class TestPositivityDiagnostics:
    """Tests for propensity overlap summaries."""

    def test_constant_propensity(self, two_trial_ds: PanelDataset):
        diag = positivity_diagnostics(two_trial_ds, np.full(two_trial_ds.n_rows, 0.5))
        occupied = diag.histogram[diag.histogram["count"] > 0]
        assert occupied["bin_lower"].nunique() == 1
        assert diag.summary["below_threshold"].sum() == 0
        assert diag.summary["above_upper"].sum() == 0

    def test_below_threshold_count(self, one_trial_ds: PanelDataset):
        diag = positivity_diagnostics(one_trial_ds, np.array([0.005, 0.5]), threshold=0.01)
        assert diag.summary["below_threshold"].sum() == 1

    def test_above_upper_count(self, one_trial_ds: PanelDataset):
        diag = positivity_diagnostics(one_trial_ds, np.array([0.999, 0.5]), threshold=0.01)
        assert diag.summary["above_upper"].sum() == 1

    def test_to_frame_joins_summary(self, two_trial_ds: PanelDataset):
        frame = positivity_diagnostics(two_trial_ds, np.full(two_trial_ds.n_rows, 0.5), bins=4).to_frame()
        assert len(frame) == 2 * 2 * 4
        assert {"n", "min", "max", "below_threshold", "above_upper"} <= set(frame.columns)

    def test_ineligible_rows_ignored(self, two_trial_ds: PanelDataset):
        values = np.full(two_trial_ds.n_rows, 0.5)
        values[(two_trial_ds.frame["elig"] == 0).to_numpy()] = np.nan
        diag = positivity_diagnostics(two_trial_ds, values)
        assert diag.summary["n"].sum() == 6

    def test_wrong_length(self, one_trial_ds: PanelDataset):
        with pytest.raises(SchemaError, match="Expected 2"):
            positivity_diagnostics(one_trial_ds, np.array([0.5]))

    def test_outside_unit_interval(self, one_trial_ds: PanelDataset):
        with pytest.raises(SchemaError, match="outside"):
            positivity_diagnostics(one_trial_ds, np.array([1.0, 0.5]))
