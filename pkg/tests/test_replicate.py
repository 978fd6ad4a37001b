"""Tests for Monte Carlo replication studies."""

import io
import math

import pytest

from trial_estimands.config import RuntimeSettings
from trial_estimands.errors import ConfigError, ReplicationAbortedError
from trial_estimands.estimators import Estimand
from trial_estimands.panel import Design
from trial_estimands.pool import WorkerPool
from trial_estimands.simgen import DgpFamily, DgpSpec
from trial_estimands.simgen.oracles import estimand_limit_oracle
from trial_estimands.simgen.replicate import (
    MONTE_CARLO_COLUMNS,
    ReplicationTask,
    replicate_study,
    run_replication,
)

TARGETS = {"psi_u": 1.0, "psi_e": 1.0, "psi_b": 1.0}


class TestRunReplication:
    """Tests for a single replication."""

    def test_records_every_estimator(self, setting1_calendar: DgpSpec):
        task = ReplicationTask(index=0, dgp=setting1_calendar, n=300, seed=1, estimators=("psi_u-ipw", "pooled_ols"))
        outcome = run_replication(task)
        assert outcome.error is None
        point, se, lower, upper = outcome.results["psi_u-ipw"]
        assert lower < point < upper
        assert se > 0

    def test_captures_estimation_errors(self, setting1_calendar: DgpSpec):
        # psi_b is undefined on calendar-time data
        task = ReplicationTask(index=3, dgp=setting1_calendar, n=100, seed=1, estimators=("psi_u-ipw", "psi_b-ipw"))
        outcome = run_replication(task)
        assert outcome.results == {}
        assert outcome.failed_estimator == "psi_b-ipw"
        assert "calendar-time" in (outcome.error or "")


class TestReplicateStudy:
    """Tests for the replication summary table."""

    def test_summary_table(self, setting1_calendar: DgpSpec):
        table = replicate_study(setting1_calendar, ["psi_u-ipw", "psi_e-gcomp", "pooled_ols"], 4, 300, 7, TARGETS)
        frame = table.to_frame()
        assert list(frame.columns) == MONTE_CARLO_COLUMNS
        assert table.reps == 4
        assert table.failures == 0
        # Comparators are summarized against every target given
        assert frame["estimator"].tolist() == ["psi_u-ipw", "psi_e-gcomp", "pooled_ols", "pooled_ols", "pooled_ols"]
        row = table.row("psi_u-ipw")
        assert row.bias == pytest.approx(row.estimate - 1.0)
        assert 0.0 <= row.coverage <= 1.0
        assert row.sd > 0

    def test_same_seed_same_table(self, setting1_calendar: DgpSpec):
        args = (setting1_calendar, ["psi_u-ipw"], 3, 200, 11, TARGETS)
        first = replicate_study(*args).to_frame()
        second = replicate_study(*args, pool=WorkerPool(workers=3)).to_frame()
        assert first.equals(second)

    def test_supplied_pool_stays_open(self, setting1_calendar: DgpSpec):
        pool = WorkerPool(workers=2)
        replicate_study(setting1_calendar, ["psi_u-ipw"], 3, 200, 4, TARGETS, pool=pool)
        stats = pool.stats()
        assert stats["submitted"] == stats["completed"] == 3
        assert not stats["closed"]
        assert pool.map(abs, [-1]) == [1]

    def test_single_replication_sd_is_nan(self, setting1_calendar: DgpSpec):
        table = replicate_study(setting1_calendar, ["psi_u-gcomp"], 1, 200, 2, TARGETS)
        assert math.isnan(table.row("psi_u-gcomp").sd)

    def test_csv_output(self, setting1_calendar: DgpSpec):
        buffer = io.StringIO()
        replicate_study(setting1_calendar, ["psi_u-ipw"], 2, 200, 2, TARGETS).to_csv(buffer)
        assert buffer.getvalue().splitlines()[0] == ",".join(MONTE_CARLO_COLUMNS)

    @pytest.mark.parametrize("reps", [0, -1])
    def test_reps_must_be_positive(self, setting1_calendar: DgpSpec, reps):
        with pytest.raises(ConfigError, match="reps"):
            replicate_study(setting1_calendar, ["psi_u-ipw"], reps, 100, 1, TARGETS)

    def test_unknown_estimator(self, setting1_calendar: DgpSpec):
        with pytest.raises(ConfigError, match="Unknown estimator"):
            replicate_study(setting1_calendar, ["psi_x-ipw"], 1, 100, 1, TARGETS)

    def test_missing_target(self, setting1_calendar: DgpSpec):
        with pytest.raises(ConfigError, match="No target"):
            replicate_study(setting1_calendar, ["psi_e-ipw"], 1, 100, 1, {"psi_u": 1.0})

    def test_failures_abort(self, setting1_calendar: DgpSpec):
        settings = RuntimeSettings(max_failure_rate=0.0)
        with pytest.raises(ReplicationAbortedError) as exc:
            replicate_study(setting1_calendar, ["psi_b-ipw"], 2, 100, 1, TARGETS, settings=settings)
        assert exc.value.failures == 2
        assert exc.value.exit_code == 1


@pytest.mark.slow
class TestAcceptance:
    """Replication-scale checks under the shipped settings."""

    def test_calendar_setting1_unbiased(self, setting1_calendar: DgpSpec):
        names = ["psi_u-ipw", "psi_u-gcomp", "psi_e-ipw", "psi_e-gcomp"]
        table = replicate_study(setting1_calendar, names, 200, 1000, 2024, TARGETS, pool=WorkerPool(workers=4))
        for name in names:
            row = table.row(name)
            assert abs(row.bias) < 0.02
            assert 0.90 <= row.coverage <= 0.985
            assert row.mean_se == pytest.approx(row.sd, rel=0.15)

    def test_visit_setting1_baseline(self, setting1_visit: DgpSpec):
        names = ["psi_b-ipw", "psi_b-gcomp"]
        table = replicate_study(setting1_visit, names, 200, 1000, 2024, TARGETS, pool=WorkerPool(workers=4))
        for name in names:
            assert abs(table.row(name).bias) < 0.03
            assert 0.90 <= table.row(name).coverage <= 0.985

    def test_calendar_setting2_limits(self):
        dgp = DgpSpec(effect_schedule="linear")
        weighted = estimand_limit_oracle(dgp, Estimand.PSI_E, mc_n=200_000, seed=1)
        names = ["psi_u-ipw", "psi_u-gcomp", "psi_e-ipw", "psi_e-gcomp"]
        targets = {"psi_u": 1.5, "psi_e": weighted.limit}
        table = replicate_study(dgp, names, 200, 1000, 2025, targets, pool=WorkerPool(workers=4))
        for name in names:
            row = table.row(name)
            tolerance = 3 * row.sd / math.sqrt(row.reps) + 3 * weighted.mc_se
            assert abs(row.bias) <= tolerance
            assert row.coverage >= 0.90

    def test_visit_setting2_pooled_ols_misses_baseline_target(self):
        dgp = DgpSpec(design=Design.VISIT_TIME, effect_schedule="linear")
        baseline = estimand_limit_oracle(dgp, Estimand.PSI_B, mc_n=200_000, seed=1)
        names = ["psi_b-ipw", "psi_b-gcomp", "pooled_ols"]
        table = replicate_study(dgp, names, 100, 2000, 2026, {"psi_b": baseline.limit}, pool=WorkerPool(workers=4))
        for name in ("psi_b-ipw", "psi_b-gcomp"):
            assert abs(table.row(name).bias) < 0.03
            assert table.row(name).coverage >= 0.88
        # Variance weighting leans towards the smaller t=1 effect
        ols = table.row("pooled_ols")
        assert ols.bias < 0
        assert abs(ols.bias) > 5 * ols.mean_se
        assert ols.coverage < 0.10

    def test_binary_calendar_logit(self):
        dgp = DgpSpec(outcome_family=DgpFamily.BINARY_LOGIT, effect_schedule="linear")
        targets = {
            e.value: estimand_limit_oracle(dgp, e, mc_n=200_000, seed=1).limit
            for e in (Estimand.PSI_U, Estimand.PSI_E)
        }
        names = ["psi_u-ipw", "psi_u-gcomp", "psi_e-ipw", "psi_e-gcomp"]
        table = replicate_study(dgp, names, 200, 1000, 2027, targets, pool=WorkerPool(workers=4))
        for name in names:
            assert abs(table.row(name).bias) <= 0.012
            assert table.row(name).coverage >= 0.90

    def test_binary_visit_probit_links_agree(self):
        dgp = DgpSpec(
            design=Design.VISIT_TIME,
            outcome_family=DgpFamily.BINARY_PROBIT_FRAILTY,
            gamma=(0.0, 1.0, 1.0, 0.0),
            effect_schedule="linear",
        )
        baseline = estimand_limit_oracle(dgp, Estimand.PSI_B, mc_n=200_000, seed=1)
        names = [f"psi_b-{method}[{link}]" for method in ("ipw", "gcomp") for link in ("logit", "probit")]
        table = replicate_study(dgp, names, 200, 1000, 2028, {"psi_b": baseline.limit}, pool=WorkerPool(workers=4))
        for method in ("ipw", "gcomp"):
            logit, probit = table.row(f"psi_b-{method}[logit]"), table.row(f"psi_b-{method}[probit]")
            assert abs(probit.bias - logit.bias) <= 0.005
            assert logit.coverage >= 0.90
            assert probit.coverage >= 0.90
