"""Tests for EstimatorRegistry."""

import threading

import pytest

from trial_estimands.estimators import Estimand, EstimateReport, Method
from trial_estimands.glm import Link
from trial_estimands.panel import Design, OutcomeFamily, PanelDataset
from trial_estimands.registry import EstimationContext, EstimatorEntry, EstimatorRegistry


@pytest.fixture
def registry() -> EstimatorRegistry:
    return EstimatorRegistry.default()


class TestEstimatorRegistry:
    def test_default_names(self, registry):
        names = registry.names()
        assert "psi_u-ipw" in names
        assert "psi_b-gcomp[probit]" in names
        assert {"pooled_ols", "g_estimation", "pooled_logistic"} <= set(names)
        assert len(names) == 3 * 2 * 3 + 3

    def test_entry_metadata(self, registry):
        entry = registry.get("psi_e-gcomp[logit]")
        assert entry.estimand == Estimand.PSI_E
        assert entry.method == Method.GCOMP
        assert entry.link == Link.LOGIT
        assert registry.get("pooled_ols").estimand is None

    def test_get_unknown(self, registry):
        with pytest.raises(KeyError, match="Available estimators"):
            registry.get("psi_z-ipw")

    def test_duplicate_registration(self, registry):
        with pytest.raises(ValueError, match="already registered"):
            registry.register(registry.get("pooled_ols"))

    def test_register_custom(self):
        registry = EstimatorRegistry()

        def run(ctx: EstimationContext) -> EstimateReport:
            return EstimateReport(estimand=None, method=Method.OLS, point=0.0, se=0.0, ci_lower=0.0, ci_upper=0.0)

        registry.register(EstimatorEntry(name="zero", run=run))
        assert registry.names() == ["zero"]

    def test_concurrent_registration(self):
        registry = EstimatorRegistry()

        def register(i: int) -> None:
            registry.register(EstimatorEntry(name=f"e{i}", run=lambda ctx: None))  # type: ignore[arg-type,return-value]

        threads = [threading.Thread(target=register, args=(i,)) for i in range(20)]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()
        assert len(registry.names()) == 20


class TestForDesign:
    """Tests for choosing estimators by design and outcome family."""

    def test_calendar_continuous(self, registry):
        names = registry.for_design(Design.CALENDAR_TIME, OutcomeFamily.CONTINUOUS)
        assert names == ["psi_u-ipw", "psi_u-gcomp", "psi_e-ipw", "psi_e-gcomp", "pooled_ols"]

    def test_visit_continuous(self, registry):
        names = registry.for_design(Design.VISIT_TIME, OutcomeFamily.CONTINUOUS)
        assert names == ["psi_b-ipw", "psi_b-gcomp", "pooled_ols"]

    def test_binary_link_variants(self, registry):
        names = registry.for_design(Design.VISIT_TIME, OutcomeFamily.BINARY, [Link.LOGIT, Link.PROBIT])
        assert names == [
            "psi_b-ipw[logit]",
            "psi_b-gcomp[logit]",
            "psi_b-ipw[probit]",
            "psi_b-gcomp[probit]",
        ]


class TestEstimationContext:
    """Tests for sharing nuisance fits across estimators."""

    def test_nuisance_fitted_once_per_link(self, visit_ds: PanelDataset):
        ctx = EstimationContext(visit_ds)
        assert ctx.nuisance() is ctx.nuisance()
        assert ctx.nuisance(Link.PROBIT) is not ctx.nuisance()

    def test_run_labels_link_variant(self, registry, binary_visit_ds: PanelDataset):
        ctx = EstimationContext(binary_visit_ds)
        report = registry.run("psi_b-gcomp[probit]", ctx)
        assert report.name == "psi_b-gcomp[probit]"
        assert report.estimand == Estimand.PSI_B

    def test_truncation_only_for_ipw(self, registry, calendar_ds: PanelDataset):
        ctx = EstimationContext(calendar_ds, truncation=95.0)
        assert registry.run("psi_u-ipw", ctx).truncation_percentile == 95.0
        assert registry.run("psi_u-gcomp", ctx).truncation_percentile is None

    def test_comparators_share_context(self, registry, calendar_ds: PanelDataset):
        ctx = EstimationContext(calendar_ds)
        ols = registry.run("pooled_ols", ctx)
        g = registry.run("g_estimation", ctx)
        assert ols.label == "pooled_ols"
        assert g.label == "g_estimation"
