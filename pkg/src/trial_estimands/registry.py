"""Registry of named estimators run by the replicate and analyze commands."""

from __future__ import annotations

import logging
import threading
from collections.abc import Callable, Iterable
from dataclasses import dataclass

from .comparators import g_estimate, pooled_logistic_mle, pooled_ols
from .config import FormulaConfig
from .estimators import Estimand, EstimateReport, Method, NuisanceSet, Scale, estimate, fit_nuisance
from .glm import Link
from .panel import Design, OutcomeFamily, PanelDataset

logger = logging.getLogger(__name__)


class EstimationContext:
    """One dataset plus the working-model fits shared by every estimator run on it.

    Nuisance sets are fitted lazily, once per link variant.
    """

    def __init__(
        self,
        ds: PanelDataset,
        formulas: FormulaConfig | None = None,
        truncation: float | None = None,
        scale: Scale = Scale.RISK_DIFFERENCE,
        level: float = 0.95,
    ) -> None:
        self.ds = ds
        self.formulas = (formulas or FormulaConfig()).resolved(ds)
        self.truncation = truncation
        self.scale = scale
        self.level = level
        self._nuisances: dict[Link | None, NuisanceSet] = {}
        self._lock = threading.Lock()

    def nuisance(self, link: Link | None = None) -> NuisanceSet:
        with self._lock:
            if link not in self._nuisances:
                formulas = self.formulas.with_links(link) if link is not None else self.formulas
                self._nuisances[link] = fit_nuisance(self.ds, formulas)
            return self._nuisances[link]


Runner = Callable[[EstimationContext], EstimateReport]


@dataclass(frozen=True)
class EstimatorEntry:
    """A named estimator.

    ``estimand`` is set for the proposed estimators and None for comparators.
    """

    name: str
    run: Runner
    estimand: Estimand | None = None
    method: Method | None = None
    link: Link | None = None


def _proposed(estimand: Estimand, method: Method, link: Link | None) -> EstimatorEntry:
    suffix = f"[{link.value}]" if link is not None else ""

    def run(ctx: EstimationContext) -> EstimateReport:
        report = estimate(
            ctx.ds,
            ctx.nuisance(link),
            estimand,
            method,
            scale=ctx.scale,
            truncation=ctx.truncation if method == Method.IPW else None,
            level=ctx.level,
        )
        return report.model_copy(update={"label": f"{estimand.value}-{method.value}{suffix}"}) if suffix else report

    return EstimatorEntry(
        name=f"{estimand.value}-{method.value}{suffix}",
        run=run,
        estimand=estimand,
        method=method,
        link=link,
    )


def _pooled_ols(ctx: EstimationContext) -> EstimateReport:
    return pooled_ols(ctx.ds, ctx.formulas.comparator_terms, level=ctx.level)


def _g_estimation(ctx: EstimationContext) -> EstimateReport:
    return g_estimate(ctx.ds, ctx.nuisance().propensity, level=ctx.level)


def _pooled_logistic(ctx: EstimationContext) -> EstimateReport:
    return pooled_logistic_mle(ctx.ds, ctx.formulas.comparator_terms, include_time=True, level=ctx.level)


class EstimatorRegistry:
    """Thread-safe mapping from estimator names to runners."""

    def __init__(self, entries: Iterable[EstimatorEntry] = ()) -> None:
        self._entries: dict[str, EstimatorEntry] = {}
        self._lock = threading.Lock()
        for entry in entries:
            self.register(entry)

    def register(self, entry: EstimatorEntry) -> None:
        with self._lock:
            if entry.name in self._entries:
                raise ValueError(f"Estimator '{entry.name}' is already registered")
            self._entries[entry.name] = entry

    def get(self, name: str) -> EstimatorEntry:
        """Look up an estimator.

        Raises:
            KeyError: If name is not registered
        """
        entry = self._entries.get(name)
        if entry is None:
            available = ", ".join(sorted(self._entries))
            raise KeyError(f"Unknown estimator '{name}'. Available estimators: {available}")
        return entry

    def names(self) -> list[str]:
        return list(self._entries)

    def run(self, name: str, ctx: EstimationContext) -> EstimateReport:
        return self.get(name).run(ctx)

    def for_design(
        self,
        design: Design,
        outcome_family: OutcomeFamily,
        links: Iterable[Link] | None = None,
    ) -> list[str]:
        """Estimators that apply to a design and outcome family.

        Calendar time gets psi_u and psi_e, visit time gets psi_b. Continuous outcomes
        add pooled OLS. ``links`` selects the nuisance link variants for binary outcomes.
        """
        estimands = (
            [Estimand.PSI_U, Estimand.PSI_E] if design == Design.CALENDAR_TIME else [Estimand.PSI_B]
        )
        variants: list[Link | None] = [None]
        if outcome_family == OutcomeFamily.BINARY and links is not None:
            variants = list(links)
        names = [
            _proposed(estimand, method, link).name
            for estimand in estimands
            for link in variants
            for method in (Method.IPW, Method.GCOMP)
        ]
        if outcome_family == OutcomeFamily.CONTINUOUS:
            names.append("pooled_ols")
        for name in names:
            self.get(name)
        return names

    @classmethod
    def default(cls) -> EstimatorRegistry:
        """Registry with every proposed estimator, its link variants and the comparators."""
        entries = [
            _proposed(estimand, method, link)
            for estimand in Estimand
            for method in (Method.IPW, Method.GCOMP)
            for link in (None, Link.LOGIT, Link.PROBIT)
        ]
        entries += [
            EstimatorEntry(name="pooled_ols", run=_pooled_ols, method=Method.OLS),
            EstimatorEntry(name="g_estimation", run=_g_estimation, method=Method.G_ESTIMATION),
            EstimatorEntry(name="pooled_logistic", run=_pooled_logistic, method=Method.MLE),
        ]
        registry = cls(entries)
        logger.debug(f"Registered {len(registry.names())} estimators")
        return registry
