"""Monte Carlo replication studies: bias, standard error, SD and coverage."""

from __future__ import annotations

import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Any

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from ..audit import audit_logger, timed_operation
from ..config import FormulaConfig, RuntimeSettings, get_settings
from ..errors import ConfigError, EstimandsError, ReplicationAbortedError
from ..estimators import Estimand
from ..logging_config import get_logger_with_context
from ..pool import WorkerPool
from ..registry import EstimationContext, EstimatorEntry, EstimatorRegistry
from .dgp import DgpSpec, generate

logger = logging.getLogger(__name__)

MONTE_CARLO_COLUMNS = [
    "estimator",
    "estimand",
    "method",
    "estimate",
    "bias",
    "mean_se",
    "sd",
    "coverage",
    "target",
    "reps",
    "n",
]


class MonteCarloRow(BaseModel):
    """Summary of one estimator against one target."""

    model_config = ConfigDict(frozen=True)

    estimator: str
    estimand: str
    method: str
    estimate: float
    bias: float
    mean_se: float
    sd: float = Field(description="Empirical SD; NaN with fewer than two replications")
    coverage: float = Field(ge=0.0, le=1.0)
    target: float
    reps: int
    n: int


@dataclass(frozen=True)
class MonteCarloTable:
    """Replication-study summary table."""

    rows: tuple[MonteCarloRow, ...]
    reps: int
    n: int
    failures: int = 0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([row.model_dump() for row in self.rows], columns=MONTE_CARLO_COLUMNS)

    def to_csv(self, sink: str | Path | IO[str]) -> None:
        self.to_frame().to_csv(sink, index=False, float_format="%.10g", lineterminator="\n")

    def row(self, estimator: str, estimand: str | None = None) -> MonteCarloRow:
        for row in self.rows:
            if row.estimator == estimator and (estimand is None or row.estimand == estimand):
                return row
        raise KeyError(f"No row for estimator '{estimator}'")


@dataclass(frozen=True)
class ReplicationTask:
    index: int
    dgp: DgpSpec
    n: int
    seed: int
    estimators: tuple[str, ...]
    formulas: FormulaConfig | None = None
    truncation: float | None = None
    level: float = 0.95


@dataclass
class ReplicationOutcome:
    index: int
    # estimator -> (point, se, ci_lower, ci_upper)
    results: dict[str, tuple[float, float, float, float]] = field(default_factory=dict)
    error: str | None = None
    failed_estimator: str = ""


def run_replication(task: ReplicationTask) -> ReplicationOutcome:
    """Generate one dataset and run every requested estimator on it.

    Estimation errors are captured in the outcome rather than raised.
    """
    log = get_logger_with_context(__name__, replication=task.index)
    registry = EstimatorRegistry.default()
    outcome = ReplicationOutcome(index=task.index)
    current = "generate"
    try:
        data = generate(task.dgp, task.n, task.seed, replication=task.index)
        ctx = EstimationContext(data.dataset, task.formulas, task.truncation, level=task.level)
        for name in task.estimators:
            current = name
            report = registry.run(name, ctx)
            outcome.results[name] = (report.point, report.se, report.ci_lower, report.ci_upper)
    except (EstimandsError, ValueError, np.linalg.LinAlgError) as e:
        outcome.results.clear()
        outcome.error = str(e)
        outcome.failed_estimator = current
        log.debug(f"Replication failed in {current}: {e}")
    return outcome


def _targets_for(entry: EstimatorEntry, targets: Mapping[str, float]) -> list[tuple[str, float]]:
    if entry.name in targets:
        return [(entry.estimand.value if entry.estimand else "", float(targets[entry.name]))]
    if entry.estimand is not None:
        if entry.estimand.value not in targets:
            raise ConfigError(f"No target for {entry.name} ({entry.estimand.value})")
        return [(entry.estimand.value, float(targets[entry.estimand.value]))]
    matched = [(e.value, float(targets[e.value])) for e in Estimand if e.value in targets]
    if not matched:
        raise ConfigError(f"No target for comparator {entry.name}")
    return matched


def _summarize(
    name: str,
    method: str,
    estimand: str,
    target: float,
    values: np.ndarray[Any, np.dtype[np.float64]],
    reps: int,
    n: int,
) -> MonteCarloRow:
    points, ses, lower, upper = values.T
    mean = float(points.mean())
    return MonteCarloRow(
        estimator=name,
        estimand=estimand,
        method=method,
        estimate=mean,
        bias=mean - target,
        mean_se=float(ses.mean()),
        sd=float(points.std(ddof=1)) if len(points) > 1 else math.nan,
        coverage=float(np.mean((lower <= target) & (target <= upper))),
        target=target,
        reps=reps,
        n=n,
    )


def replicate_study(
    dgp: DgpSpec,
    estimators: Sequence[str],
    reps: int,
    n: int,
    master_seed: int,
    targets: Mapping[str, float],
    *,
    formulas: FormulaConfig | None = None,
    truncation: float | None = None,
    level: float = 0.95,
    settings: RuntimeSettings | None = None,
    pool: WorkerPool | None = None,
) -> MonteCarloTable:
    """Run ``reps`` replications and summarize each estimator against its target.

    Args:
        dgp: Data-generating process
        estimators: Registered estimator names
        reps: Number of replications (at least 1)
        n: Participants per replication
        master_seed: Seed from which replication r draws stream key r
        targets: Limits keyed by estimator name or by estimand (psi_u, psi_e, psi_b);
            comparators are summarized against every estimand target given

    Raises:
        ConfigError: Invalid reps/n, unknown estimator or missing target
        ReplicationAbortedError: Failed replications exceed the failure budget
    """
    if reps < 1:
        raise ConfigError("reps must be at least 1")
    if n < 1:
        raise ConfigError("n must be at least 1")
    settings = settings or get_settings()
    registry = EstimatorRegistry.default()
    try:
        entries = [registry.get(name) for name in estimators]
    except KeyError as e:
        raise ConfigError(str(e.args[0])) from e
    row_targets = {entry.name: _targets_for(entry, targets) for entry in entries}

    owned = pool is None
    pool = pool or WorkerPool.from_settings(settings)
    tasks = [
        ReplicationTask(
            index=r,
            dgp=dgp,
            n=n,
            seed=master_seed,
            estimators=tuple(estimators),
            formulas=formulas,
            truncation=truncation,
            level=level,
        )
        for r in range(reps)
    ]
    with timed_operation() as timing:
        outcomes = pool.map(run_replication, tasks)
    logger.debug(f"Worker pool after study: {pool.stats()}")
    if owned:
        pool.close()

    failed = [o for o in outcomes if o.error is not None]
    for outcome in failed:
        audit_logger.log_replication_failure(outcome.index, outcome.failed_estimator, outcome.error or "")
    if len(failed) > settings.max_failure_rate * reps or len(failed) == reps:
        raise ReplicationAbortedError(
            f"{len(failed)} of {reps} replications failed "
            f"(budget {settings.max_failure_rate:.1%}); first error: {failed[0].error}",
            failures=len(failed),
            reps=reps,
        )
    succeeded = [o for o in outcomes if o.error is None]
    if failed:
        logger.warning(f"Excluded {len(failed)} failed replications of {reps}")

    rows = []
    for entry in entries:
        values = np.array([o.results[entry.name] for o in succeeded], dtype=np.float64)
        method = entry.method.value if entry.method else ""
        for estimand, target in row_targets[entry.name]:
            rows.append(_summarize(entry.name, method, estimand, target, values, len(succeeded), n))

    audit_logger.log_study(
        reps=reps,
        n=n,
        failures=len(failed),
        estimators=len(entries),
        duration_ms=timing["duration_ms"],
    )
    return MonteCarloTable(rows=tuple(rows), reps=len(succeeded), n=n, failures=len(failed))
