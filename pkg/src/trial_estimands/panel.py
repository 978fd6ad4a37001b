"""Person-time panel data: schema, CSV interchange, eligibility and trial emulation."""

from __future__ import annotations

import io
import logging
from collections.abc import Callable, Iterator
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import IO, Any

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from .errors import SchemaError

logger = logging.getLogger(__name__)

# Canonical column names of PanelDataset.frame
ID, T, ELIG, TREAT, Y, Y_LAG, A_LAG = "id", "t", "elig", "treat", "y", "y_lag", "a_lag"
BASELINE_PREFIX = "base_"

TREATMENT_NAIVE = "treatment_naive"

# A custom eligibility rule maps one patient's rows (sorted by t) to 0/1 flags
EligibilityRule = Callable[[pd.DataFrame], "np.ndarray[Any, Any]"]

CsvSource = str | Path | bytes | IO[bytes] | IO[str]


class Design(str, Enum):
    VISIT_TIME = "visit_time"
    CALENDAR_TIME = "calendar_time"


class OutcomeFamily(str, Enum):
    CONTINUOUS = "continuous"
    BINARY = "binary"


class ColumnSchema(BaseModel):
    """Mapping from CSV column names to panel roles."""

    id: str = Field(default="id", min_length=1)
    t: str = Field(default="t", min_length=1)
    elig: str = Field(default="elig", min_length=1)
    treat: str = Field(default="treat", min_length=1)
    y: str = Field(default="y", min_length=1)
    covariate_prefix: str = Field(default="L_", min_length=1)
    covariates: list[str] | None = Field(
        default=None, description="Explicit covariate columns; overrides the prefix"
    )
    outcome_delay: int = Field(default=0, description="Reserved; only 0 is supported")

    def model_post_init(self, __context: Any) -> None:
        if self.outcome_delay != 0:
            raise ValueError("outcome_delay other than 0 is not supported")
        roles = [self.id, self.t, self.elig, self.treat, self.y]
        if len(set(roles)) != len(roles):
            raise ValueError("column roles must map to distinct names")


@dataclass(frozen=True)
class Observation:
    """One person-time record."""

    patient_id: str
    t: int
    eligible: int
    treated: int
    covariates: dict[str, float]
    outcome: float
    lagged_outcome: float
    baseline_covariates: dict[str, float]


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Validated long-format person-time data.

    Attributes:
        frame: Canonical columns id, t, elig, treat, y, y_lag, a_lag, the covariates
            and their ``base_`` baseline copies, sorted by (id, t). Treat as read-only.
        tau: Number of trial time points.
        design: Visit-time or calendar-time trial structure.
        outcome_family: Continuous or binary outcome.
        covariates: Names of the time-varying covariate columns.
    """

    frame: pd.DataFrame
    tau: int
    design: Design
    outcome_family: OutcomeFamily
    covariates: tuple[str, ...] = field(default=())

    @classmethod
    def from_frame(
        cls,
        frame: pd.DataFrame,
        *,
        design: Design | str = Design.VISIT_TIME,
        outcome_family: OutcomeFamily | str | None = None,
        covariates: list[str] | tuple[str, ...] | None = None,
        tau: int | None = None,
    ) -> PanelDataset:
        """Validate a frame with canonical role columns and derive lags and baselines.

        A missing ``elig`` column is derived with the treatment-naive rule.

        Raises:
            SchemaError: On any violation of the panel invariants
        """
        design = Design(design)
        for column in (ID, T, TREAT, Y):
            if column not in frame.columns:
                raise SchemaError(f"Missing required column '{column}'", column=column)

        if covariates is None:
            covariates = [c for c in frame.columns if c.startswith("L_")]
        covariates = tuple(covariates)
        for column in covariates:
            if column not in frame.columns:
                raise SchemaError(f"Missing covariate column '{column}'", column=column)

        keep = [ID, T, TREAT, Y, *covariates] + ([ELIG] if ELIG in frame.columns else [])
        data = frame.loc[:, keep].copy()
        data[ID] = data[ID].astype(str)

        t_values = pd.to_numeric(data[T], errors="coerce")
        if t_values.isna().any() or not np.all(np.mod(t_values, 1) == 0):
            raise SchemaError("Visit index t must be integer-valued", column=T)
        data[T] = t_values.astype(np.int64)
        if (data[T] < 1).any():
            raise SchemaError("Visit index t must be >= 1", column=T)

        for column in (TREAT, *covariates, Y):
            values = pd.to_numeric(data[column], errors="coerce")
            if values.isna().any():
                raise SchemaError(f"Missing or non-numeric values in '{column}'", column=column)
            data[column] = values.astype(np.float64)

        _require_binary(data[TREAT], TREAT, "treatment")
        data[TREAT] = data[TREAT].astype(np.int64)

        if outcome_family is None:
            outcome_family = (
                OutcomeFamily.BINARY if data[Y].isin((0.0, 1.0)).all() else OutcomeFamily.CONTINUOUS
            )
        outcome_family = OutcomeFamily(outcome_family)
        if outcome_family == OutcomeFamily.BINARY:
            _require_binary(data[Y], Y, "binary outcome")

        if data.duplicated([ID, T]).any():
            dup = data.loc[data.duplicated([ID, T]), [ID, T]].iloc[0]
            raise SchemaError(f"Duplicate (id, t) pair ({dup[ID]}, {dup[T]})")

        data = data.sort_values([ID, T], kind="mergesort").reset_index(drop=True)
        grouped = data.groupby(ID, sort=False)

        gaps = grouped[T].diff().fillna(1) != 1
        if gaps.any():
            bad = data.loc[gaps, ID].iloc[0]
            raise SchemaError(f"Patient {bad} has non-contiguous visits")

        drops = grouped[TREAT].diff().fillna(0) < 0
        if drops.any():
            bad = data.loc[drops, ID].iloc[0]
            raise SchemaError(f"Patient {bad}: treatment non-monotone (initiated then stopped)")

        if design == Design.VISIT_TIME:
            late = grouped[T].transform("first") != 1
            if late.any():
                bad = data.loc[late, ID].iloc[0]
                raise SchemaError(
                    f"Patient {bad} enters after t=1; visit-time data only allows exit"
                )

        max_t = int(data[T].max()) if len(data) else 0
        if tau is None:
            tau = max_t
        elif tau < max_t:
            raise SchemaError(f"tau={tau} is smaller than the largest visit index {max_t}")
        if tau < 1:
            raise SchemaError("Dataset has no rows")

        data[Y_LAG] = grouped[Y].shift(1).fillna(0.0)
        data[A_LAG] = grouped[TREAT].shift(1).fillna(0).astype(np.int64)
        for column in covariates:
            data[BASELINE_PREFIX + column] = grouped[column].transform("first")

        if ELIG in data.columns:
            values = pd.to_numeric(data[ELIG], errors="coerce")
            if values.isna().any():
                raise SchemaError("Missing values in 'elig'", column=ELIG)
            _require_binary(values, ELIG, "eligibility")
            data[ELIG] = values.astype(np.int64)
        else:
            data[ELIG] = 1 - data[A_LAG]

        ordered = [ID, T, ELIG, TREAT, Y, Y_LAG, A_LAG, *covariates]
        ordered += [BASELINE_PREFIX + c for c in covariates]
        return cls(
            frame=data[ordered],
            tau=int(tau),
            design=design,
            outcome_family=outcome_family,
            covariates=covariates,
        )

    @property
    def baseline_columns(self) -> tuple[str, ...]:
        return tuple(BASELINE_PREFIX + c for c in self.covariates)

    @property
    def n_rows(self) -> int:
        return len(self.frame)

    @cached_property
    def cluster_codes(self) -> np.ndarray[Any, np.dtype[np.int64]]:
        """Integer patient code per row, used as the sandwich cluster."""
        codes, _ = pd.factorize(self.frame[ID], sort=False)
        return codes.astype(np.int64)

    @property
    def n_patients(self) -> int:
        return int(self.cluster_codes.max()) + 1 if self.n_rows else 0

    @cached_property
    def baseline_mask(self) -> np.ndarray[Any, np.dtype[np.bool_]]:
        """Rows at t=1: one per patient of the baseline population."""
        return (self.frame[T] == 1).to_numpy()

    def at_risk_counts(self) -> dict[int, int]:
        """Rows present at each t."""
        counts = self.frame[T].value_counts()
        return {t: int(counts.get(t, 0)) for t in range(1, self.tau + 1)}

    def eligible_counts(self) -> dict[int, int]:
        """Eligible rows n_t at each t."""
        counts = self.frame.loc[self.frame[ELIG] == 1, T].value_counts()
        return {t: int(counts.get(t, 0)) for t in range(1, self.tau + 1)}

    def observations(self) -> Iterator[Observation]:
        """Iterate rows as Observation records."""
        base = self.baseline_columns
        for row in self.frame.itertuples(index=False):
            values = row._asdict()
            yield Observation(
                patient_id=values[ID],
                t=int(values[T]),
                eligible=int(values[ELIG]),
                treated=int(values[TREAT]),
                covariates={c: float(values[c]) for c in self.covariates},
                outcome=float(values[Y]),
                lagged_outcome=float(values[Y_LAG]),
                baseline_covariates={
                    c: float(values[b]) for c, b in zip(self.covariates, base)
                },
            )

    def with_frame(self, frame: pd.DataFrame) -> PanelDataset:
        """Copy with a replacement frame and the same metadata, revalidated."""
        return PanelDataset.from_frame(
            frame,
            design=self.design,
            outcome_family=self.outcome_family,
            covariates=self.covariates,
            tau=self.tau,
        )


def _require_binary(values: pd.Series, column: str, role: str) -> None:
    if not values.isin((0, 1)).all():
        raise SchemaError(f"Non-binary {role} value in '{column}'", column=column)


def ingest_long_csv(
    source: CsvSource,
    schema: ColumnSchema | None = None,
    *,
    design: Design | str = Design.VISIT_TIME,
    outcome_family: OutcomeFamily | str | None = None,
    tau: int | None = None,
) -> PanelDataset:
    """Read a long-format person-time CSV into a validated PanelDataset.

    Args:
        source: Path, raw bytes, or an open text/binary stream
        schema: Column-name mapping (defaults: id, t, elig, treat, y, L_*)
        design: Trial structure the rows follow
        outcome_family: Forced outcome family; inferred from the values when None
        tau: Number of trials; defaults to the largest visit index

    Raises:
        SchemaError: If the file cannot be parsed or violates the schema
    """
    schema = schema or ColumnSchema()
    if isinstance(source, bytes):
        source = io.BytesIO(source)

    try:
        raw = pd.read_csv(source, dtype={schema.id: str}, encoding="utf-8")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise SchemaError(f"Could not parse CSV: {e}") from e

    if schema.covariates is not None:
        covariates = list(schema.covariates)
    else:
        covariates = [c for c in raw.columns if str(c).startswith(schema.covariate_prefix)]

    for role, column in (("id", schema.id), ("t", schema.t), ("treat", schema.treat), ("y", schema.y)):
        if column not in raw.columns:
            raise SchemaError(f"Missing required column '{column}' ({role})", column=column)

    renames = {schema.id: ID, schema.t: T, schema.treat: TREAT, schema.y: Y}
    if schema.elig in raw.columns:
        renames[schema.elig] = ELIG
    frame = raw.rename(columns=renames)
    ds = PanelDataset.from_frame(
        frame,
        design=design,
        outcome_family=outcome_family,
        covariates=covariates,
        tau=tau,
    )
    if ELIG in frame.columns:
        departures = int((ds.frame[ELIG] != 1 - ds.frame[A_LAG]).sum())
        if departures:
            logger.warning(
                f"Supplied '{schema.elig}' differs from the treatment-naive rule on {departures} rows; "
                "it is used as given"
            )
    logger.info(
        f"Ingested {ds.n_rows} rows for {ds.n_patients} patients "
        f"(tau={ds.tau}, design={ds.design.value}, outcome={ds.outcome_family.value})"
    )
    return ds


def emit_long_csv(
    ds: PanelDataset,
    sink: str | Path | IO[str],
    schema: ColumnSchema | None = None,
) -> None:
    """Write the dataset as the long-format CSV that ingest_long_csv reads back."""
    schema = schema or ColumnSchema()
    columns = [ID, T, ELIG, TREAT, Y, *ds.covariates]
    out = ds.frame[columns].rename(
        columns={ID: schema.id, T: schema.t, ELIG: schema.elig, TREAT: schema.treat, Y: schema.y}
    )
    out.to_csv(sink, index=False, float_format="%.17g", lineterminator="\n")


def derive_eligibility(
    ds: PanelDataset, rule: str | EligibilityRule = TREATMENT_NAIVE
) -> PanelDataset:
    """Recompute the eligibility column.

    Args:
        ds: Source dataset
        rule: ``"treatment_naive"`` (I_t = 1 - A_{t-1}, A_0 = 0) or a predicate
            receiving one patient's rows sorted by t and returning 0/1 flags

    Returns:
        A new PanelDataset with the derived eligibility
    """
    frame = ds.frame.copy()
    if isinstance(rule, str):
        if rule != TREATMENT_NAIVE:
            raise SchemaError(f"Unknown eligibility rule '{rule}'")
        frame[ELIG] = 1 - frame[A_LAG]
    else:
        flags = np.empty(len(frame), dtype=np.int64)
        for _, idx in frame.groupby(ID, sort=False).indices.items():
            history = frame.iloc[idx]
            result = np.asarray(rule(history)).astype(np.int64)
            if result.shape != (len(idx),):
                raise SchemaError("Eligibility rule returned the wrong number of flags")
            flags[idx] = result
        frame[ELIG] = flags
    return ds.with_frame(frame)


@dataclass(frozen=True, eq=False)
class TrialTable:
    """Per-trial view of the emulated sequence of trials.

    Attributes:
        clones: One row per eligible (patient, trial): trial, id, arm and the
            covariate values at that trial's baseline.
        counts: Eligible patients n_t per trial t = 1..tau.
        at_risk: Rows present at each t.
    """

    clones: pd.DataFrame
    counts: dict[int, int]
    at_risk: dict[int, int]

    @property
    def empty_trials(self) -> list[int]:
        return [t for t, n in self.counts.items() if n == 0]

    @property
    def eligibility_proportions(self) -> dict[int, float]:
        """Sample proportion of eligible among at-risk rows per trial."""
        return {
            t: (self.counts[t] / self.at_risk[t]) if self.at_risk[t] else 0.0 for t in self.counts
        }


def emulate_trials(ds: PanelDataset) -> TrialTable:
    """Expand eligible rows into per-trial clones with their arm at trial baseline."""
    eligible = ds.frame.loc[ds.frame[ELIG] == 1]
    clones = eligible[[T, ID, TREAT, *ds.covariates, Y_LAG, Y]].rename(
        columns={T: "trial", TREAT: "arm"}
    )
    clones = clones.sort_values(["trial", ID], kind="mergesort").reset_index(drop=True)
    table = TrialTable(clones=clones, counts=ds.eligible_counts(), at_risk=ds.at_risk_counts())
    for t in table.empty_trials:
        logger.warning(f"Trial {t} has no eligible patients")
    return table


@dataclass(frozen=True, eq=False)
class PositivityDiagnostics:
    """Propensity overlap summary per trial and arm."""

    histogram: pd.DataFrame
    summary: pd.DataFrame

    def to_frame(self) -> pd.DataFrame:
        """Histogram rows joined with their (trial, arm) summary statistics."""
        return self.histogram.merge(self.summary, on=["trial", "arm"], how="left")


def positivity_diagnostics(
    ds: PanelDataset,
    propensities: np.ndarray[Any, Any] | pd.Series,
    threshold: float = 0.01,
    bins: int = 20,
) -> PositivityDiagnostics:
    """Summarize fitted propensities on eligible rows by trial and arm.

    Args:
        ds: Dataset the propensities were fitted on
        propensities: One value per dataset row; ineligible rows are ignored
        threshold: Values below it (or above 1 - threshold) are counted as extreme
        bins: Number of equal-width histogram bins on [0, 1]

    Raises:
        SchemaError: If lengths differ or an eligible propensity lies outside (0, 1)
    """
    values = np.asarray(propensities, dtype=np.float64)
    if values.shape != (ds.n_rows,):
        raise SchemaError(
            f"Expected {ds.n_rows} propensities, got {values.shape[0] if values.ndim else 0}"
        )
    eligible = (ds.frame[ELIG] == 1).to_numpy()
    ps = values[eligible]
    if not np.all((ps > 0.0) & (ps < 1.0)):
        raise SchemaError("Fitted propensity outside (0, 1) on an eligible row")

    trials = ds.frame.loc[eligible, T].to_numpy()
    arms = ds.frame.loc[eligible, TREAT].to_numpy()
    edges = np.linspace(0.0, 1.0, bins + 1)

    hist_rows: list[dict[str, Any]] = []
    summary_rows: list[dict[str, Any]] = []
    for t in range(1, ds.tau + 1):
        for arm in (0, 1):
            sel = ps[(trials == t) & (arms == arm)]
            counts, _ = np.histogram(sel, bins=edges)
            for k in range(bins):
                hist_rows.append(
                    {
                        "trial": t,
                        "arm": arm,
                        "bin_lower": edges[k],
                        "bin_upper": edges[k + 1],
                        "count": int(counts[k]),
                    }
                )
            summary_rows.append(
                {
                    "trial": t,
                    "arm": arm,
                    "n": int(sel.size),
                    "min": float(sel.min()) if sel.size else np.nan,
                    "max": float(sel.max()) if sel.size else np.nan,
                    "below_threshold": int(np.sum(sel < threshold)),
                    "above_upper": int(np.sum(sel > 1.0 - threshold)),
                }
            )
    return PositivityDiagnostics(
        histogram=pd.DataFrame(hist_rows), summary=pd.DataFrame(summary_rows)
    )
