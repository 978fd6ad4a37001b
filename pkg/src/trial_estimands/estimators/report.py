"""Estimate reports and the labels they carry."""

from __future__ import annotations

import math
from enum import Enum
from typing import Any

import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

REPORT_COLUMNS = ["estimand", "method", "scale", "point", "se", "ci_lower", "ci_upper"]


class Estimand(str, Enum):
    PSI_U = "psi_u"
    PSI_E = "psi_e"
    PSI_B = "psi_b"


class Method(str, Enum):
    IPW = "ipw"
    GCOMP = "gcomp"
    OLS = "ols"
    G_ESTIMATION = "g_estimation"
    MLE = "mle"


class Scale(str, Enum):
    RISK_DIFFERENCE = "risk_difference"
    LOG_ODDS = "log_odds"


class EstimateReport(BaseModel):
    """Point estimate with sandwich standard error and Wald interval.

    Comparator estimates carry no estimand; their ``label`` names the estimator.
    ``mean_treated`` / ``mean_control`` hold the aggregated counterfactual means
    for the proposed estimators.
    """

    model_config = ConfigDict(frozen=True)

    estimand: Estimand | None
    method: Method
    scale: Scale = Scale.RISK_DIFFERENCE
    point: float
    se: float = Field(ge=0.0)
    ci_lower: float
    ci_upper: float
    level: float = Field(default=0.95, gt=0.0, lt=1.0)
    truncation_percentile: float | None = None
    label: str = ""
    mean_treated: float | None = None
    mean_control: float | None = None
    n_patients: int = 0
    n_rows: int = 0

    @model_validator(mode="after")
    def _check_interval(self) -> EstimateReport:
        if not math.isfinite(self.se):
            raise ValueError("se must be finite")
        if not self.ci_lower <= self.point <= self.ci_upper:
            raise ValueError(
                f"interval ({self.ci_lower}, {self.ci_upper}) does not contain {self.point}"
            )
        return self

    @property
    def name(self) -> str:
        """Estimator label such as ``psi_u-ipw``."""
        if self.label:
            return self.label
        return f"{self.estimand.value if self.estimand else 'coef'}-{self.method.value}"

    def as_row(self) -> dict[str, Any]:
        """Flat CSV row; log-odds reports also carry odds-ratio columns."""
        row: dict[str, Any] = {
            "estimator": self.name,
            "estimand": self.estimand.value if self.estimand else "",
            "method": self.method.value,
            "scale": self.scale.value,
            "point": self.point,
            "se": self.se,
            "ci_lower": self.ci_lower,
            "ci_upper": self.ci_upper,
            "truncation_percentile": self.truncation_percentile,
        }
        if self.scale == Scale.LOG_ODDS:
            row["odds_ratio"] = math.exp(self.point)
            row["or_lower"] = math.exp(self.ci_lower)
            row["or_upper"] = math.exp(self.ci_upper)
        return row


def reports_frame(reports: list[EstimateReport]) -> pd.DataFrame:
    """Stack reports into a table with the report columns first."""
    frame = pd.DataFrame([r.as_row() for r in reports])
    if frame.empty:
        return pd.DataFrame(columns=["estimator", *REPORT_COLUMNS])
    lead = ["estimator", *REPORT_COLUMNS]
    return frame[lead + [c for c in frame.columns if c not in lead]]
