"""Sequential data-generating process with counterfactual outcomes.

Per patient and visit:

    L_t ~ N(alpha0 + alpha1 L_{t-1} + alpha2 A_{t-1}, sd_L)
    A_t = A_{t-1} + (1 - A_{t-1}) Bernoulli(link(beta0 + beta1 L_t + beta2 A_{t-1} + beta3 Y_{t-1}))
    Y^a_t from gamma0 + gamma1 s(t) a + gamma2 L_t + gamma3 Y_{t-1}

Both counterfactual outcomes of a row share the same noise draw.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Literal

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from scipy import special

from ..config import load_model_json
from ..panel import ELIG, ID, T, TREAT, Y, Design, OutcomeFamily, PanelDataset
from ..streams import blocks, substream

logger = logging.getLogger(__name__)

COVARIATE = "L_x"
COUNTERFACTUAL_COLUMNS = [ID, T, "y1", "y0", "mu1", "mu0", "pi"]


class DgpFamily(str, Enum):
    CONTINUOUS = "continuous"
    BINARY_LOGIT = "binary_logit"
    BINARY_PROBIT_FRAILTY = "binary_probit_frailty"


class DgpSpec(BaseModel):
    """Coefficients and structure of a simulated sequential-trial study."""

    model_config = ConfigDict(frozen=True)

    design: Design = Design.CALENDAR_TIME
    tau: int = Field(default=2, ge=1, le=100)
    alpha: tuple[float, float, float] = Field(
        default=(0.0, 0.5, 0.3), description="Covariate process: intercept, L_{t-1}, A_{t-1}"
    )
    beta: tuple[float, float, float, float] = Field(
        default=(-1.0, 1.0, 0.0, 0.5),
        description="Treatment process: intercept, L_t, A_{t-1}, Y_{t-1}",
    )
    gamma: tuple[float, float, float, float] = Field(
        default=(0.0, 1.0, 1.0, 0.3),
        description="Outcome process: intercept, treatment, L_t, Y_{t-1}",
    )
    effect_schedule: Literal["constant", "linear"] = Field(
        default="constant", description="Multiplier s(t) of the treatment coefficient: 1 or t"
    )
    outcome_family: DgpFamily = DgpFamily.CONTINUOUS
    exit_probability: float = Field(
        default=0.3,
        ge=0.0,
        lt=1.0,
        description="Per-visit exit; replaced by a naive entrant in calendar time, dropout in visit time",
    )
    noise_sds: tuple[float, float] = Field(
        default=(0.2, 0.5), description="Standard deviations of the covariate and outcome noise"
    )
    emit_counterfactuals: bool = True

    def model_post_init(self, __context: Any) -> None:
        if min(self.noise_sds) < 0.0:
            raise ValueError("noise_sds must be non-negative")
        # The shared frailty replaces the outcome-to-outcome path
        if self.outcome_family == DgpFamily.BINARY_PROBIT_FRAILTY and self.gamma[3] != 0.0:
            raise ValueError(
                f"gamma[3] (Y_{{t-1}} -> Y_t) must be 0 for {self.outcome_family.value}, got {self.gamma[3]}"
            )

    @classmethod
    def from_json_file(cls, path: Path | str) -> DgpSpec:
        """Load a DgpSpec from a JSON config file.

        Raises:
            ConfigError: Missing, malformed or invalid file
        """
        return load_model_json(cls, path)

    @property
    def panel_family(self) -> OutcomeFamily:
        if self.outcome_family == DgpFamily.CONTINUOUS:
            return OutcomeFamily.CONTINUOUS
        return OutcomeFamily.BINARY

    def effect(self, t: int) -> float:
        """Treatment coefficient gamma1 * s(t) at visit t."""
        return self.gamma[1] * (float(t) if self.effect_schedule == "linear" else 1.0)

    def treatment_probability(self, eta: Any) -> Any:
        if self.outcome_family == DgpFamily.BINARY_PROBIT_FRAILTY:
            return special.ndtr(eta)
        return special.expit(eta)


@dataclass(frozen=True, eq=False)
class SimulatedData:
    """A generated dataset and, when requested, its counterfactual table.

    ``counterfactuals`` has one row per eligible row of ``dataset.frame`` in the
    same order, with the potential outcomes y1/y0, their expected values mu1/mu0
    given the full history, and the true propensity pi.
    """

    dataset: PanelDataset
    counterfactuals: pd.DataFrame | None = None


def _generate_block(
    dgp: DgpSpec, seed: int, replication: int, block: int, start: int, stop: int, width: int
) -> tuple[dict[str, Any], dict[str, Any]]:
    rng = substream(seed, replication, block)
    m = stop - start
    a0, a1, a2 = dgp.alpha
    b0, b1, b2, b3 = dgp.beta
    g0, _, g2, g3 = dgp.gamma
    sd_l, sd_y = dgp.noise_sds
    calendar = dgp.design == Design.CALENDAR_TIME
    frailty_family = dgp.outcome_family == DgpFamily.BINARY_PROBIT_FRAILTY

    slots = np.arange(start, stop)
    entries = np.zeros(m, dtype=np.int64)
    active = np.ones(m, dtype=bool)
    l_prev = np.zeros(m)
    a_prev = np.zeros(m)
    y_prev = np.zeros(m)
    frailty = rng.standard_normal(m) if frailty_family else np.zeros(m)

    observed: dict[str, list[Any]] = {k: [] for k in (ID, T, ELIG, TREAT, Y, COVARIATE)}
    counterfactual: dict[str, list[Any]] = {k: [] for k in COUNTERFACTUAL_COLUMNS}

    for t in range(1, dgp.tau + 1):
        if t > 1 and dgp.exit_probability > 0.0:
            exits = (rng.random(m) < dgp.exit_probability) & active
            if calendar:
                entries[exits] += 1
                l_prev[exits] = 0.0
                a_prev[exits] = 0.0
                y_prev[exits] = 0.0
                if frailty_family:
                    frailty = np.where(exits, rng.standard_normal(m), frailty)
            else:
                active &= ~exits

        L = a0 + a1 * l_prev + a2 * a_prev + sd_l * rng.standard_normal(m)
        naive = a_prev == 0.0
        pi = dgp.treatment_probability(b0 + b1 * L + b2 * a_prev + b3 * y_prev)
        A = np.where(naive, (rng.random(m) < pi).astype(np.float64), 1.0)

        eta0 = g0 + g2 * L + g3 * y_prev + frailty
        eta1 = eta0 + dgp.effect(t)
        if dgp.outcome_family == DgpFamily.CONTINUOUS:
            mu1, mu0 = eta1, eta0
            noise = sd_y * rng.standard_normal(m)
            y1, y0 = mu1 + noise, mu0 + noise
        else:
            inverse = special.ndtr if frailty_family else special.expit
            mu1, mu0 = inverse(eta1), inverse(eta0)
            u = rng.random(m)
            y1, y0 = (u < mu1).astype(np.float64), (u < mu0).astype(np.float64)
        Y_obs = np.where(A == 1.0, y1, y0)

        ids = [
            f"{s:0{width}d}" if k == 0 else f"{s:0{width}d}-{k:03d}"
            for s, k in zip(slots[active], entries[active])
        ]
        observed[ID].extend(ids)
        observed[T].extend([t] * len(ids))
        observed[ELIG].extend(naive[active].astype(np.int64).tolist())
        observed[TREAT].extend(A[active].astype(np.int64).tolist())
        observed[Y].extend(Y_obs[active].tolist())
        observed[COVARIATE].extend(L[active].tolist())

        if dgp.emit_counterfactuals:
            keep = active & naive
            counterfactual[ID].extend(i for i, e in zip(ids, naive[active]) if e)
            counterfactual[T].extend([t] * int(keep.sum()))
            counterfactual["y1"].extend(y1[keep].tolist())
            counterfactual["y0"].extend(y0[keep].tolist())
            counterfactual["mu1"].extend(np.asarray(mu1)[keep].tolist())
            counterfactual["mu0"].extend(np.asarray(mu0)[keep].tolist())
            counterfactual["pi"].extend(np.asarray(pi)[keep].tolist())

        l_prev, a_prev, y_prev = L, A, Y_obs

    return observed, counterfactual


def generate(dgp: DgpSpec, n: int, seed: int, *, replication: int = 0) -> SimulatedData:
    """Draw a study of ``n`` participant slots.

    Patients are generated in fixed-size blocks, each from its own substream keyed by
    ``(replication, block)``, so the draw does not depend on how work is scheduled.

    Args:
        dgp: Data-generating process
        n: Baseline participants (calendar time keeps n participants at every visit)
        seed: Master seed
        replication: Replication counter used as the first stream key
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    width = max(6, len(str(n - 1)))
    observed_parts: list[pd.DataFrame] = []
    counterfactual_parts: list[pd.DataFrame] = []
    for block, start, stop in blocks(n):
        observed, counterfactual = _generate_block(dgp, seed, replication, block, start, stop, width)
        observed_parts.append(pd.DataFrame(observed))
        counterfactual_parts.append(pd.DataFrame(counterfactual))

    frame = pd.concat(observed_parts, ignore_index=True)
    ds = PanelDataset.from_frame(
        frame,
        design=dgp.design,
        outcome_family=dgp.panel_family,
        covariates=[COVARIATE],
        tau=dgp.tau,
    )
    counterfactuals = None
    if dgp.emit_counterfactuals:
        counterfactuals = (
            pd.concat(counterfactual_parts, ignore_index=True)
            .sort_values([ID, T], kind="mergesort")
            .reset_index(drop=True)
        )
    logger.debug(f"Generated {ds.n_rows} rows for {ds.n_patients} patients (seed={seed}, rep={replication})")
    return SimulatedData(dataset=ds, counterfactuals=counterfactuals)
