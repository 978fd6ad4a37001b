"""Stacked estimating equations for the proposed estimators.

Every estimator is the root of a stack holding, in order: the nuisance model scores
(unless the nuisances were supplied), the marginal eligibility proportions, the
per-trial arm means and the two aggregated arm means. The point estimate is the
two-step plug-in value; the stack only serves the sandwich.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Hashable
from dataclasses import dataclass
from typing import Any

import numpy as np

from ..errors import (
    ELIGIBILITY_POSITIVITY,
    PARTICIPATION_POSITIVITY,
    TREATMENT_POSITIVITY,
    EstimandUndefinedError,
    PositivityError,
)
from ..glm import FittedModel, Link, score_contributions
from ..panel import ELIG, T, TREAT, Y, Design, PanelDataset
from .nuisance import NuisanceSet
from .report import Estimand, Method
from .weights import weight_cap

logger = logging.getLogger(__name__)

Array = np.ndarray[Any, np.dtype[np.float64]]
Index = np.ndarray[Any, np.dtype[np.intp]]
# Fills the rows x block-size view of the moment matrix for a parameter vector
Moment = Callable[[Array, Array], None]


class ParameterStack:
    """Named parameter blocks, each with a row-level moment function."""

    def __init__(self, n_rows: int):
        self.n_rows = n_rows
        self._slices: dict[Hashable, slice] = {}
        self._fixed: dict[Hashable, Array] = {}
        self._values: list[Array] = []
        self._names: list[str] = []
        self._moments: list[tuple[slice, Moment]] = []
        self.size = 0

    def add(self, key: Hashable, value: Any, moment: Moment, label: str = "") -> slice:
        value = np.atleast_1d(np.asarray(value, dtype=np.float64))
        block = slice(self.size, self.size + value.size)
        self._slices[key] = block
        self._values.append(value)
        self._moments.append((block, moment))
        label = label or str(key)
        self._names.extend(
            [label] if value.size == 1 else [f"{label}[{k}]" for k in range(value.size)]
        )
        self.size += value.size
        return block

    def fix(self, key: Hashable, value: Any) -> None:
        self._fixed[key] = np.atleast_1d(np.asarray(value, dtype=np.float64))

    def get(self, key: Hashable, theta: Array) -> Array:
        block = self._slices.get(key)
        if block is not None:
            return theta[block]
        return self._fixed[key]

    def index(self, key: Hashable) -> int:
        return self._slices[key].start

    @property
    def theta_hat(self) -> Array:
        return np.concatenate(self._values) if self._values else np.empty(0)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self._names)

    def psi(self, theta: Array) -> Array:
        out = np.zeros((self.n_rows, self.size))
        for block, moment in self._moments:
            moment(theta, out[:, block])
        return out


@dataclass(frozen=True)
class TrialSummary:
    """Per-trial quantities behind an aggregated estimate."""

    t: int
    at_risk: int
    eligible: int
    p_eligible: float
    weight: float
    mean_treated: float
    mean_control: float

    @property
    def contrast(self) -> float:
        return self.mean_treated - self.mean_control


@dataclass(frozen=True, eq=False)
class EstimandStack:
    """Built stack plus the plug-in values it is centred on."""

    stack: ParameterStack
    trials: tuple[TrialSummary, ...]
    mean_treated: float
    mean_control: float
    truncation_cap: float | None

    @property
    def point(self) -> float:
        return self.mean_treated - self.mean_control

    @property
    def arm_indices(self) -> tuple[int, int]:
        return self.stack.index(("M", 1)), self.stack.index(("M", 0))


class _Builder:
    def __init__(
        self,
        ds: PanelDataset,
        nuis: NuisanceSet,
        estimand: Estimand,
        method: Method,
        truncation: float | None,
    ):
        self.ds = ds
        self.nuis = nuis
        self.estimand = estimand
        self.method = method
        self.truncation = truncation

        frame = ds.frame
        self.frame = frame
        self.t_arr = frame[T].to_numpy()
        self.elig = frame[ELIG].to_numpy(dtype=np.float64)
        self.A = frame[TREAT].to_numpy(dtype=np.float64)
        self.Y = frame[Y].to_numpy(dtype=np.float64)
        self.codes = ds.cluster_codes
        self.first_rows: Index = np.flatnonzero(np.r_[True, self.codes[1:] != self.codes[:-1]])
        self.base_rows: Index = np.flatnonzero(ds.baseline_mask)
        self.rows_at: dict[int, Index] = {}
        self.elig_at: dict[int, Index] = {}
        for t in range(1, ds.tau + 1):
            self.rows_at[t] = np.flatnonzero(self.t_arr == t)
            self.elig_at[t] = np.flatnonzero((self.t_arr == t) & (self.elig == 1.0))
        self.stack = ParameterStack(ds.n_rows)
        self.estimate_nuisance = not nuis.supplied
        self.cap: float | None = None

    # -- trial selection and positivity -------------------------------------------------

    def active_trials(self) -> list[int]:
        tau = self.ds.tau
        counts = {t: self.elig_at[t].size for t in range(1, tau + 1)}
        if self.estimand == Estimand.PSI_B:
            if self.ds.design != Design.VISIT_TIME:
                raise EstimandUndefinedError(
                    "psi_b is undefined for calendar-time data: newly eligible "
                    "individuals lack baseline covariates"
                )
            for t, n in counts.items():
                if n == 0:
                    raise PositivityError(
                        f"no eligible patients at t={t}", PARTICIPATION_POSITIVITY, trial=t
                    )
            return list(counts)

        marginal = self.nuis.eligibility_marginal
        if self.estimand == Estimand.PSI_U:
            for t, n in counts.items():
                if n == 0 or marginal.get(t, 0.0) <= 0.0:
                    raise PositivityError(
                        f"P(I_{t}=1) = 0 (trial {t} is empty)", ELIGIBILITY_POSITIVITY, trial=t
                    )
            return list(counts)

        active = [t for t, n in counts.items() if n > 0 and marginal.get(t, 0.0) > 0.0]
        if not active:
            raise PositivityError("every trial is empty", ELIGIBILITY_POSITIVITY)
        for t in counts:
            if t not in active:
                logger.info(f"Trial {t} is empty and gets zero weight")
        return active

    # -- nuisance blocks ---------------------------------------------------------------

    def model_block(self, key: tuple[Any, ...], model: FittedModel, rows: Index, X: Array, response: Array) -> None:
        if not (self.estimate_nuisance and model.estimated):
            self.stack.fix(key, model.coefficients)
            return
        link = model.spec.link
        stack = self.stack

        def moment(theta: Array, block: Array) -> None:
            block[rows] = score_contributions(link, X, response, stack.get(key, theta))

        stack.add(key, model.coefficients, moment, label=f"{key[0]}:{model.spec.response}")

    def require(self, models: dict[int, FittedModel], t: int, what: str) -> FittedModel:
        if t not in models:
            raise ValueError(f"No {what} model for trial {t}")
        return models[t]

    # -- build ---------------------------------------------------------------------------

    def build(self) -> EstimandStack:
        active = self.active_trials()
        if self.estimand == Estimand.PSI_B:
            means = self.build_baseline(active)
        else:
            means = self.build_marginal(active)
        return self.aggregate(active, means)

    def build_marginal(self, active: list[int]) -> dict[int, tuple[float, float]]:
        stack, nuis = self.stack, self.nuis
        frame = self.frame

        # Marginal eligibility proportions
        for t in active:
            rows = self.rows_at[t]
            key = ("p", t)
            p_hat = nuis.eligibility_marginal[t]
            if self.estimate_nuisance:
                elig_t = self.elig[rows]

                def p_moment(theta: Array, block: Array, rows: Index = rows, elig_t: Array = elig_t, key: Any = key) -> None:
                    block[rows, 0] = elig_t - stack.get(key, theta)[0]

                stack.add(key, p_hat, p_moment, label=f"p[t={t}]")
            else:
                stack.fix(key, p_hat)

        arm_means: dict[int, tuple[float, float]] = {}
        if self.method == Method.IPW:
            designs: dict[int, tuple[Array, Link]] = {}
            for t in active:
                model = self.require(nuis.propensity, t, "propensity")
                rows = self.elig_at[t]
                X = model.spec.design(frame.iloc[rows])
                self.model_block(("propensity", t), model, rows, X, self.A[rows])
                designs[t] = (X, model.spec.link)

            def weights(theta: Array, t: int) -> tuple[Array, Array]:
                X, link = designs[t]
                pi = link.inverse(X @ stack.get(("propensity", t), theta))
                p = stack.get(("p", t), theta)[0]
                return 1.0 / (p * pi), 1.0 / (p * (1.0 - pi))

            theta0 = stack.theta_hat
            self._check_treatment_positivity(
                {t: designs[t][1].inverse(designs[t][0] @ stack.get(("propensity", t), theta0)) for t in active}
            )
            cap = self._cap({t: weights(theta0, t) for t in active}, active)

            for t in active:
                rows_t, elig_rows = self.rows_at[t], self.elig_at[t]
                A, Yv = self.A[elig_rows], self.Y[elig_rows]
                w1, w0 = weights(theta0, t)
                values = {
                    1: np.sum(A * Yv * np.minimum(w1, cap)) / rows_t.size,
                    0: np.sum((1 - A) * Yv * np.minimum(w0, cap)) / rows_t.size,
                }
                for arm in (1, 0):
                    key = ("mu", arm, t)

                    def mu_moment(
                        theta: Array, block: Array, t: int = t, arm: int = arm, key: Any = key,
                        rows_t: Index = rows_t, elig_rows: Index = elig_rows, A: Array = A, Yv: Array = Yv,
                    ) -> None:
                        w1, w0 = weights(theta, t)
                        block[rows_t, 0] = -stack.get(key, theta)[0]
                        if arm == 1:
                            block[elig_rows, 0] += A * Yv * np.minimum(w1, cap)
                        else:
                            block[elig_rows, 0] += (1 - A) * Yv * np.minimum(w0, cap)

                    stack.add(key, values[arm], mu_moment, label=f"mu{arm}[t={t}]")
                arm_means[t] = (values[1], values[0])
            self.cap = cap if np.isfinite(cap) else None
        else:
            predictions = self._outcome_blocks(active)
            theta0 = stack.theta_hat
            for t in active:
                rows_t, elig_rows = self.rows_at[t], self.elig_at[t]
                p0 = stack.get(("p", t), theta0)[0]
                values = {arm: np.sum(predictions(theta0, t, arm)) / (p0 * rows_t.size) for arm in (1, 0)}
                for arm in (1, 0):
                    key = ("mu", arm, t)

                    def g_moment(
                        theta: Array, block: Array, t: int = t, arm: int = arm, key: Any = key,
                        rows_t: Index = rows_t, elig_rows: Index = elig_rows,
                    ) -> None:
                        p = stack.get(("p", t), theta)[0]
                        block[rows_t, 0] = -stack.get(key, theta)[0]
                        block[elig_rows, 0] += predictions(theta, t, arm) / p

                    stack.add(key, values[arm], g_moment, label=f"mu{arm}[t={t}]")
                arm_means[t] = (values[1], values[0])
            self.cap = None
        return arm_means

    def build_baseline(self, active: list[int]) -> dict[int, tuple[float, float]]:
        stack, nuis = self.stack, self.nuis
        frame = self.frame
        base_rows = self.base_rows
        n_base = base_rows.size
        base_frame = frame.iloc[base_rows]
        arm_means: dict[int, tuple[float, float]] = {}

        if self.method == Method.IPW:
            designs: dict[int, tuple[Array, Link]] = {}
            for t in active:
                model = self.require(nuis.propensity, t, "propensity")
                rows = self.elig_at[t]
                X = model.spec.design(frame.iloc[rows])
                self.model_block(("propensity", t), model, rows, X, self.A[rows])
                designs[t] = (X, model.spec.link)

            # Conditional eligibility per baseline patient
            patient_of_base = self.codes[base_rows]
            elig_designs: dict[int, Array] = {}
            for t in active:
                conditional = nuis.eligibility_conditional.get(t)
                if conditional is None:
                    raise ValueError(f"No conditional eligibility for trial {t}")
                if conditional.model is not None:
                    X = conditional.model.spec.design(base_frame)
                    flags = np.zeros(self.ds.n_patients)
                    flags[self.codes[self.rows_at[t]]] = self.elig[self.rows_at[t]]
                    self.model_block(("eligibility", t), conditional.model, base_rows, X, flags[patient_of_base])
                    elig_designs[t] = X
                elif conditional.complement_of_propensity and not np.array_equal(self.elig_at[1], base_rows):
                    raise ValueError("Propensity complement requires every baseline row eligible at t=1")

            def q_patients(theta: Array, t: int) -> Array:
                q = np.ones(self.ds.n_patients)
                conditional = nuis.eligibility_conditional[t]
                if conditional.model is not None:
                    eta = elig_designs[t] @ stack.get(("eligibility", t), theta)
                    q[patient_of_base] = Link.LOGIT.inverse(eta)
                elif conditional.complement_of_propensity:
                    X1, link1 = designs[1]
                    q[patient_of_base] = 1.0 - link1.inverse(X1 @ stack.get(("propensity", 1), theta))
                return q

            def weights(theta: Array, t: int) -> tuple[Array, Array]:
                X, link = designs[t]
                pi = link.inverse(X @ stack.get(("propensity", t), theta))
                q = q_patients(theta, t)[self.codes[self.elig_at[t]]]
                return 1.0 / (q * pi), 1.0 / (q * (1.0 - pi))

            theta0 = stack.theta_hat
            self._check_treatment_positivity(
                {t: designs[t][1].inverse(designs[t][0] @ stack.get(("propensity", t), theta0)) for t in active}
            )
            for t in active:
                q0 = q_patients(theta0, t)[patient_of_base]
                if np.any(q0 <= 0.0):
                    raise PositivityError(
                        f"P(I_{t}=1 | L_1) = 0 for a baseline patient", PARTICIPATION_POSITIVITY, trial=t
                    )
            cap = self._cap({t: weights(theta0, t) for t in active}, active)

            for t in active:
                elig_rows = self.elig_at[t]
                A, Yv = self.A[elig_rows], self.Y[elig_rows]
                w1, w0 = weights(theta0, t)
                values = {
                    1: np.sum(A * Yv * np.minimum(w1, cap)) / n_base,
                    0: np.sum((1 - A) * Yv * np.minimum(w0, cap)) / n_base,
                }
                for arm in (1, 0):
                    key = ("mu", arm, t)

                    def b_moment(
                        theta: Array, block: Array, t: int = t, arm: int = arm, key: Any = key,
                        elig_rows: Index = elig_rows, A: Array = A, Yv: Array = Yv,
                    ) -> None:
                        w1, w0 = weights(theta, t)
                        block[base_rows, 0] = -stack.get(key, theta)[0]
                        if arm == 1:
                            block[elig_rows, 0] += A * Yv * np.minimum(w1, cap)
                        else:
                            block[elig_rows, 0] += (1 - A) * Yv * np.minimum(w0, cap)

                    stack.add(key, values[arm], b_moment, label=f"mu{arm}[t={t}]")
                arm_means[t] = (values[1], values[0])
            self.cap = cap if np.isfinite(cap) else None
            return arm_means

        # Nested G-computation
        predictions = self._outcome_blocks(active)
        for t in active:
            elig_rows = self.elig_at[t]
            elig_frame = frame.iloc[elig_rows]
            for arm in (1, 0):
                regression = nuis.baseline_regression.get((t, arm))
                if regression is None:
                    raise ValueError(f"No baseline regression for trial {t}, arm {arm}")
                Xb = regression.spec.design(elig_frame)
                key = ("baseline", t, arm)
                if self.estimate_nuisance and regression.estimated:

                    def r_moment(
                        theta: Array, block: Array, t: int = t, arm: int = arm, key: Any = key,
                        elig_rows: Index = elig_rows, Xb: Array = Xb,
                    ) -> None:
                        residual = predictions(theta, t, arm) - Xb @ stack.get(key, theta)
                        block[elig_rows] = Xb * residual[:, None]

                    stack.add(key, regression.coefficients, r_moment, label=f"baseline:{regression.spec.response}")
                else:
                    stack.fix(key, regression.coefficients)

        theta0 = stack.theta_hat
        for t in active:
            values = {}
            for arm in (1, 0):
                regression = nuis.baseline_regression[(t, arm)]
                X_base = regression.spec.design(base_frame)
                values[arm] = float(np.mean(X_base @ stack.get(("baseline", t, arm), theta0)))
                key = ("mu", arm, t)

                def m_moment(
                    theta: Array, block: Array, t: int = t, arm: int = arm, key: Any = key, X_base: Array = X_base,
                ) -> None:
                    block[base_rows, 0] = X_base @ stack.get(("baseline", t, arm), theta) - stack.get(key, theta)[0]

                stack.add(key, values[arm], m_moment, label=f"mu{arm}[t={t}]")
            arm_means[t] = (values[1], values[0])
        self.cap = None
        return arm_means

    def _outcome_blocks(self, active: list[int]) -> Callable[[Array, int, int], Array]:
        stack, frame = self.stack, self.frame
        counterfactual: dict[tuple[int, int], Array] = {}
        links: dict[int, Link] = {}
        for t in active:
            model = self.require(self.nuis.outcome, t, "outcome")
            rows = self.elig_at[t]
            rows_frame = frame.iloc[rows]
            X = model.spec.design(rows_frame)
            self.model_block(("outcome", t), model, rows, X, self.Y[rows])
            for arm in (1, 0):
                counterfactual[(t, arm)] = model.spec.design(rows_frame, {TREAT: arm})
            links[t] = model.spec.link

        def predictions(theta: Array, t: int, arm: int) -> Array:
            return links[t].inverse(counterfactual[(t, arm)] @ stack.get(("outcome", t), theta))

        return predictions

    def _check_treatment_positivity(self, scores: dict[int, Array]) -> None:
        for t, pi in scores.items():
            if np.any((pi <= 0.0) | (pi >= 1.0)):
                raise PositivityError(
                    f"fitted propensity at 0 or 1 on an eligible row at t={t}",
                    TREATMENT_POSITIVITY,
                    trial=t,
                )

    def _cap(self, weights: dict[int, tuple[Array, Array]], active: list[int]) -> float:
        if self.truncation is None:
            return float("inf")
        applied = [
            np.where(self.A[self.elig_at[t]] == 1.0, weights[t][0], weights[t][1]) for t in active
        ]
        cap = weight_cap(np.concatenate(applied), self.truncation)
        logger.debug(f"Inverse weights capped at {cap:.4g} ({self.truncation}th percentile)")
        return cap

    def aggregate(self, active: list[int], arm_means: dict[int, tuple[float, float]]) -> EstimandStack:
        stack, nuis = self.stack, self.nuis
        tau = self.ds.tau
        first_rows = self.first_rows
        theta0 = stack.theta_hat

        def coefficients(theta: Array) -> dict[int, float]:
            if self.estimand == Estimand.PSI_E:
                p = {t: stack.get(("p", t), theta)[0] for t in active}
                total = sum(p.values())
                return {t: p[t] / total for t in active}
            return {t: 1.0 / tau for t in active}

        c0 = coefficients(theta0)
        totals = {
            arm: sum(c0[t] * arm_means[t][0 if arm == 1 else 1] for t in active) for arm in (1, 0)
        }
        for arm in (1, 0):
            key = ("M", arm)

            def agg_moment(theta: Array, block: Array, arm: int = arm, key: Any = key) -> None:
                c = coefficients(theta)
                combined = sum(c[t] * stack.get(("mu", arm, t), theta)[0] for t in active)
                block[first_rows, 0] = combined - stack.get(key, theta)[0]

            stack.add(key, totals[arm], agg_moment, label=f"M{arm}")

        at_risk = self.ds.at_risk_counts()
        summaries = tuple(
            TrialSummary(
                t=t,
                at_risk=at_risk[t],
                eligible=int(self.elig_at[t].size),
                p_eligible=float(nuis.eligibility_marginal.get(t, self.elig_at[t].size / max(at_risk[t], 1))),
                weight=float(c0[t]),
                mean_treated=float(arm_means[t][0]),
                mean_control=float(arm_means[t][1]),
            )
            for t in active
        )
        return EstimandStack(
            stack=stack,
            trials=summaries,
            mean_treated=float(totals[1]),
            mean_control=float(totals[0]),
            truncation_cap=self.cap,
        )


def build_estimand_stack(
    ds: PanelDataset,
    nuis: NuisanceSet,
    estimand: Estimand,
    method: Method,
    truncation: float | None = None,
) -> EstimandStack:
    """Build the stacked system for one estimand and method.

    Raises:
        EstimandUndefinedError: psi_b requested on calendar-time data
        PositivityError: The positivity condition of the estimand fails
    """
    if method not in (Method.IPW, Method.GCOMP):
        raise ValueError(f"Method {method.value} is not a proposed estimator")
    return _Builder(ds, nuis, Estimand(estimand), Method(method), truncation).build()
