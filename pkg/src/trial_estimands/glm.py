"""Nuisance regression engine: least squares and logit/probit IRLS."""

from __future__ import annotations

import logging
from collections.abc import Mapping
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Any

import numpy as np
import pandas as pd
from scipy import linalg, special

from .errors import ConvergenceError, RankDeficiencyError, SchemaError, SeparationError

if TYPE_CHECKING:
    from .panel import PanelDataset

logger = logging.getLogger(__name__)

Array = np.ndarray[Any, np.dtype[np.float64]]

SCORE_TOL = 1e-10
MAX_ITER = 100
RANK_TOL = 1e-10
SEPARATION_PROB = 1e-8
SEPARATION_NORM = 1e3
INTERCEPT = "(intercept)"


class Link(str, Enum):
    IDENTITY = "identity"
    LOGIT = "logit"
    PROBIT = "probit"

    def inverse(self, eta: Array) -> Array:
        """Map a linear predictor to the mean scale."""
        if self is Link.LOGIT:
            return np.asarray(special.expit(eta), dtype=np.float64)
        if self is Link.PROBIT:
            return np.asarray(special.ndtr(eta), dtype=np.float64)
        return np.asarray(eta, dtype=np.float64)


@dataclass(frozen=True)
class RowFilter:
    """Row predicate selecting the rows a model is fitted on.

    Unset fields do not restrict. ``eligible=True`` keeps I_t = 1 rows.
    """

    t: int | None = None
    eligible: bool | None = None
    treated: int | None = None

    def mask(self, frame: pd.DataFrame) -> np.ndarray[Any, np.dtype[np.bool_]]:
        keep = np.ones(len(frame), dtype=bool)
        if self.t is not None:
            keep &= (frame["t"] == self.t).to_numpy()
        if self.eligible is not None:
            keep &= (frame["elig"] == int(self.eligible)).to_numpy()
        if self.treated is not None:
            keep &= (frame["treat"] == self.treated).to_numpy()
        return keep


@dataclass(frozen=True)
class ModelSpec:
    """Response, terms, link and row subset of one working model."""

    response: str
    terms: tuple[str, ...]
    link: Link = Link.IDENTITY
    intercept: bool = True
    subset: RowFilter = field(default_factory=RowFilter)

    def __post_init__(self) -> None:
        if not self.terms and not self.intercept:
            raise ValueError("ModelSpec needs at least one term or an intercept")
        object.__setattr__(self, "terms", tuple(self.terms))
        object.__setattr__(self, "link", Link(self.link))

    @property
    def names(self) -> tuple[str, ...]:
        return ((INTERCEPT,) if self.intercept else ()) + self.terms

    def design(
        self, rows: pd.DataFrame, overrides: Mapping[str, float] | None = None
    ) -> Array:
        """Build the design matrix, substituting overridden columns by constants."""
        overrides = overrides or {}
        for column in overrides:
            if column not in rows.columns:
                raise SchemaError(f"Unknown override column '{column}'", column=column)
        n = len(rows)
        columns: list[Array] = [np.ones(n)] if self.intercept else []
        for term in self.terms:
            if term in overrides:
                columns.append(np.full(n, float(overrides[term])))
            elif term in rows.columns:
                columns.append(rows[term].to_numpy(dtype=np.float64))
            else:
                raise SchemaError(f"Model term '{term}' not found in data", column=term)
        return np.column_stack(columns) if columns else np.empty((n, 0))


@dataclass(frozen=True, eq=False)
class FittedModel:
    """A fitted working model.

    ``estimated`` is False for models built from supplied coefficients; those are
    treated as known when stacking estimating equations.
    """

    spec: ModelSpec
    coefficients: Array
    converged: bool = True
    iterations: int = 0
    n_used: int = 0
    estimated: bool = True

    def __post_init__(self) -> None:
        coefficients = np.asarray(self.coefficients, dtype=np.float64)
        if coefficients.shape != (len(self.spec.names),):
            raise ValueError(
                f"Expected {len(self.spec.names)} coefficients, got {coefficients.shape}"
            )
        if not np.all(np.isfinite(coefficients)):
            raise ValueError("Coefficients must be finite")
        object.__setattr__(self, "coefficients", coefficients)

    @classmethod
    def fixed(cls, spec: ModelSpec, coefficients: Any) -> FittedModel:
        """Wrap externally supplied coefficients."""
        return cls(spec=spec, coefficients=np.asarray(coefficients, dtype=np.float64), estimated=False)

    @property
    def dim(self) -> int:
        return len(self.coefficients)

    def to_dict(self) -> dict[str, Any]:
        """JSON-serializable coefficient dump."""
        return {
            "response": self.spec.response,
            "link": self.spec.link.value,
            "coefficients": dict(zip(self.spec.names, self.coefficients.tolist())),
            "converged": self.converged,
            "iterations": self.iterations,
            "n_used": self.n_used,
        }


def fit(spec: ModelSpec, ds: PanelDataset) -> FittedModel:
    """Fit a working model on the rows its subset selects.

    Raises:
        RankDeficiencyError: Too few rows or a rank-deficient design
        ConvergenceError: IRLS did not reach the score tolerance
        SeparationError: Fitted probabilities collapse to 0/1 with diverging coefficients
    """
    rows = ds.frame.loc[spec.subset.mask(ds.frame)]
    X = spec.design(rows)
    if spec.response not in rows.columns:
        raise SchemaError(f"Response '{spec.response}' not found in data", column=spec.response)
    y = rows[spec.response].to_numpy(dtype=np.float64)
    return fit_arrays(spec, X, y)


def fit_arrays(spec: ModelSpec, X: Array, y: Array) -> FittedModel:
    """Fit ``spec.link`` on an explicit design matrix and response."""
    n, p = X.shape
    label = f"{spec.link.value} model for '{spec.response}'"
    if n < p or n == 0:
        raise RankDeficiencyError(f"{label}: {n} rows for {p} coefficients")
    _check_rank(X, spec.names, label)

    if spec.link is Link.IDENTITY:
        beta = _least_squares(X, y)
        result = FittedModel(spec=spec, coefficients=beta, iterations=1, n_used=n)
    else:
        if not np.all((y == 0.0) | (y == 1.0)):
            raise SchemaError(f"{label}: response must be binary", column=spec.response)
        beta, iterations = _irls(X, y, spec.link, label)
        result = FittedModel(spec=spec, coefficients=beta, iterations=iterations, n_used=n)

    logger.debug(f"Fitted {label} on {n} rows")
    return result


def predict_mean(
    model: FittedModel,
    rows: pd.DataFrame | PanelDataset,
    overrides: Mapping[str, float] | None = None,
) -> Array:
    """Predicted means for ``rows``, optionally with columns forced to constants.

    Raises:
        SchemaError: Unknown override column or missing term column
    """
    frame = rows if isinstance(rows, pd.DataFrame) else rows.frame
    X = model.spec.design(frame, overrides)
    return model.spec.link.inverse(X @ model.coefficients)


def score_contributions(link: Link, X: Array, y: Array, beta: Array) -> Array:
    """Per-row score vectors of the working likelihood (rows x coefficients)."""
    eta = X @ beta
    return X * _score_weights(link, eta, y)[:, None]


def _score_weights(link: Link, eta: Array, y: Array) -> Array:
    if link is Link.IDENTITY:
        return y - eta
    if link is Link.LOGIT:
        return y - np.asarray(special.expit(eta))
    log_pdf = -0.5 * eta**2 - 0.5 * np.log(2.0 * np.pi)
    upper = np.exp(log_pdf - special.log_ndtr(eta))
    lower = np.exp(log_pdf - special.log_ndtr(-eta))
    return np.asarray(y * upper - (1.0 - y) * lower)


def _working_weights(link: Link, eta: Array) -> Array:
    if link is Link.LOGIT:
        mu = special.expit(eta)
        return np.asarray(mu * (1.0 - mu))
    log_pdf = -0.5 * eta**2 - 0.5 * np.log(2.0 * np.pi)
    return np.asarray(np.exp(2.0 * log_pdf - special.log_ndtr(eta) - special.log_ndtr(-eta)))


def _log_likelihood(link: Link, eta: Array, y: Array) -> float:
    if link is Link.LOGIT:
        return float(np.sum(y * eta - np.logaddexp(0.0, eta)))
    return float(np.sum(y * special.log_ndtr(eta) + (1.0 - y) * special.log_ndtr(-eta)))


def _irls(X: Array, y: Array, link: Link, label: str) -> tuple[Array, int]:
    beta = np.zeros(X.shape[1])
    eta = X @ beta
    loglik = _log_likelihood(link, eta, y)

    for iteration in range(MAX_ITER + 1):
        score = X.T @ _score_weights(link, eta, y)
        if np.max(np.abs(score)) <= SCORE_TOL:
            _check_diverging(beta, eta, y, link, loglik, label)
            return beta, iteration
        if iteration == MAX_ITER:
            break

        w = _working_weights(link, eta)
        w = np.maximum(w, 1e-300)
        sw = np.sqrt(w)
        # Newton step: weighted least squares of the working residual
        step = _least_squares(X * sw[:, None], _score_weights(link, eta, y) / sw)

        halvings = 0
        while True:
            candidate = beta + step
            cand_eta = X @ candidate
            cand_loglik = _log_likelihood(link, cand_eta, y)
            if cand_loglik >= loglik - 1e-12 * max(1.0, abs(loglik)) or halvings >= 30:
                break
            step = step / 2.0
            halvings += 1

        beta, eta, loglik = candidate, cand_eta, cand_loglik
        _check_separation(beta, eta, link, label)

    _check_separation(beta, eta, link, label, final=True)
    raise ConvergenceError(
        f"{label} did not converge in {MAX_ITER} iterations", iterations=MAX_ITER
    )


def _check_separation(beta: Array, eta: Array, link: Link, label: str, final: bool = False) -> None:
    if np.linalg.norm(beta) <= SEPARATION_NORM and not final:
        return
    mu = link.inverse(eta)
    extreme = np.any((mu < SEPARATION_PROB) | (mu > 1.0 - SEPARATION_PROB))
    if extreme and np.linalg.norm(beta) > SEPARATION_NORM:
        raise SeparationError(
            f"{label}: complete separation (fitted probabilities at 0/1, "
            f"coefficient norm {np.linalg.norm(beta):.3g})"
        )


def _check_diverging(
    beta: Array, eta: Array, y: Array, link: Link, loglik: float, label: str
) -> None:
    # Under separation the score vanishes while the likelihood keeps rising along beta
    mu = link.inverse(eta)
    if not np.any((mu < SEPARATION_PROB) | (mu > 1.0 - SEPARATION_PROB)):
        return
    if _log_likelihood(link, 2.0 * eta, y) >= loglik - 1e-12:
        raise SeparationError(
            f"{label}: complete separation (fitted probabilities at 0/1, "
            f"likelihood increasing along coefficient norm {np.linalg.norm(beta):.3g})"
        )


def _check_rank(X: Array, names: tuple[str, ...], label: str) -> None:
    _, R, pivots = linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0.0:
        raise RankDeficiencyError(f"{label}: design matrix is zero")
    rank = int(np.sum(diag > RANK_TOL * diag[0]))
    if rank < X.shape[1]:
        dropped = [names[i] for i in pivots[rank:]]
        raise RankDeficiencyError(f"{label}: rank-deficient design (collinear: {dropped})")


def _least_squares(X: Array, y: Array) -> Array:
    Q, R = linalg.qr(X, mode="economic")
    return np.asarray(linalg.solve_triangular(R, Q.T @ y), dtype=np.float64)
