"""Stacked estimating equations: Newton root-finding and cluster-robust sandwich variance."""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Any

import numpy as np
from scipy import sparse, special

from .errors import ConvergenceError

logger = logging.getLogger(__name__)

Array = np.ndarray[Any, np.dtype[np.float64]]

# Row-level moment contributions: theta -> (n_rows, dim)
PsiFunction = Callable[[Array], Array]

ROOT_TOL = 1e-10
MAX_NEWTON = 50
ROOT_CHECK_TOL = 1e-6


def fd_step(theta: Array) -> Array:
    """Central-difference step per coordinate."""
    return np.maximum(1e-6, 1e-6 * np.abs(theta))


@dataclass(frozen=True, eq=False)
class EstimatingSystem:
    """A stack of moment equations evaluated row by row.

    Attributes:
        psi: Row contributions for a parameter vector.
        dim: Parameter dimension.
        clusters: Integer cluster code per row; all rows of one patient share a code.
        theta_hat: Solved or supplied parameter vector.
        names: Optional parameter labels.
        jacobian: Optional analytic Jacobian of the mean cluster contribution.
    """

    psi: PsiFunction
    dim: int
    clusters: np.ndarray[Any, np.dtype[np.int64]]
    theta_hat: Array | None = None
    names: tuple[str, ...] = ()
    jacobian: Callable[[Array], Array] | None = field(default=None, compare=False)

    @cached_property
    def n_clusters(self) -> int:
        return int(np.unique(self.clusters).size)

    @cached_property
    def _aggregator(self) -> sparse.csr_matrix:
        codes = np.unique(self.clusters, return_inverse=True)[1]
        n = codes.size
        return sparse.csr_matrix(
            (np.ones(n), (codes, np.arange(n))), shape=(self.n_clusters, n)
        )

    def cluster_contributions(self, theta: Array) -> Array:
        """Per-cluster sums of the row contributions (clusters x dim)."""
        rows = np.asarray(self.psi(np.asarray(theta, dtype=np.float64)), dtype=np.float64)
        if rows.ndim == 1:
            rows = rows[:, None]
        if rows.shape != (self.clusters.size, self.dim):
            raise ValueError(
                f"psi returned shape {rows.shape}, expected {(self.clusters.size, self.dim)}"
            )
        return np.asarray(self._aggregator @ rows)

    def mean_psi(self, theta: Array) -> Array:
        return self.cluster_contributions(theta).mean(axis=0)

    def mean_jacobian(self, theta: Array) -> Array:
        """Derivative of the mean cluster contribution, analytic when supplied."""
        if self.jacobian is not None:
            return np.asarray(self.jacobian(theta), dtype=np.float64)
        return finite_difference_jacobian(self.mean_psi, theta)

    def with_theta(self, theta: Array) -> EstimatingSystem:
        return replace(self, theta_hat=np.asarray(theta, dtype=np.float64))


def finite_difference_jacobian(fn: Callable[[Array], Array], theta: Array) -> Array:
    """Central finite-difference Jacobian of a vector function."""
    theta = np.asarray(theta, dtype=np.float64)
    steps = fd_step(theta)
    columns = []
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = steps[k]
        columns.append((fn(theta + e) - fn(theta - e)) / (2.0 * steps[k]))
    return np.column_stack(columns)


def solve_stacked(system: EstimatingSystem, init: Sequence[float] | Array) -> Array:
    """Find the root of the mean estimating equation by Newton iteration.

    Raises:
        ConvergenceError: Singular Jacobian or no root within 50 iterations
    """
    theta = np.asarray(init, dtype=np.float64).copy()
    if theta.shape != (system.dim,) or not np.all(np.isfinite(theta)):
        raise ValueError(f"init must be a finite vector of length {system.dim}")

    for iteration in range(MAX_NEWTON + 1):
        g = system.mean_psi(theta)
        if np.max(np.abs(g)) <= ROOT_TOL:
            logger.debug(f"Stacked system solved in {iteration} Newton steps")
            return theta
        if iteration == MAX_NEWTON:
            break
        J = system.mean_jacobian(theta)
        try:
            if np.linalg.cond(J) > 1e14:
                raise np.linalg.LinAlgError("ill-conditioned")
            theta = theta - np.linalg.solve(J, g)
        except np.linalg.LinAlgError as e:
            raise ConvergenceError(f"Singular Jacobian in stacked system: {e}", iterations=iteration) from e

    raise ConvergenceError(
        f"Stacked system did not converge in {MAX_NEWTON} iterations "
        f"(max |mean psi| = {np.max(np.abs(g)):.3g})",
        iterations=MAX_NEWTON,
    )


def sandwich_variance(system: EstimatingSystem) -> Array:
    """Cluster-robust sandwich covariance A^-1 B A^-T / m at theta_hat.

    Raises:
        ValueError: theta_hat unset or too few clusters
        ConvergenceError: Singular bread matrix
    """
    if system.theta_hat is None:
        raise ValueError("theta_hat must be set before computing the sandwich")
    theta = system.theta_hat
    m = system.n_clusters
    if m < system.dim + 1:
        raise ValueError(f"Sandwich needs at least {system.dim + 1} clusters, got {m}")

    contributions = system.cluster_contributions(theta)
    residual = np.max(np.abs(contributions.mean(axis=0)))
    if residual > ROOT_CHECK_TOL:
        logger.warning(f"Mean estimating function at theta_hat is {residual:.3g}, not a root")

    bread = -system.mean_jacobian(theta)
    meat = contributions.T @ contributions / m
    try:
        bread_inv = np.linalg.inv(bread)
    except np.linalg.LinAlgError as e:
        raise ConvergenceError(f"Singular bread matrix: {e}") from e
    if not np.all(np.isfinite(bread_inv)) or np.linalg.cond(bread) > 1e14:
        raise ConvergenceError("Singular bread matrix")

    vcov = bread_inv @ meat @ bread_inv.T / m
    return np.asarray((vcov + vcov.T) / 2.0)


def wald_ci(point: float, se: float, level: float = 0.95) -> tuple[float, float]:
    """Normal-theory confidence interval point ± z·se."""
    if se < 0:
        raise ValueError("se must be non-negative")
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1)")
    z = float(special.ndtri((1.0 + level) / 2.0))
    return point - z * se, point + z * se


def delta_method(gradient: Sequence[float] | Array, vcov: Array) -> float:
    """Standard error of a smooth function from its gradient and a covariance."""
    g = np.asarray(gradient, dtype=np.float64)
    V = np.atleast_2d(np.asarray(vcov, dtype=np.float64))
    if V.shape != (g.size, g.size):
        raise ValueError(f"gradient of length {g.size} does not match vcov {V.shape}")
    q = float(g @ V @ g)
    if q < -1e-12:
        raise ValueError(f"Negative quadratic form {q:.3g} in delta method")
    return float(np.sqrt(max(q, 0.0)))
