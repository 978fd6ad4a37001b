"""Audit events for model fits, estimates and replication runs."""

import logging
import time
from contextlib import contextmanager
from typing import Any, Generator

logger = logging.getLogger(__name__)


class AuditLogger:
    """Emits structured estimation events through ``extra_fields``."""

    def __init__(self, logger_name: str = "trial_estimands.audit"):
        self._logger = logging.getLogger(logger_name)

    def log_model_fit(
        self,
        response: str,
        link: str,
        trial: int | None,
        n_used: int,
        iterations: int,
    ) -> None:
        """Log a working-model fit."""
        log_data = {
            "event": "MODEL_FITTED",
            "response": response,
            "link": link,
            "trial": trial,
            "n_used": n_used,
            "iterations": iterations,
        }
        self._logger.debug("Model fitted", extra={"extra_fields": log_data})

    def log_estimate(
        self,
        estimator: str,
        point: float,
        se: float,
        duration_ms: float,
        truncation: float | None = None,
    ) -> None:
        """Log a computed estimate.

        Args:
            estimator: Estimator label, e.g. ``psi_u-ipw``
            point: Point estimate
            se: Sandwich standard error
            duration_ms: Wall time of the estimate in milliseconds
            truncation: Weight truncation percentile, if any
        """
        log_data: dict[str, Any] = {
            "event": "ESTIMATE_COMPUTED",
            "estimator": estimator,
            "point": point,
            "se": se,
            "duration_ms": round(duration_ms, 2),
        }
        if truncation is not None:
            log_data["truncation_percentile"] = truncation
        self._logger.info("Estimate computed", extra={"extra_fields": log_data})

    def log_positivity_violation(self, assumption: str, trial: int | None, detail: str) -> None:
        """Log a failed positivity check."""
        log_data = {
            "event": "POSITIVITY_VIOLATION",
            "assumption": assumption,
            "trial": trial,
            "detail": detail,
        }
        self._logger.warning("Positivity violated", extra={"extra_fields": log_data})

    def log_replication_failure(self, replication: int, estimator: str, error: str) -> None:
        """Log a replication excluded from a Monte Carlo study."""
        log_data = {
            "event": "REPLICATION_FAILED",
            "replication": replication,
            "estimator": estimator,
            "error": error,
        }
        self._logger.warning("Replication failed", extra={"extra_fields": log_data})

    def log_study(
        self,
        reps: int,
        n: int,
        failures: int,
        estimators: int,
        duration_ms: float,
    ) -> None:
        """Log completion of a replication study."""
        log_data = {
            "event": "STUDY_COMPLETED",
            "reps": reps,
            "n": n,
            "failures": failures,
            "estimators": estimators,
            "duration_ms": round(duration_ms, 2),
        }
        self._logger.info("Replication study completed", extra={"extra_fields": log_data})


audit_logger = AuditLogger()


@contextmanager
def timed_operation() -> Generator[dict[str, Any], None, None]:
    """Context manager for timing operations.

    Yields:
        Dictionary that will contain 'duration_ms' after context exits
    """
    timing: dict[str, Any] = {}
    start = time.perf_counter()
    try:
        yield timing
    finally:
        timing["duration_ms"] = (time.perf_counter() - start) * 1000
