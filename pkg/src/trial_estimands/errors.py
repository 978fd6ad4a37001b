"""Error hierarchy and error-response helpers."""

from typing import Any

# Exit codes used by the command-line surface
EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

# Identification assumptions named in positivity failures
ELIGIBILITY_POSITIVITY = "positivity of eligibility"
TREATMENT_POSITIVITY = "positivity of treatment"
PARTICIPATION_POSITIVITY = "positivity of participation"


def create_error_response(
    error: Exception | str,
    context: str = "",
    details: dict[str, Any] | None = None,
) -> dict[str, Any]:
    """Create a standardized error payload.

    Args:
        error: Exception or error string
        context: Optional error category (e.g. "schema", "positivity")
        details: Extra machine-readable fields to attach

    Returns:
        Dictionary with 'success' and 'error' keys
    """
    response: dict[str, Any] = {
        "success": False,
        "error": " ".join(str(error).split()),
    }
    if context:
        response["error_context"] = context
    if details:
        response.update(details)
    return response


class EstimandsError(Exception):
    """Base exception for estimation and simulation failures."""

    exit_code: int = EXIT_RUNTIME

    def __init__(self, message: str, context: str = ""):
        super().__init__(message)
        self.message = message
        self.context = context

    def to_response(self) -> dict[str, Any]:
        """Convert to error response dictionary."""
        return create_error_response(self.message, self.context)


class ConfigError(EstimandsError):
    """Raised when a configuration file or flag is invalid."""

    exit_code = EXIT_USAGE

    def __init__(self, message: str):
        super().__init__(message, context="config")


class SchemaError(EstimandsError):
    """Raised when person-time data violates the panel schema."""

    exit_code = EXIT_USAGE

    def __init__(self, message: str, column: str | None = None):
        super().__init__(message, context="schema")
        self.column = column

    def to_response(self) -> dict[str, Any]:
        details = {"column": self.column} if self.column else None
        return create_error_response(self.message, self.context, details)


class PositivityError(EstimandsError):
    """Raised when an identification positivity condition fails in the data."""

    def __init__(self, message: str, assumption: str, trial: int | None = None):
        super().__init__(f"{assumption} violated: {message}", context="positivity")
        self.assumption = assumption
        self.trial = trial

    def to_response(self) -> dict[str, Any]:
        details: dict[str, Any] = {"assumption": self.assumption}
        if self.trial is not None:
            details["trial"] = self.trial
        return create_error_response(self.message, self.context, details)


class EstimandUndefinedError(EstimandsError):
    """Raised when an estimand is not defined for the data design."""

    def __init__(self, message: str):
        super().__init__(message, context="estimand")


class RankDeficiencyError(EstimandsError):
    """Raised when a design matrix is not of full column rank."""

    def __init__(self, message: str):
        super().__init__(message, context="numeric")


class ConvergenceError(EstimandsError):
    """Raised when an iterative solver does not converge."""

    def __init__(self, message: str, iterations: int | None = None):
        super().__init__(message, context="numeric")
        self.iterations = iterations


class SeparationError(EstimandsError):
    """Raised when a binary regression shows complete separation."""

    def __init__(self, message: str):
        super().__init__(message, context="numeric")


class ReplicationAbortedError(EstimandsError):
    """Raised when too many Monte Carlo replications fail."""

    def __init__(self, message: str, failures: int, reps: int):
        super().__init__(message, context="replication")
        self.failures = failures
        self.reps = reps
