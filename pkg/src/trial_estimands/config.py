"""Configuration loading: runtime settings from .env, formula and JSON model files."""

import json
import os
from functools import lru_cache
from pathlib import Path
from typing import Any, Literal, TypeVar

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError

from .errors import ConfigError
from .glm import Link
from .panel import OutcomeFamily, PanelDataset

_REPO_ROOT = Path(__file__).parent.parent.parent

ModelT = TypeVar("ModelT", bound=BaseModel)


class RuntimeSettings(BaseModel):
    """Process-level settings read from environment variables."""

    workers: int = Field(default=1, ge=1, le=256, description="Parallel replication workers")
    executor: Literal["thread", "process"] = Field(
        default="thread", description="concurrent.futures executor kind"
    )
    max_failure_rate: float = Field(
        default=0.01, ge=0.0, lt=1.0, description="Replication failure share that aborts a study"
    )
    oracle_mc_n: int = Field(
        default=200_000, ge=100_000, description="Default Monte Carlo size for limit oracles"
    )

    @classmethod
    def from_env(cls, env_path: Path | None = None) -> "RuntimeSettings":
        """Load runtime settings from environment variables."""
        if env_path is None:
            env_path = _REPO_ROOT / ".env"

        load_dotenv(env_path)

        try:
            return cls(
                workers=int(os.getenv("TE_WORKERS", "1")),
                executor=os.getenv("TE_EXECUTOR", "thread").lower(),  # type: ignore[arg-type]
                max_failure_rate=float(os.getenv("TE_MAX_FAILURE_RATE", "0.01")),
                oracle_mc_n=int(os.getenv("TE_ORACLE_MC_N", "200000")),
            )
        except (ValueError, ValidationError) as e:
            raise ConfigError(f"Invalid runtime settings: {e}") from e


class FormulaConfig(BaseModel):
    """Conditioning sets and links of the nuisance working models.

    Unset term lists resolve against the dataset: propensity, outcome and comparator
    models use the time-varying covariates plus ``y_lag``; the eligibility model uses
    the baseline covariates. The outcome link follows the outcome family.
    """

    propensity_terms: list[str] | None = None
    outcome_terms: list[str] | None = None
    eligibility_terms: list[str] | None = None
    comparator_terms: list[str] | None = None
    propensity_link: Link = Link.LOGIT
    outcome_link: Link | None = None
    binary_outcome_link: Link = Link.LOGIT

    def model_post_init(self, __context: Any) -> None:
        """Reject links that cannot model the quantity they are assigned to."""
        if self.propensity_link == Link.IDENTITY:
            raise ValueError("propensity_link must be logit or probit")
        if self.binary_outcome_link == Link.IDENTITY:
            raise ValueError("binary_outcome_link must be logit or probit")

    def resolved(self, ds: PanelDataset) -> "FormulaConfig":
        """Fill unset fields from the dataset's columns and outcome family."""
        default_terms = [*ds.covariates, "y_lag"]
        outcome_link = self.outcome_link
        if outcome_link is None:
            outcome_link = (
                Link.IDENTITY
                if ds.outcome_family == OutcomeFamily.CONTINUOUS
                else self.binary_outcome_link
            )
        return FormulaConfig(
            propensity_terms=self.propensity_terms or default_terms,
            outcome_terms=self.outcome_terms or default_terms,
            eligibility_terms=self.eligibility_terms or list(ds.baseline_columns),
            comparator_terms=self.comparator_terms or default_terms,
            propensity_link=self.propensity_link,
            outcome_link=outcome_link,
            binary_outcome_link=self.binary_outcome_link,
        )

    def with_links(self, link: Link) -> "FormulaConfig":
        """Copy with propensity and binary-outcome links switched to ``link``."""
        outcome_link = self.outcome_link
        if outcome_link is not None and outcome_link != Link.IDENTITY:
            outcome_link = link
        return self.model_copy(
            update={"propensity_link": link, "outcome_link": outcome_link, "binary_outcome_link": link}
        )


def load_model_json(model_cls: type[ModelT], path: Path | str) -> ModelT:
    """Load a pydantic model from a JSON file.

    Raises:
        ConfigError: If the file is missing, malformed, or fails validation
    """
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError(f"Config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"Malformed JSON in {path}: {e}") from e
    try:
        return model_cls.model_validate(payload)
    except ValueError as e:
        raise ConfigError(f"Invalid {model_cls.__name__} in {path}: {e}") from e


@lru_cache(maxsize=1)
def get_settings() -> RuntimeSettings:
    """Get the process-wide runtime settings."""
    return RuntimeSettings.from_env()


@lru_cache(maxsize=1)
def get_config_dir() -> Path:
    """Get the directory holding shipped DGP and formula configs.

    Returns:
        TE_CONFIG_DIR if set, else configs/ at the repository root.
    """
    load_dotenv(_REPO_ROOT / ".env")

    config_dir = os.getenv("TE_CONFIG_DIR")
    if config_dir:
        return Path(config_dir).resolve()
    return (_REPO_ROOT / "configs").resolve()
