"""Pytest fixtures for testing."""

from collections.abc import Callable, Generator
from pathlib import Path

import pandas as pd
import pytest

from trial_estimands.cache import get_oracle_cache
from trial_estimands.config import get_config_dir, get_settings
from trial_estimands.estimators import ConditionalEligibility, NuisanceSet
from trial_estimands.glm import FittedModel, Link, ModelSpec, RowFilter
from trial_estimands.panel import Design, PanelDataset
from trial_estimands.simgen import DgpFamily, DgpSpec, generate


@pytest.fixture(autouse=True)
def clear_cached_state() -> Generator[None, None, None]:
    """Reset process-wide settings and the oracle memo between tests."""
    get_settings.cache_clear()
    get_config_dir.cache_clear()
    get_oracle_cache().clear()
    yield
    get_settings.cache_clear()
    get_config_dir.cache_clear()


@pytest.fixture
def runtime_env_vars() -> dict[str, str]:
    """Environment variables for runtime settings."""
    return {
        "TE_WORKERS": "4",
        "TE_EXECUTOR": "process",
        "TE_MAX_FAILURE_RATE": "0.05",
        "TE_ORACLE_MC_N": "150000",
    }


@pytest.fixture
def one_trial_ds() -> PanelDataset:
    """Two patients, one visit: (A, Y) = (1, 2) and (0, 1)."""
    frame = pd.DataFrame({"id": ["a", "b"], "t": [1, 1], "treat": [1, 0], "y": [2.0, 1.0]})
    return PanelDataset.from_frame(frame)


@pytest.fixture
def two_trial_ds() -> PanelDataset:
    """Four patients over two visits; a and b initiate at t=1, so half are eligible at t=2.

    With propensity 0.5 everywhere the trial contrasts are 1 (t=1) and 3 (t=2).
    """
    frame = pd.DataFrame(
        {
            "id": ["a", "a", "b", "b", "c", "c", "d", "d"],
            "t": [1, 2] * 4,
            "treat": [1, 1, 1, 1, 0, 1, 0, 0],
            "y": [2.0, 0.0, 2.0, 0.0, 1.0, 4.0, 1.0, 1.0],
        }
    )
    return PanelDataset.from_frame(frame)


@pytest.fixture
def binary_one_trial_ds() -> PanelDataset:
    """Eight patients at one visit; arm means 0.75 (treated) and 0.5 (control) under pi = 0.5."""
    frame = pd.DataFrame(
        {
            "id": [f"p{i}" for i in range(8)],
            "t": [1] * 8,
            "treat": [1, 1, 1, 1, 0, 0, 0, 0],
            "y": [1, 1, 1, 0, 1, 1, 0, 0],
        }
    )
    return PanelDataset.from_frame(frame)


def constant_propensity(t: int, value: float = 0.0) -> FittedModel:
    """Intercept-only logit propensity with linear predictor ``value`` (0 gives 0.5)."""
    spec = ModelSpec(response="treat", terms=(), link=Link.LOGIT, subset=RowFilter(t=t, eligible=True))
    return FittedModel.fixed(spec, [value])


def linear_outcome(t: int, intercept: float, effect: float) -> FittedModel:
    spec = ModelSpec(response="y", terms=("treat",), subset=RowFilter(t=t, eligible=True))
    return FittedModel.fixed(spec, [intercept, effect])


@pytest.fixture
def supplied_nuisance() -> Callable[..., NuisanceSet]:
    """Factory for a supplied NuisanceSet with propensity 0.5 at every trial."""

    def make(
        marginal: dict[int, float],
        outcome: dict[int, FittedModel] | None = None,
        conditional: dict[int, ConditionalEligibility] | None = None,
    ) -> NuisanceSet:
        return NuisanceSet(
            propensity={t: constant_propensity(t) for t in marginal},
            outcome=outcome or {},
            eligibility_marginal=marginal,
            eligibility_conditional=conditional or {},
            supplied=True,
        )

    return make


@pytest.fixture
def setting1_calendar() -> DgpSpec:
    return DgpSpec()


@pytest.fixture
def setting1_visit() -> DgpSpec:
    return DgpSpec(design=Design.VISIT_TIME)


@pytest.fixture
def binary_visit() -> DgpSpec:
    return DgpSpec(design=Design.VISIT_TIME, outcome_family=DgpFamily.BINARY_LOGIT)


@pytest.fixture
def calendar_ds(setting1_calendar: DgpSpec) -> PanelDataset:
    """Setting-1 calendar-time draw at n=400."""
    return generate(setting1_calendar, 400, seed=11).dataset


@pytest.fixture
def visit_ds(setting1_visit: DgpSpec) -> PanelDataset:
    """Setting-1 visit-time draw at n=400."""
    return generate(setting1_visit, 400, seed=12).dataset


@pytest.fixture
def binary_visit_ds(binary_visit: DgpSpec) -> PanelDataset:
    return generate(binary_visit, 600, seed=13).dataset


@pytest.fixture
def dgp_config(tmp_path: Path) -> Path:
    """A valid DgpSpec JSON file."""
    path = tmp_path / "setting1.json"
    path.write_text(DgpSpec(design=Design.VISIT_TIME).model_dump_json(), encoding="utf-8")
    return path
