"""Run configuration: the validated ``RunConfig`` file format and the resolved
``PipelineConfig`` handed to the command implementations."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, cast

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .avalanche import ParameterCouple, canonical_grid, load_couples
from .exceptions import ConfigError
from .longitudinal import DEFAULT_CHANCE, DEFAULT_MAX_OUTER
from .stats import DEFAULT_ALPHA, DEFAULT_PERMUTATIONS, MIN_PERMUTATIONS
from .types import (
    ControlMode,
    Excursion,
    ModelKind,
    PermutationScheme,
    PipelineSettings,
    RoiReference,
    TrialFilterMode,
)
from .utils import resolve_output_directory, resolve_workers

logger = logging.getLogger(__name__)

# Constants
CANONICAL_GRID = "canonical"
ALL_ROIS = "all"
SELECTED_PREFIX = "selected:"


class RunConfig(BaseModel):
    """Validated run configuration; a JSON config file mirrors these fields.

    Example:
        ```json
        {"dataset": "synth_data", "couples": ["3:12"], "seed": 7, "model": "lsvc"}
        ```
    """

    model_config = ConfigDict(extra="forbid")

    dataset: str | None = None
    grid: str = CANONICAL_GRID
    couples: list[str] | None = None
    excursion: Excursion = "abs"
    alpha: float = Field(default=DEFAULT_ALPHA, gt=0, lt=1)
    chance: float = Field(default=DEFAULT_CHANCE, ge=0, le=100)
    seed: int = Field(default=0, ge=0)
    n_permutations: int = Field(default=DEFAULT_PERMUTATIONS, ge=MIN_PERMUTATIONS)
    permutation_scheme: PermutationScheme = "unrestricted"
    out: str | None = None
    trial_filter: TrialFilterMode = "all"
    model: ModelKind = "lsvc"
    control: ControlMode = "none"
    rois: str = ALL_ROIS
    roi_reference: RoiReference = "max"
    workers: int | None = Field(default=None, gt=0)
    max_outer: int = Field(default=DEFAULT_MAX_OUTER, gt=0)
    hyperparameter_grid: dict[str, list[float]] | None = None

    @field_validator("rois")
    @classmethod
    def _check_rois(cls, value: str) -> str:
        if value != ALL_ROIS and not (value.startswith(SELECTED_PREFIX) and len(value) > len(SELECTED_PREFIX)):
            raise ValueError(f"rois must be 'all' or 'selected:<file>', got {value!r}")
        return value

    @field_validator("couples")
    @classmethod
    def _check_couples(cls, value: list[str] | None) -> list[str] | None:
        if value is not None and not value:
            raise ValueError("couples must not be empty")
        return value

    @model_validator(mode="after")
    def _check_grid(self) -> RunConfig:
        if not self.grid:
            raise ValueError("grid must be 'canonical' or a couples file")
        if self.hyperparameter_grid is not None:
            empty = [name for name, values in self.hyperparameter_grid.items() if not values]
            if empty:
                raise ValueError(f"empty hyperparameter lists: {empty}")
        return self

    def to_settings(self) -> PipelineSettings:
        return cast(PipelineSettings, self.model_dump(exclude_none=True))


def load_run_config(path: str | Path) -> RunConfig:
    """Read a JSON config file.

    Raises:
        ConfigError: If the file is missing or not JSON
        pydantic.ValidationError: If the content does not match :class:`RunConfig`
    """
    source = Path(path)
    if not source.is_file():
        raise ConfigError(f"config file not found: {source}")
    try:
        raw = json.loads(source.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{source}: invalid JSON: {e}") from e
    logger.debug("Loaded run config from %s", source)
    return RunConfig.model_validate(raw)


class PipelineConfig:
    """Resolved settings shared by the pipeline commands.

    Holds every ``RunConfig`` value with its default filled in, resolves the worker
    count and output directory (setting > environment > default), and turns the
    grid selection into parameter couples.
    """

    def __init__(self, settings: PipelineSettings | None = None):
        """Initialize from a settings dict.

        Args:
            settings: Configuration dict. Supported keys:
                - dataset: Dataset directory or manifest path
                - grid: "canonical" or a couples JSON file
                - couples: "k:samples" strings (override grid)
                - excursion: "abs", "positive" or "negative" (default: "abs")
                - alpha: Significance level (default: 0.05)
                - chance: Control threshold in percent (default: 57)
                - seed: Master seed (default: 0)
                - n_permutations: Permutations per test (default: 10000)
                - permutation_scheme: "unrestricted" or "within_subject"
                - out: Output directory (AVALANCHE_BCI_OUT or ./avalanche_out if unset)
                - trial_filter: "all", "hit" or "miss" (default: "all")
                - model: "lsvr", "lsvc", "svr" or "svc" (default: "lsvc")
                - control: "none" or "shuffle" (default: "none")
                - rois: "all" or "selected:<file>" (default: "all")
                - roi_reference: Normalization reference of ROI maps (default: "max")
                - workers: Worker threads (AVALANCHE_BCI_WORKERS or 1 if unset)
                - max_outer: Alternating iterations of longitudinal fits (default: 50)
                - hyperparameter_grid: Lists overriding the default search grid
        """
        config = settings or {}

        self.dataset = config.get("dataset")
        self.grid = config.get("grid", CANONICAL_GRID)
        self.couples = config.get("couples")
        self.excursion: Excursion = config.get("excursion", "abs")
        self.alpha = config.get("alpha", DEFAULT_ALPHA)
        self.chance = config.get("chance", DEFAULT_CHANCE)
        self.seed = config.get("seed", 0)
        self.n_permutations = config.get("n_permutations", DEFAULT_PERMUTATIONS)
        self.permutation_scheme: PermutationScheme = config.get("permutation_scheme", "unrestricted")
        self.trial_filter: TrialFilterMode = config.get("trial_filter", "all")
        self.model: ModelKind = config.get("model", "lsvc")
        self.control: ControlMode = config.get("control", "none")
        self.rois = config.get("rois", ALL_ROIS)
        self.roi_reference: RoiReference = config.get("roi_reference", "max")
        self.max_outer = config.get("max_outer", DEFAULT_MAX_OUTER)
        self.hyperparameter_grid = config.get("hyperparameter_grid")
        self.out = resolve_output_directory(config)
        self.workers = resolve_workers(config)

        logger.debug(
            "Initialized PipelineConfig with dataset=%s, grid=%s, couples=%s, "
            "seed=%s, n_permutations=%s, out=%s, workers=%s",
            self.dataset,
            self.grid,
            self.couples,
            self.seed,
            self.n_permutations,
            self.out,
            self.workers,
        )

    @classmethod
    def from_run_config(cls, run_config: RunConfig) -> PipelineConfig:
        return cls(run_config.to_settings())

    @property
    def dataset_path(self) -> Path:
        """The dataset location.

        Raises:
            ConfigError: If no dataset was configured or it does not exist
        """
        if not self.dataset:
            raise ConfigError("no dataset given (use --dataset or the config file)")
        path = Path(self.dataset)
        if not path.exists():
            raise ConfigError(f"dataset not found: {path}")
        return path

    @property
    def selection_path(self) -> Path | None:
        """ROI selection file of ``rois="selected:<file>"``, else ``None``."""
        if self.rois == ALL_ROIS:
            return None
        return Path(self.rois[len(SELECTED_PREFIX):])

    def resolve_couples(self, sampling_rate_hz: float) -> list[ParameterCouple]:
        """Parameter couples from ``couples``, a grid file or the canonical grid."""
        if self.couples:
            return [ParameterCouple.parse(text, sampling_rate_hz) for text in self.couples]
        if self.grid == CANONICAL_GRID:
            return canonical_grid(sampling_rate_hz)
        return load_couples(self.grid, sampling_rate_hz)

    def get_settings(self, **overrides: Any) -> PipelineSettings:
        """Get the settings dictionary, e.g. for provenance records.

        Args:
            **overrides: Override specific settings

        Returns:
            Settings dictionary without unset values
        """
        settings: dict[str, Any] = {
            "dataset": self.dataset,
            "grid": self.grid,
            "couples": self.couples,
            "excursion": self.excursion,
            "alpha": self.alpha,
            "chance": self.chance,
            "seed": self.seed,
            "n_permutations": self.n_permutations,
            "permutation_scheme": self.permutation_scheme,
            "out": str(self.out),
            "trial_filter": self.trial_filter,
            "model": self.model,
            "control": self.control,
            "rois": self.rois,
            "roi_reference": self.roi_reference,
            "workers": self.workers,
            "max_outer": self.max_outer,
            "hyperparameter_grid": self.hyperparameter_grid,
        }

        # Apply overrides
        for key, value in overrides.items():
            settings[key] = value

        final_settings = {k: v for k, v in settings.items() if v is not None}

        if overrides:
            logger.debug("Generated settings with overrides: %s", overrides)

        return cast(PipelineSettings, final_settings)
