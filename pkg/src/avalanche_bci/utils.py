"""Utility functions shared by the avalanche-bci modules."""

from __future__ import annotations

import logging
import os
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import TypeVar

import numpy as np

from .exceptions import ConfigError
from .types import PipelineSettings

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

# Constants
DEFAULT_WORKERS = 1
DEFAULT_OUTPUT_DIRECTORY = "avalanche_out"
WORKERS_ENV_VAR = "AVALANCHE_BCI_WORKERS"
OUTPUT_ENV_VAR = "AVALANCHE_BCI_OUT"


def resolve_workers(settings: PipelineSettings | None = None) -> int:
    """Resolve the number of worker threads.

    Resolution priority:
    1. workers from settings (if provided)
    2. AVALANCHE_BCI_WORKERS environment variable
    3. DEFAULT_WORKERS

    Args:
        settings: Optional settings containing workers

    Returns:
        Positive worker count

    Raises:
        ConfigError: If the resolved value is not a positive integer
    """
    # Priority 1: Settings
    if settings and settings.get("workers"):
        workers = int(settings["workers"])
        logger.debug("Using %d workers from settings", workers)
    else:
        # Priority 2: Environment variable
        env_value = os.environ.get(WORKERS_ENV_VAR)
        if env_value:
            try:
                workers = int(env_value)
            except ValueError as e:
                raise ConfigError(
                    f"{WORKERS_ENV_VAR} must be an integer, got {env_value!r}"
                ) from e
            logger.debug("Using %d workers from %s", workers, WORKERS_ENV_VAR)
        else:
            # Priority 3: Default
            workers = DEFAULT_WORKERS

    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")
    return workers


def resolve_output_directory(settings: PipelineSettings | None = None) -> Path:
    """Resolve the output directory (settings > AVALANCHE_BCI_OUT > default)."""
    if settings and settings.get("out"):
        return Path(settings["out"])
    env_path = os.environ.get(OUTPUT_ENV_VAR)
    if env_path:
        logger.debug("Using output directory from %s: %s", OUTPUT_ENV_VAR, env_path)
        return Path(env_path)
    return Path(DEFAULT_OUTPUT_DIRECTORY)


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Create an independent generator for one named stream of a master seed.

    Each distinct key tuple gives its own stream, so results do not depend on how
    work is split over threads.

    Args:
        seed: Master seed
        *keys: Non-negative integers identifying the stream (e.g. permutation index)

    Returns:
        A numpy Generator seeded from ``SeedSequence(seed, spawn_key=keys)``
    """
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=keys))


def ordered_map(
    func: Callable[[T], R], items: Iterable[T], workers: int = 1
) -> list[R]:
    """Map ``func`` over ``items`` and return results in input order.

    Args:
        func: Function applied to each item
        items: Work items
        workers: Thread count; 1 runs inline

    Returns:
        Results in the order of ``items`` regardless of completion order
    """
    work: Sequence[T] = list(items)
    if workers <= 1 or len(work) <= 1:
        return [func(item) for item in work]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(func, work))


def package_versions() -> dict[str, str]:
    """Versions of this package and its numerical dependencies, for provenance."""
    versions: dict[str, str] = {}
    for name in ("avalanche-bci", "numpy", "numba", "scipy", "pandas", "scikit-learn", "pydantic"):
        try:
            versions[name] = version(name)
        except PackageNotFoundError:
            versions[name] = "unknown"
    return versions
