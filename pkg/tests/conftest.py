"""Shared fixtures."""

from pathlib import Path

import pytest

from avalanche_bci.synth import generate

from .helpers import SMALL_SYNTH


@pytest.fixture(scope="session")
def small_synth_dir(tmp_path_factory: pytest.TempPathFactory) -> Path:
    """A small synthetic dataset with Hit/Miss labels, generated once per session."""
    root = tmp_path_factory.mktemp("small_synth")
    generate(SMALL_SYNTH, root)
    return root
