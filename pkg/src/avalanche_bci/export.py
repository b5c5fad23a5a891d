"""Artifact writing: JSON results, CSV tables and ``provenance.json``.

Artifacts themselves are deterministic; the only timestamps live in the provenance
file, which keeps one entry per command.
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections.abc import Mapping, Sequence
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from pydantic import BaseModel

from .avalanche import ParameterCouple
from .exceptions import UpstreamMissingError
from .types import ProvenanceRecord
from .utils import package_versions

logger = logging.getLogger(__name__)

# Constants
PROVENANCE_FILENAME = "provenance.json"
STATS_FILENAME = "stats.json"
RMCORR_FILENAME = "rmcorr.json"
PREDICTIONS_FILENAME = "predictions.json"
REPORT_DIRECTORY = "report"

# Artifact -> command that writes it
PRODUCERS = {
    "features.csv": "features",
    STATS_FILENAME: "stats",
    RMCORR_FILENAME: "rmcorr",
    "roi_selection.json": "roi-select",
    PREDICTIONS_FILENAME: "predict",
}


def _json_default(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, BaseModel):
        return value.model_dump(mode="json")
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def _finite(value: Any) -> Any:
    if isinstance(value, float) and not np.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _finite(v) for k, v in value.items()}
    if isinstance(value, list | tuple):
        return [_finite(v) for v in value]
    return value


def write_json(path: str | Path, payload: BaseModel | Mapping[str, Any] | Sequence[Any]) -> Path:
    """Write a model or plain structure as indented JSON; NaN becomes ``null``."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(payload, BaseModel):
        text = payload.model_dump_json(indent=2)
    else:
        plain = json.loads(json.dumps(payload, default=_json_default))
        text = json.dumps(_finite(plain), indent=2, allow_nan=False)
    target.write_text(text + "\n")
    logger.debug("Wrote %s", target)
    return target


def write_frame(path: str | Path, frame: pd.DataFrame) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(target, index=False)
    logger.debug("Wrote %s (%d rows)", target, len(frame))
    return target


def require_artifact(out_dir: str | Path, name: str) -> Path:
    """Path of an upstream artifact.

    Raises:
        UpstreamMissingError: Naming the command that produces it
    """
    path = Path(out_dir) / name
    if not path.exists():
        raise UpstreamMissingError(f"missing {path}", PRODUCERS.get(name, "pipeline"))
    return path


def file_digest(path: str | Path) -> str:
    """SHA-256 of a file, hex encoded."""
    digest = hashlib.sha256()
    with Path(path).open("rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def write_provenance(
    out_dir: str | Path,
    command: str,
    *,
    inputs: Mapping[str, str | Path] | None = None,
    seeds: Mapping[str, int] | None = None,
    couples: Sequence[ParameterCouple] = (),
    settings: Mapping[str, Any] | None = None,
) -> Path:
    """Record one command's inputs, seeds, versions and couples in ``provenance.json``.

    Entries of other commands are preserved; the entry of ``command`` is replaced.
    """
    path = Path(out_dir) / PROVENANCE_FILENAME
    existing: dict[str, Any] = {}
    if path.is_file():
        try:
            existing = json.loads(path.read_text())
        except json.JSONDecodeError:
            logger.warning("Replacing unreadable %s", path)
    record = ProvenanceRecord(
        command=command,
        timestamp=datetime.now(timezone.utc).isoformat(timespec="seconds"),
        inputs={name: str(value) for name, value in (inputs or {}).items()},
        seeds=dict(seeds or {}),
        versions=package_versions(),
        couples=[c.to_record() for c in couples],
        settings=dict(settings or {}),
    )
    existing[command] = record
    return write_json(path, existing)
