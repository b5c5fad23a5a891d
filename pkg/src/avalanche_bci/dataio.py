"""Dataset layout, manifest validation and lazy trial loading.

A dataset is a directory holding ``manifest.json`` plus one headerless CSV per trial
(one line per ROI, comma-separated samples). The manifest carries the per-(subject,
session) BCI scores and, optionally, per-trial Hit/Miss labels.
"""

from __future__ import annotations

import io
import json
import logging
import threading
from collections import Counter
from collections.abc import Iterator
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .exceptions import DatasetValidationError
from .types import CONDITIONS, Condition, TrialFilterMode, TrialLabel
from .utils import ordered_map

logger = logging.getLogger(__name__)

MANIFEST_FILENAME = "manifest.json"

# subject -> session -> condition -> list of relative trial paths
TrialIndex = dict[str, dict[str, dict[str, list[str]]]]
# subject -> session -> condition -> trial id -> label
LabelIndex = dict[str, dict[str, dict[str, dict[str, TrialLabel]]]]
CellKey = tuple[str, str, str]


class DatasetManifest(BaseModel):
    """Validated content of ``manifest.json``."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    subjects: list[str]
    sessions: list[str]
    conditions: list[Condition] = Field(default_factory=lambda: list(CONDITIONS))
    n_rois: int = Field(gt=0)
    sampling_rate_hz: float = Field(gt=0)
    roi_names: list[str]
    trials: TrialIndex
    scores: dict[str, dict[str, float]]
    trial_labels: LabelIndex | None = None

    @model_validator(mode="after")
    def _check_layout(self) -> DatasetManifest:
        if not self.subjects:
            raise ValueError("empty subject list")
        if not self.sessions:
            raise ValueError("empty session list")
        if len(set(self.sessions)) != len(self.sessions):
            raise ValueError("sessions must be unique and strictly ordered")
        if len(set(self.subjects)) != len(self.subjects):
            raise ValueError("duplicate subject ids")
        if len(set(self.conditions)) != len(self.conditions) or not self.conditions:
            raise ValueError("conditions must be a non-empty subset of {Rest, MI}")
        if len(self.roi_names) != self.n_rois:
            raise ValueError(
                f"roi_names has {len(self.roi_names)} entries, n_rois is {self.n_rois}"
            )
        for subject in self.subjects:
            for session in self.sessions:
                score = self.scores.get(subject, {}).get(session)
                if score is None:
                    raise ValueError(f"missing score for ({subject}, {session})")
                if not 0.0 <= score <= 100.0:
                    raise ValueError(
                        f"score {score} for ({subject}, {session}) outside [0, 100]"
                    )
        return self

    def trial_paths(self, subject: str, session: str, condition: str) -> list[str]:
        """Relative trial paths of one cell (empty when the cell has no trials)."""
        return self.trials.get(subject, {}).get(session, {}).get(condition, [])

    def label(
        self, subject: str, session: str, condition: str, trial_id: str
    ) -> TrialLabel | None:
        if self.trial_labels is None:
            return None
        cell = self.trial_labels.get(subject, {}).get(session, {}).get(condition, {})
        return cell.get(trial_id)


@dataclass(frozen=True)
class TrialRef:
    """Reference to one trial file of a dataset."""

    subject: str
    session: str
    condition: Condition
    trial_id: str
    path: str
    index: int
    label: TrialLabel | None = None

    @property
    def cell(self) -> CellKey:
        return (self.subject, self.session, self.condition)


@dataclass(frozen=True)
class TrialRecording:
    """One trial's ROI x time matrix with its coordinates."""

    data: np.ndarray
    subject: str
    session: str
    condition: Condition
    trial_id: str
    sampling_rate_hz: float

    @property
    def n_rois(self) -> int:
        return int(self.data.shape[0])

    @property
    def n_samples(self) -> int:
        return int(self.data.shape[1])


@dataclass(frozen=True)
class TrialFilter:
    """Predicate over (condition, label) selecting the trials of a view.

    ``None`` for a field means "any value".
    """

    conditions: frozenset[str] | None = None
    labels: frozenset[str] | None = None

    @classmethod
    def from_mode(cls, mode: TrialFilterMode) -> TrialFilter:
        """Build the filter behind ``--filter all|hit|miss``."""
        if mode == "all":
            return cls()
        return cls(labels=frozenset({"Hit" if mode == "hit" else "Miss"}))

    @property
    def references_labels(self) -> bool:
        return self.labels is not None

    def matches(self, condition: str, label: str | None) -> bool:
        if self.conditions is not None and condition not in self.conditions:
            return False
        return self.labels is None or label in self.labels


@dataclass
class _TrialCache:
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock)


class Dataset:
    """A validated dataset, or a filtered view of one.

    Trials load lazily and are memoized; views share the cache of the dataset they
    were derived from and never copy or mutate trial data.
    """

    def __init__(
        self,
        manifest: DatasetManifest,
        root: Path,
        refs: tuple[TrialRef, ...] | None = None,
        *,
        base_refs: tuple[TrialRef, ...] | None = None,
        cache: _TrialCache | None = None,
    ):
        self.manifest = manifest
        self.root = root
        all_refs = base_refs if base_refs is not None else _index_trials(manifest)
        self._base_refs = all_refs
        self.refs = refs if refs is not None else all_refs
        self._cache = cache or _TrialCache()

    def __iter__(self) -> Iterator[TrialRef]:
        return iter(self.refs)

    def __len__(self) -> int:
        return len(self.refs)

    @property
    def subjects(self) -> list[str]:
        return self.manifest.subjects

    @property
    def sessions(self) -> list[str]:
        return self.manifest.sessions

    @property
    def conditions(self) -> list[Condition]:
        return self.manifest.conditions

    @property
    def sampling_rate_hz(self) -> float:
        return self.manifest.sampling_rate_hz

    @property
    def has_labels(self) -> bool:
        return self.manifest.trial_labels is not None

    def score(self, subject: str, session: str) -> float:
        return self.manifest.scores[subject][session]

    def cell_refs(self, subject: str, session: str, condition: str) -> list[TrialRef]:
        """Trials of one (subject, session, condition) cell visible in this view."""
        return [r for r in self.refs if r.cell == (subject, session, condition)]

    def session_refs(self, subject: str, session: str) -> list[TrialRef]:
        """All trials of a (subject, session) pair in the underlying dataset.

        Normalization baselines use these, so every view of a dataset shares one
        z-scale per (subject, session).
        """
        return [
            r for r in self._base_refs if r.subject == subject and r.session == session
        ]

    def counts(self) -> dict[CellKey, int]:
        """Number of visible trials per (subject, session, condition) cell."""
        return dict(Counter(r.cell for r in self.refs))

    def load_trial(self, ref: TrialRef) -> TrialRecording:
        """Load (or fetch from the memo) one trial matrix.

        Raises:
            DatasetValidationError: On unparseable files, wrong row count or
                non-finite samples
        """
        cache = self._cache
        with cache.lock:
            data = cache.arrays.get(ref.path)
        if data is None:
            data = read_trial_csv(self.root / ref.path, self.manifest.n_rois)
            data.setflags(write=False)
            with cache.lock:
                data = cache.arrays.setdefault(ref.path, data)
        return TrialRecording(
            data=data,
            subject=ref.subject,
            session=ref.session,
            condition=ref.condition,
            trial_id=ref.trial_id,
            sampling_rate_hz=self.manifest.sampling_rate_hz,
        )

    def trials(self) -> Iterator[TrialRecording]:
        for ref in self.refs:
            yield self.load_trial(ref)

    def validate_trials(self, workers: int = 1) -> None:
        """Parse every trial file of the view (files load in parallel)."""
        ordered_map(self.load_trial, self.refs, workers)
        logger.info("Validated %d trial files under %s", len(self.refs), self.root)

    def with_refs(self, refs: tuple[TrialRef, ...]) -> Dataset:
        """View of this dataset exposing ``refs`` only."""
        return Dataset(
            self.manifest,
            self.root,
            refs,
            base_refs=self._base_refs,
            cache=self._cache,
        )


def _index_trials(manifest: DatasetManifest) -> tuple[TrialRef, ...]:
    refs: list[TrialRef] = []
    for subject in manifest.subjects:
        for session in manifest.sessions:
            for condition in manifest.conditions:
                paths = manifest.trial_paths(subject, session, condition)
                seen: dict[str, str] = {}
                for index, rel_path in enumerate(paths):
                    trial_id = Path(rel_path).stem
                    if trial_id in seen:
                        raise DatasetValidationError(
                            f"duplicate trial id {trial_id!r} in {subject}/{session}/{condition}: "
                            f"{seen[trial_id]} and {rel_path}",
                            path=rel_path,
                        )
                    seen[trial_id] = rel_path
                    refs.append(
                        TrialRef(
                            subject=subject,
                            session=session,
                            condition=condition,
                            trial_id=trial_id,
                            path=rel_path,
                            index=index,
                            label=manifest.label(subject, session, condition, trial_id),
                        )
                    )
    return tuple(refs)


def read_trial_csv(path: Path, n_rois: int) -> np.ndarray:
    """Read one headerless trial CSV into an ``n_rois x n_samples`` float matrix.

    Args:
        path: Trial file
        n_rois: Expected number of rows

    Returns:
        Float64 matrix read at round-trip precision

    Raises:
        DatasetValidationError: If the file is missing, unparseable, has rows of
            unequal length or the wrong number of rows, or holds non-finite values
    """
    if not path.is_file():
        raise DatasetValidationError("missing trial file", path=str(path))
    text = path.read_text()
    widths = [line.count(",") + 1 for line in text.splitlines() if line.strip()]
    ragged = [row for row, width in enumerate(widths) if width != widths[0]]
    if ragged:
        row = ragged[0]
        raise DatasetValidationError(
            f"ragged rows: {widths[row]} fields, expected {widths[0]} as in row 1",
            path=str(path),
            location=f"row {row + 1}",
        )
    try:
        frame = pd.read_csv(
            io.StringIO(text), header=None, dtype=float, float_precision="round_trip"
        )
    except (pd.errors.ParserError, pd.errors.EmptyDataError, ValueError) as e:
        raise DatasetValidationError(f"unparseable trial file: {e}", path=str(path)) from e

    data = frame.to_numpy(dtype=np.float64)
    if data.shape[0] != n_rois:
        raise DatasetValidationError(
            f"shape mismatch: {data.shape[0]} rows, expected n_rois={n_rois}",
            path=str(path),
        )
    if data.shape[1] < 1:
        raise DatasetValidationError("trial has no samples", path=str(path))
    bad = np.argwhere(~np.isfinite(data))
    if bad.size:
        row, col = (int(v) for v in bad[0])
        raise DatasetValidationError(
            "non-finite value",
            path=str(path),
            location=f"row {row + 1}, column {col + 1}",
        )
    return data


def write_trial_csv(path: Path, data: np.ndarray) -> None:
    """Write a trial matrix as headerless CSV at round-trip float precision."""
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(np.asarray(data, dtype=np.float64)).to_csv(
        path, header=False, index=False
    )


def write_manifest(root: Path, manifest: DatasetManifest) -> Path:
    """Write ``manifest.json`` into ``root`` and return its path."""
    root.mkdir(parents=True, exist_ok=True)
    manifest_path = root / MANIFEST_FILENAME
    manifest_path.write_text(manifest.model_dump_json(indent=2, exclude_none=True))
    return manifest_path


def load_dataset(
    manifest_path: str | Path, *, check_trials: bool = False, workers: int = 1
) -> Dataset:
    """Load and validate a dataset from its manifest.

    Trial matrices are loaded lazily on first access and memoized. Trial files must
    exist at load time; their content is parsed on access, or immediately when
    ``check_trials`` is set.

    Args:
        manifest_path: Path to ``manifest.json`` (or to the dataset directory)
        check_trials: Parse every trial file now
        workers: Threads used when ``check_trials`` is set

    Returns:
        Validated dataset

    Raises:
        DatasetValidationError: On any schema or file problem, naming the file and
            location
    """
    path = Path(manifest_path)
    if path.is_dir():
        path = path / MANIFEST_FILENAME
    if not path.is_file():
        raise DatasetValidationError("manifest not found", path=str(path))

    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetValidationError(
            f"invalid JSON: {e.msg}", path=str(path), location=f"line {e.lineno}"
        ) from e
    try:
        manifest = DatasetManifest.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        location = "/".join(str(p) for p in first["loc"]) or "manifest"
        raise DatasetValidationError(first["msg"], path=str(path), location=location) from e

    root = path.parent
    dataset = Dataset(manifest, root)
    _check_references(dataset, path)
    logger.info(
        "Loaded dataset %s: %d subjects, %d sessions, %d trials",
        root,
        len(manifest.subjects),
        len(manifest.sessions),
        len(dataset),
    )
    if check_trials:
        dataset.validate_trials(workers)
    return dataset


def _check_references(dataset: Dataset, manifest_path: Path) -> None:
    manifest = dataset.manifest
    for ref in dataset.refs:
        if not (dataset.root / ref.path).is_file():
            raise DatasetValidationError(
                "missing trial file",
                path=str(dataset.root / ref.path),
                location=f"trials/{ref.subject}/{ref.session}/{ref.condition}",
            )
    if manifest.trial_labels is None:
        return
    known = {(r.subject, r.session, r.condition, r.trial_id) for r in dataset.refs}
    for subject, sessions in manifest.trial_labels.items():
        for session, conditions in sessions.items():
            for condition, labels in conditions.items():
                for trial_id in labels:
                    if (subject, session, condition, trial_id) not in known:
                        raise DatasetValidationError(
                            "label references an unknown trial",
                            path=str(manifest_path),
                            location=f"trial_labels/{subject}/{session}/{condition}/{trial_id}",
                        )


def filter_trials(dataset: Dataset, trial_filter: TrialFilter) -> Dataset:
    """Return a view exposing only the trials matching ``trial_filter``.

    Args:
        dataset: Dataset or view to filter
        trial_filter: Predicate over (condition, label)

    Returns:
        A view sharing the trial cache of ``dataset``

    Raises:
        DatasetValidationError: If the predicate references labels but the dataset
            has none
    """
    if trial_filter.references_labels and not dataset.has_labels:
        raise DatasetValidationError(
            "trial filter references Hit/Miss labels but the manifest has no trial_labels"
        )
    refs = tuple(r for r in dataset.refs if trial_filter.matches(r.condition, r.label))
    view = dataset.with_refs(refs)
    for cell, count in sorted(view.counts().items()):
        logger.debug("View cell %s: %d trials", cell, count)
    logger.info("Trial filter kept %d of %d trials", len(refs), len(dataset))
    return view
