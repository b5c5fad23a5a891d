"""Avalanche detection and trial-level avalanche features.

Signals are z-scored per ROI against a (subject, session) baseline, thresholded at
``k`` (after normalization the threshold mean + k * sd is numerically ``k``), and
scanned for avalanches: maximal runs of samples with at least one active ROI that
last at least the couple's minimum duration.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from .dataio import Dataset, TrialRef
from .exceptions import ConfigError, UpstreamMissingError, ZeroVarianceError
from .types import CoupleRecord, Excursion
from .utils import ordered_map

logger = logging.getLogger(__name__)

# Canonical parameter grid: k -> valid minimum durations in ms
CANONICAL_TABLE: dict[int, tuple[float, ...]] = {
    1: (5.0, 50.0, 80.0),
    2: (5.0, 50.0, 80.0),
    3: (5.0, 50.0),
    4: (5.0,),
    5: (5.0,),
}
CANONICAL_RATE_HZ = 250.0
# Canonical sample counts at 250 Hz (not the plain ms * rate arithmetic)
CANONICAL_SAMPLES: dict[float, int] = {5.0: 2, 50.0: 12, 80.0: 20}
MIN_ROUNDED_SAMPLES = 2

FEATURES_FILENAME = "features.csv"
PROFILES_FILENAME = "roi_profiles.csv"
COUPLES_FILENAME = "couples.json"

KEY_COLUMNS = ["subject", "session", "condition", "trial", "k", "min_dur_samples"]
FEATURE_COLUMNS = [*KEY_COLUMNS, "n_avalanches", "mean_length", "weighted_activations"]
_STRING_DTYPES = {"subject": str, "session": str, "condition": str, "trial": str}

# Marker for features of trials without avalanches
UNDEFINED = float("nan")


def ms_to_samples(duration_ms: float, sampling_rate_hz: float) -> int:
    """Convert a minimum duration from milliseconds to samples.

    At 250 Hz the canonical durations map to the fixed counts
    (5 ms -> 2, 50 ms -> 12, 80 ms -> 20); anything else rounds to the nearest
    integer with a floor of 2 samples.

    Raises:
        ValueError: If either argument is not positive
    """
    if duration_ms <= 0 or sampling_rate_hz <= 0:
        raise ValueError(
            f"duration and sampling rate must be positive, got {duration_ms} ms at "
            f"{sampling_rate_hz} Hz"
        )
    if sampling_rate_hz == CANONICAL_RATE_HZ and duration_ms in CANONICAL_SAMPLES:
        return CANONICAL_SAMPLES[duration_ms]
    return max(MIN_ROUNDED_SAMPLES, int(np.floor(duration_ms * sampling_rate_hz / 1000 + 0.5)))


@dataclass(frozen=True)
class ParameterCouple:
    """A (z-threshold multiplier, minimum duration) pair.

    Couples outside the canonical grid are allowed but carry ``extended=True``.
    """

    k: int
    min_duration_samples: int
    min_duration_ms: float = field(default=0.0, compare=False)
    extended: bool = field(default=False, compare=False)

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.min_duration_samples < 1:
            raise ValueError(
                f"min_duration_samples must be >= 1, got {self.min_duration_samples}"
            )

    @property
    def label(self) -> str:
        return f"k{self.k}_d{self.min_duration_samples}"

    @classmethod
    def from_ms(
        cls, k: int, duration_ms: float, sampling_rate_hz: float = CANONICAL_RATE_HZ
    ) -> ParameterCouple:
        """Build a couple from a duration in ms, flagging non-canonical pairs."""
        return cls(
            k=k,
            min_duration_samples=ms_to_samples(duration_ms, sampling_rate_hz),
            min_duration_ms=float(duration_ms),
            extended=duration_ms not in CANONICAL_TABLE.get(k, ()),
        )

    @classmethod
    def parse(
        cls, text: str, sampling_rate_hz: float = CANONICAL_RATE_HZ
    ) -> ParameterCouple:
        """Parse the ``k:samples`` form used on the command line.

        Example:
            ```python
            ParameterCouple.parse("3:12")  # k=3, 12 samples (50 ms at 250 Hz)
            ```

        Raises:
            ConfigError: If the text is not two positive integers separated by ':'
        """
        try:
            k_text, samples_text = text.split(":")
            k, samples = int(k_text), int(samples_text)
            for couple in canonical_grid(sampling_rate_hz):
                if (couple.k, couple.min_duration_samples) == (k, samples):
                    return couple
            return cls(
                k=k,
                min_duration_samples=samples,
                min_duration_ms=samples * 1000.0 / sampling_rate_hz,
                extended=True,
            )
        except ValueError as e:
            raise ConfigError(f"invalid couple {text!r}, expected 'k:samples': {e}") from e

    def to_record(self) -> CoupleRecord:
        return CoupleRecord(
            k=self.k,
            min_dur_samples=self.min_duration_samples,
            min_dur_ms=self.min_duration_ms,
            extended=self.extended,
            label=self.label,
        )

    @classmethod
    def from_record(cls, record: CoupleRecord | dict[str, Any]) -> ParameterCouple:
        return cls(
            k=int(record["k"]),
            min_duration_samples=int(record["min_dur_samples"]),
            min_duration_ms=float(record.get("min_dur_ms", 0.0)),
            extended=bool(record.get("extended", False)),
        )


def canonical_grid(sampling_rate_hz: float = CANONICAL_RATE_HZ) -> list[ParameterCouple]:
    """The ten canonical couples, ordered by k then duration."""
    return [
        ParameterCouple.from_ms(k, ms, sampling_rate_hz)
        for k, durations in CANONICAL_TABLE.items()
        for ms in durations
    ]


def load_couples(path: str | Path, sampling_rate_hz: float = CANONICAL_RATE_HZ) -> list[ParameterCouple]:
    """Read a couple grid file: a JSON list of ``"k:samples"`` strings or records.

    Raises:
        ConfigError: If the file is missing, malformed or empty
    """
    grid_path = Path(path)
    if not grid_path.is_file():
        raise ConfigError(f"grid file not found: {grid_path}")
    try:
        entries = json.loads(grid_path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{grid_path}: invalid JSON: {e.msg}") from e
    if isinstance(entries, dict):
        entries = entries.get("couples", [])
    couples = [
        ParameterCouple.parse(entry, sampling_rate_hz)
        if isinstance(entry, str)
        else ParameterCouple.from_record(entry)
        for entry in entries
    ]
    if not couples:
        raise ConfigError(f"{grid_path}: empty parameter grid")
    return couples


@dataclass(frozen=True)
class Baseline:
    """Per-ROI mean and standard deviation used for z-scoring."""

    mean: np.ndarray
    std: np.ndarray

    def restrict(self, roi_indices: Sequence[int]) -> Baseline:
        idx = np.asarray(roi_indices, dtype=int)
        return Baseline(self.mean[idx], self.std[idx])


def compute_baseline(matrices: Iterable[np.ndarray]) -> Baseline:
    """Per-ROI mean and population sd over the concatenation of ``matrices``."""
    stacked = np.concatenate([np.asarray(m, dtype=np.float64) for m in matrices], axis=1)
    return Baseline(mean=stacked.mean(axis=1), std=stacked.std(axis=1))


def normalize(
    data: np.ndarray,
    baseline: Baseline,
    roi_names: Sequence[str] | None = None,
    context: str = "",
) -> np.ndarray:
    """Z-score each ROI row: ``(data[r] - mean[r]) / std[r]``.

    Args:
        data: ROI x time matrix
        baseline: Per-ROI mean and sd
        roi_names: Names used in error messages
        context: Cell coordinates used in error messages

    Returns:
        Normalized matrix of the same shape

    Raises:
        ZeroVarianceError: If a ROI's baseline sd is zero
    """
    matrix = np.asarray(data, dtype=np.float64)
    if matrix.shape[0] != baseline.std.shape[0]:
        raise ValueError(
            f"baseline has {baseline.std.shape[0]} ROIs, data has {matrix.shape[0]}"
        )
    constant = np.flatnonzero(~(baseline.std > 0))
    if constant.size:
        roi = int(constant[0])
        name = roi_names[roi] if roi_names is not None else None
        logger.error("Zero-variance ROI %d%s", roi, f" in {context}" if context else "")
        raise ZeroVarianceError(roi, name, context)
    return (matrix - baseline.mean[:, None]) / baseline.std[:, None]


def binarize(z: np.ndarray, k: float, excursion: Excursion = "abs") -> np.ndarray:
    """Mark samples beyond the threshold ``k`` as active (1).

    ``abs`` uses ``|z| > k``, ``positive`` uses ``z > k`` and ``negative``
    uses ``z < -k``.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    z = np.asarray(z, dtype=np.float64)
    if excursion == "abs":
        active = np.abs(z) > k
    elif excursion == "positive":
        active = z > k
    elif excursion == "negative":
        active = z < -k
    else:
        raise ValueError(f"unknown excursion mode {excursion!r}")
    return active.astype(np.uint8)


@dataclass(frozen=True)
class AvalancheSegment:
    """Half-open interval ``[start, end)`` of network activity."""

    start: int
    end: int
    activation_count: int
    active_rois: np.ndarray = field(compare=False, repr=False)

    @property
    def length(self) -> int:
        return self.end - self.start


def _segment_arrays(
    binary: np.ndarray, min_duration_samples: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Starts, ends and per-ROI activation counts (n_rois x n_segments)."""
    matrix = np.asarray(binary)
    if matrix.ndim != 2 or matrix.size == 0:
        raise ValueError(f"binary matrix must be a nonempty 2-D array, got shape {matrix.shape}")
    if min_duration_samples < 1:
        raise ValueError(f"min_duration_samples must be >= 1, got {min_duration_samples}")
    active_cols = matrix.any(axis=0).astype(np.int8)
    edges = np.diff(np.concatenate(([0], active_cols, [0])))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    keep = (ends - starts) >= min_duration_samples
    starts, ends = starts[keep], ends[keep]
    cumulative = np.zeros((matrix.shape[0], matrix.shape[1] + 1), dtype=np.int64)
    np.cumsum(matrix, axis=1, out=cumulative[:, 1:])
    roi_counts = cumulative[:, ends] - cumulative[:, starts]
    return starts, ends, roi_counts


def detect_avalanches(
    binary: np.ndarray, min_duration_samples: int
) -> list[AvalancheSegment]:
    """Find maximal runs of columns with at least one active ROI.

    Runs shorter than ``min_duration_samples`` are dropped.

    Args:
        binary: ROI x time 0/1 matrix
        min_duration_samples: Minimum run length to keep

    Returns:
        Segments in temporal order

    Example:
        ```python
        binary = np.zeros((3, 10), dtype=np.uint8)
        binary[0, 2:6] = 1
        detect_avalanches(binary, 2)  # one segment [2, 6), length 4
        ```
    """
    starts, ends, roi_counts = _segment_arrays(binary, min_duration_samples)
    return [
        AvalancheSegment(
            start=int(s),
            end=int(e),
            activation_count=int(roi_counts[:, i].sum()),
            active_rois=roi_counts[:, i].copy(),
        )
        for i, (s, e) in enumerate(zip(starts, ends, strict=True))
    ]


@dataclass(frozen=True)
class TrialFeatures:
    """Avalanche features of one trial; NaN marks undefined features."""

    mean_avalanche_length: float
    weighted_mean_activations: float
    n_avalanches: int
    roi_profile: np.ndarray = field(compare=False, repr=False)

    @property
    def is_defined(self) -> bool:
        return self.n_avalanches > 0


def _features(lengths: np.ndarray, roi_counts: np.ndarray) -> TrialFeatures:
    n_rois = roi_counts.shape[0]
    if lengths.size == 0:
        return TrialFeatures(UNDEFINED, UNDEFINED, 0, np.full(n_rois, UNDEFINED))
    weights = lengths.astype(np.float64)
    total = weights.sum()
    roi_profile = (roi_counts * weights).sum(axis=1) / total
    counts = roi_counts.sum(axis=0)
    return TrialFeatures(
        mean_avalanche_length=float(weights.mean()),
        weighted_mean_activations=float((counts * weights).sum() / total),
        n_avalanches=int(lengths.size),
        roi_profile=roi_profile,
    )


def trial_features(
    segments: Sequence[AvalancheSegment], binary: np.ndarray
) -> TrialFeatures:
    """Trial-level features from detected segments.

    ``weighted_mean_activations`` is the length-weighted mean of per-avalanche
    activation counts; ``roi_profile[r]`` is the same weighted mean restricted to
    ROI ``r``, so the profile sums to ``weighted_mean_activations``.
    """
    n_rois = int(np.asarray(binary).shape[0])
    lengths = np.array([seg.length for seg in segments], dtype=np.int64)
    if segments:
        roi_counts = np.column_stack([seg.active_rois for seg in segments])
    else:
        roi_counts = np.zeros((n_rois, 0), dtype=np.int64)
    return _features(lengths, roi_counts)


def features_from_binary(binary: np.ndarray, min_duration_samples: int) -> TrialFeatures:
    """Detect and summarize in one pass, without building segment objects."""
    starts, ends, roi_counts = _segment_arrays(binary, min_duration_samples)
    return _features(ends - starts, roi_counts)


@dataclass
class FeatureTable:
    """Trial-level features for every (subject, session, condition, trial, couple).

    ``frame`` holds one row per trial and couple with the columns of
    ``FEATURE_COLUMNS``; ``roi_profiles`` holds the matching per-ROI profiles.
    """

    frame: pd.DataFrame
    roi_profiles: np.ndarray
    roi_names: list[str]
    couples: list[ParameterCouple]
    subjects: list[str]
    sessions: list[str]
    sampling_rate_hz: float = CANONICAL_RATE_HZ
    excursion: Excursion = "abs"

    def __len__(self) -> int:
        return len(self.frame)

    def couple_mask(self, couple: ParameterCouple) -> np.ndarray:
        return np.asarray(
            (self.frame["k"] == couple.k)
            & (self.frame["min_dur_samples"] == couple.min_duration_samples)
        )

    def for_couple(self, couple: ParameterCouple) -> FeatureTable:
        """Rows of a single couple."""
        mask = self.couple_mask(couple)
        return FeatureTable(
            frame=self.frame.loc[mask].reset_index(drop=True),
            roi_profiles=self.roi_profiles[mask],
            roi_names=self.roi_names,
            couples=[couple],
            subjects=self.subjects,
            sessions=self.sessions,
            sampling_rate_hz=self.sampling_rate_hz,
            excursion=self.excursion,
        )

    def cell_means(self) -> pd.DataFrame:
        """Per (subject, session, condition, couple) means across trials.

        Trials without avalanches are excluded from the means; ``n_excluded``
        reports how many.
        """
        grouped = self.frame.groupby(
            ["subject", "session", "condition", "k", "min_dur_samples"], sort=False
        )
        means = grouped.agg(
            n_trials=("trial", "size"),
            n_defined=("mean_length", "count"),
            mean_length=("mean_length", "mean"),
            weighted_activations=("weighted_activations", "mean"),
        ).reset_index()
        means["n_excluded"] = means["n_trials"] - means["n_defined"]
        excluded = int(means["n_excluded"].sum())
        if excluded:
            logger.info("%d trials without avalanches excluded from cell means", excluded)
        return means.drop(columns="n_defined")

    def profile_frame(self) -> pd.DataFrame:
        keys = self.frame[KEY_COLUMNS].reset_index(drop=True)
        profiles = pd.DataFrame(self.roi_profiles, columns=self.roi_names)
        return pd.concat([keys, profiles], axis=1)

    def to_csv(self, directory: str | Path) -> list[Path]:
        """Write ``features.csv``, ``roi_profiles.csv`` and ``couples.json``."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        features_path = out / FEATURES_FILENAME
        profiles_path = out / PROFILES_FILENAME
        couples_path = out / COUPLES_FILENAME
        self.frame[FEATURE_COLUMNS].to_csv(features_path, index=False)
        self.profile_frame().to_csv(profiles_path, index=False)
        couples_path.write_text(
            json.dumps(
                {
                    "couples": [c.to_record() for c in self.couples],
                    "sampling_rate_hz": self.sampling_rate_hz,
                    "excursion": self.excursion,
                    "subjects": self.subjects,
                    "sessions": self.sessions,
                    "roi_names": self.roi_names,
                },
                indent=2,
            )
        )
        logger.info("Wrote %d feature rows to %s", len(self.frame), features_path)
        return [features_path, profiles_path, couples_path]

    @classmethod
    def from_csv(cls, directory: str | Path) -> FeatureTable:
        """Read a table written by :meth:`to_csv`.

        Raises:
            UpstreamMissingError: If the feature artifacts are absent
        """
        source = Path(directory)
        paths = [source / name for name in (FEATURES_FILENAME, PROFILES_FILENAME, COUPLES_FILENAME)]
        missing = [p.name for p in paths if not p.is_file()]
        if missing:
            raise UpstreamMissingError(
                f"feature artifacts missing in {source}: {', '.join(missing)}", "features"
            )
        meta = json.loads(paths[2].read_text())
        frame = pd.read_csv(paths[0], dtype=_STRING_DTYPES, float_precision="round_trip")
        profiles = pd.read_csv(paths[1], dtype=_STRING_DTYPES, float_precision="round_trip")
        roi_names = list(meta["roi_names"])
        return cls(
            frame=frame,
            roi_profiles=profiles[roi_names].to_numpy(dtype=np.float64),
            roi_names=roi_names,
            couples=[ParameterCouple.from_record(r) for r in meta["couples"]],
            subjects=list(meta["subjects"]),
            sessions=list(meta["sessions"]),
            sampling_rate_hz=float(meta["sampling_rate_hz"]),
            excursion=meta["excursion"],
        )


@dataclass
class _SessionRows:
    rows: list[tuple[Any, ...]] = field(default_factory=list)
    profiles: list[np.ndarray] = field(default_factory=list)


def _session_features(
    dataset: Dataset,
    subject: str,
    session: str,
    refs: list[TrialRef],
    couples: Sequence[ParameterCouple],
    roi_indices: np.ndarray | None,
    excursion: Excursion,
) -> _SessionRows:
    result = _SessionRows()
    baseline_refs = dataset.session_refs(subject, session)
    baseline = compute_baseline(dataset.load_trial(r).data for r in baseline_refs)
    roi_names = dataset.manifest.roi_names
    if roi_indices is not None:
        baseline = baseline.restrict(roi_indices)
        roi_names = [roi_names[i] for i in roi_indices]
    thresholds = sorted({c.k for c in couples})
    for ref in refs:
        data = dataset.load_trial(ref).data
        if roi_indices is not None:
            data = data[roi_indices]
        context = f"subject {subject}, session {session}, condition {ref.condition}, trial {ref.trial_id}"
        z = normalize(data, baseline, roi_names, context)
        binaries = {k: binarize(z, k, excursion) for k in thresholds}
        for couple in couples:
            features = features_from_binary(binaries[couple.k], couple.min_duration_samples)
            result.rows.append(
                (
                    subject,
                    session,
                    ref.condition,
                    ref.trial_id,
                    couple.k,
                    couple.min_duration_samples,
                    features.n_avalanches,
                    features.mean_avalanche_length,
                    features.weighted_mean_activations,
                )
            )
            result.profiles.append(features.roi_profile)
    logger.debug(
        "Computed features for (%s, %s): %d trials x %d couples",
        subject,
        session,
        len(refs),
        len(couples),
    )
    return result


def compute_feature_table(
    dataset: Dataset,
    couples: Sequence[ParameterCouple],
    *,
    roi_indices: Sequence[int] | None = None,
    excursion: Excursion = "abs",
    workers: int = 1,
) -> FeatureTable:
    """Compute trial features for every trial of ``dataset`` and every couple.

    Normalization baselines are taken per (subject, session) over all trials of the
    underlying dataset, so filtered views share the z-scale of the full data.
    (subject, session) cells run in parallel; rows are merged in manifest order.

    Args:
        dataset: Dataset or filtered view
        couples: Parameter couples to evaluate
        roi_indices: Restrict detection to these ROI rows (after normalization)
        excursion: Thresholding mode
        workers: Thread count

    Returns:
        Feature table with one row per (trial, couple)

    Raises:
        ZeroVarianceError: If a ROI is constant over a (subject, session) baseline
    """
    if not couples:
        raise ConfigError("empty parameter grid")
    roi_idx = None if roi_indices is None else np.asarray(sorted(roi_indices), dtype=int)
    roi_names = dataset.manifest.roi_names
    if roi_idx is not None:
        if roi_idx.size == 0:
            raise ValueError("roi_indices is empty")
        roi_names = [roi_names[i] for i in roi_idx]

    cells = [
        (subject, session, refs)
        for subject in dataset.subjects
        for session in dataset.sessions
        if (refs := [r for r in dataset.refs if r.subject == subject and r.session == session])
    ]

    def run(cell: tuple[str, str, list[TrialRef]]) -> _SessionRows:
        subject, session, refs = cell
        return _session_features(dataset, subject, session, refs, couples, roi_idx, excursion)

    parts = ordered_map(run, cells, workers)
    rows = [row for part in parts for row in part.rows]
    profiles = [p for part in parts for p in part.profiles]
    frame = pd.DataFrame(rows, columns=FEATURE_COLUMNS)
    roi_profiles = (
        np.vstack(profiles) if profiles else np.zeros((0, len(roi_names)), dtype=np.float64)
    )
    logger.info(
        "Feature table: %d rows (%d cells, %d couples, %d ROIs)",
        len(frame),
        len(cells),
        len(couples),
        len(roi_names),
    )
    return FeatureTable(
        frame=frame,
        roi_profiles=roi_profiles,
        roi_names=list(roi_names),
        couples=list(couples),
        subjects=list(dataset.subjects),
        sessions=list(dataset.sessions),
        sampling_rate_hz=dataset.sampling_rate_hz,
        excursion=excursion,
    )
