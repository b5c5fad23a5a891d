"""Synthetic avalanche datasets with a planted learning effect.

Each trial is a discrete branching process on a random ROI graph: ROIs fire
spontaneously with probability ``event_rate`` per sample, and every active ROI
activates each of its ``m`` neighbours on the next sample with probability
``sigma / m``. Binary events are smoothed with a Gaussian kernel and Gaussian noise
is added, so the normalize -> binarize path of the avalanche module is exercised.

Learners ramp their MI branching parameter across sessions; Rest stays constant.
Scores are a monotone map of the planted session-level Rest - MI difference.

Example:
    ```python
    from avalanche_bci.synth import SynthConfig, generate

    truth = generate(SynthConfig(n_subjects=6, seed=3), "synth_data")
    truth.scores["S01"]["ses-1"]
    ```
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.ndimage import gaussian_filter1d
from scipy.stats import rankdata

from .avalanche import ParameterCouple, features_from_binary
from .dataio import DatasetManifest, write_manifest, write_trial_csv
from .exceptions import ConfigError
from .types import CONDITIONS, Condition, TrialLabel
from .utils import derive_rng, ordered_map

logger = logging.getLogger(__name__)

# Constants
GROUND_TRUTH_FILENAME = "ground_truth.json"
TRIALS_DIRECTORY = "trials"
SCORE_FLOOR = 50.0
SCORE_SPAN = 40.0
SIGNAL_DECIMALS = 6
PLANTED_COUPLE = "2:2"

# Stream keys for derive_rng
_LEARNER_STREAM = 0
_GRAPH_STREAM = 1
_TRIAL_STREAM = 2
_SCORE_STREAM = 3
_LABEL_STREAM = 4
_EXPECTED_STREAM = 5

ScoreDelta = Literal["rest_minus_mi", "mi_minus_rest"]


class SynthConfig(BaseModel):
    """Validated simulator configuration.

    Branching parameters are given per condition: Rest is constant, learners ramp MI
    linearly from ``mi_sigma_start`` to ``mi_sigma_end`` over the sessions, and
    non-learners keep MI at ``nonlearner_mi_sigma`` (default: the Rest level).
    ``planted_couple`` is the (k, samples) couple the default branching parameters
    are tuned for: its delta features carry the planted score relation.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    n_subjects: int = Field(default=20, gt=0)
    n_sessions: int = Field(default=4, gt=0)
    trials_per_cell: int = Field(default=6, gt=0)
    n_rois: int = Field(default=16, gt=0)
    n_samples: int = Field(default=500, gt=0)
    sampling_rate_hz: float = Field(default=250.0, gt=0)
    n_neighbors: int = Field(default=3, gt=0)
    rest_sigma: float = Field(default=0.6, gt=0, le=1.2)
    mi_sigma_start: float = Field(default=0.3, gt=0, le=1.2)
    mi_sigma_end: float = Field(default=0.9, gt=0, le=1.2)
    nonlearner_mi_sigma: float | None = Field(default=None, gt=0, le=1.2)
    learner_fraction: float = Field(default=0.5, ge=0, le=1)
    event_rate: float = Field(default=0.01, ge=0, le=1)
    noise_sd: float = Field(default=0.05, ge=0)
    kernel_width: float = Field(default=1.0, ge=0)
    miss_rate: float = Field(default=0.3, ge=0, le=1)
    score_noise: float = Field(default=1.0, ge=0)
    score_delta: ScoreDelta = "rest_minus_mi"
    planted_rois: list[int] = Field(default_factory=list)
    planted_event_rate: float = Field(default=0.0, ge=0, le=1)
    planted_couple: str = PLANTED_COUPLE
    seed: int = Field(default=0, ge=0)

    @field_validator("planted_couple")
    @classmethod
    def _check_couple(cls, value: str) -> str:
        try:
            ParameterCouple.parse(value)
        except ConfigError as e:
            raise ValueError(str(e)) from e
        return value

    @model_validator(mode="after")
    def _check_ramp(self) -> SynthConfig:
        if self.n_sessions > 1 and not self.mi_sigma_start < self.mi_sigma_end:
            raise ValueError(
                "learners need a strictly increasing MI ramp: "
                f"mi_sigma_start={self.mi_sigma_start} >= mi_sigma_end={self.mi_sigma_end}"
            )
        bad = [r for r in self.planted_rois if not 0 <= r < self.n_rois]
        if bad:
            raise ValueError(f"planted_rois {bad} outside [0, {self.n_rois})")
        if len(set(self.planted_rois)) != len(self.planted_rois):
            raise ValueError("planted_rois must be unique")
        return self

    def parameter_couple(self) -> ParameterCouple:
        return ParameterCouple.parse(self.planted_couple, self.sampling_rate_hz)

    @property
    def n_learners(self) -> int:
        return int(round(self.learner_fraction * self.n_subjects))

    @property
    def n_miss(self) -> int:
        """Miss trials per (subject, session, condition) cell."""
        return int(round(self.miss_rate * self.trials_per_cell))

    def branching_sigma(self, condition: Condition, session_index: int, learner: bool) -> float:
        """Branching parameter of one (condition, session, learner) cell."""
        if condition == "Rest":
            return self.rest_sigma
        if not learner:
            return self.rest_sigma if self.nonlearner_mi_sigma is None else self.nonlearner_mi_sigma
        if self.n_sessions == 1:
            return self.mi_sigma_start
        fraction = session_index / (self.n_sessions - 1)
        return self.mi_sigma_start + (self.mi_sigma_end - self.mi_sigma_start) * fraction

    def planted_delta(self, session_index: int, learner: bool) -> float:
        """Session-level difference the scores are built from, signed by ``score_delta``."""
        delta = self.branching_sigma("Rest", session_index, learner) - self.branching_sigma(
            "MI", session_index, learner
        )
        return delta if self.score_delta == "rest_minus_mi" else -delta

    def subject_ids(self) -> list[str]:
        width = max(2, len(str(self.n_subjects)))
        return [f"S{i + 1:0{width}d}" for i in range(self.n_subjects)]

    def session_ids(self) -> list[str]:
        return [f"ses-{j + 1}" for j in range(self.n_sessions)]

    def roi_names(self) -> list[str]:
        width = max(2, len(str(self.n_rois - 1)))
        return [f"roi_{r:0{width}d}" for r in range(self.n_rois)]


class ExpectedCell(BaseModel):
    """Monte Carlo avalanche statistics of one (session, condition, learner) cell."""

    session: str
    condition: Condition
    learner: bool
    sigma: float
    mean_length: float | None
    se: float | None
    n_trials: int
    n_avalanches: int


class GroundTruth(BaseModel):
    """Content of ``ground_truth.json``."""

    learners: dict[str, bool]
    branching_sigma: dict[str, dict[str, dict[str, float]]]
    planted_delta: dict[str, dict[str, float]]
    scores: dict[str, dict[str, float]]
    label_counts: dict[str, dict[str, dict[str, dict[str, int]]]]
    planted_rois: list[str]
    score_delta: ScoreDelta
    planted_couple: str = PLANTED_COUPLE
    config: SynthConfig
    expected: list[ExpectedCell] = Field(default_factory=list)

    @property
    def learner_ids(self) -> list[str]:
        return [s for s, flag in self.learners.items() if flag]

    def parameter_couple(self) -> ParameterCouple:
        return ParameterCouple.parse(self.planted_couple, self.config.sampling_rate_hz)

    @classmethod
    def load(cls, path: str | Path) -> GroundTruth:
        source = Path(path)
        if source.is_dir():
            source = source / GROUND_TRUTH_FILENAME
        return cls.model_validate(json.loads(source.read_text()))


def load_synth_config(path: str | Path) -> SynthConfig:
    """Read a simulator config from JSON.

    Raises:
        ConfigError: If the file is missing or not JSON
        pydantic.ValidationError: If the content does not match :class:`SynthConfig`
    """
    source = Path(path)
    if not source.is_file():
        raise ConfigError(f"simulator config not found: {source}")
    try:
        raw = json.loads(source.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{source}: invalid JSON: {e}") from e
    return SynthConfig.model_validate(raw)


def neighbor_graph(n_rois: int, n_neighbors: int, rng: np.random.Generator) -> np.ndarray:
    """Random out-neighbours without self-loops, shape ``n_rois x m``.

    ``m`` is ``n_neighbors`` capped at ``n_rois - 1`` (zero columns for one ROI).
    """
    m = min(n_neighbors, n_rois - 1)
    graph = np.zeros((n_rois, m), dtype=np.int64)
    if m == 0:
        return graph
    for roi in range(n_rois):
        others = rng.choice(n_rois - 1, size=m, replace=False)
        graph[roi] = np.where(others >= roi, others + 1, others)
    return graph


def simulate_branching(
    neighbors: np.ndarray,
    n_samples: int,
    sigma: float,
    event_rate: float,
    rng: np.random.Generator,
    *,
    extra_rate: np.ndarray | None = None,
) -> np.ndarray:
    """Simulate the binary cascade of one trial.

    Args:
        neighbors: ``n_rois x m`` out-neighbour indices from :func:`neighbor_graph`
        n_samples: Trial length
        sigma: Branching parameter (expected activations spawned per active ROI)
        event_rate: Spontaneous activation probability per ROI and sample
        rng: Random generator of this trial
        extra_rate: Optional per-ROI spontaneous rate added to ``event_rate``

    Returns:
        ``n_rois x n_samples`` uint8 event matrix
    """
    n_rois, m = neighbors.shape
    rates = np.full(n_rois, float(event_rate))
    if extra_rate is not None:
        rates = rates + extra_rate
    rates = np.clip(rates, 0.0, 1.0)
    p_edge = min(sigma / m, 1.0) if m else 0.0

    events = np.zeros((n_rois, n_samples), dtype=np.uint8)
    state = rng.random(n_rois) < rates
    events[:, 0] = state
    for t in range(1, n_samples):
        nxt = rng.random(n_rois) < rates
        active = np.flatnonzero(state)
        if active.size and p_edge > 0:
            fired = rng.random((active.size, m)) < p_edge
            nxt[neighbors[active][fired]] = True
        events[:, t] = nxt
        state = nxt
    return events


def events_to_signal(
    events: np.ndarray, kernel_width: float, noise_sd: float, rng: np.random.Generator
) -> np.ndarray:
    """Smooth binary events along time and add Gaussian noise."""
    signal = events.astype(np.float64)
    if kernel_width > 0:
        signal = gaussian_filter1d(signal, kernel_width, axis=1, mode="constant")
    if noise_sd > 0:
        signal = signal + rng.normal(0.0, noise_sd, size=signal.shape)
    return np.round(signal, SIGNAL_DECIMALS)


def _learner_flags(config: SynthConfig) -> list[bool]:
    order = derive_rng(config.seed, _LEARNER_STREAM).permutation(config.n_subjects)
    flags = [False] * config.n_subjects
    for index in order[: config.n_learners]:
        flags[int(index)] = True
    return flags


def _miss_positions(config: SynthConfig, i: int, j: int, c: int) -> set[int]:
    rng = derive_rng(config.seed, _LABEL_STREAM, i, j, c)
    chosen = rng.choice(config.trials_per_cell, size=config.n_miss, replace=False)
    return {int(t) for t in chosen}


def planted_scores(config: SynthConfig, learners: list[bool]) -> tuple[np.ndarray, np.ndarray]:
    """Planted differences and scores, both ``subjects x sessions``.

    Scores are ``50 + 40 * rank-normalized delta + N(0, score_noise)`` clipped to
    [0, 100], with average ranks pooled over all (subject, session) values. The
    final session is thereby ranked on the same scale as the earlier ones: its
    scores order subjects by their final-session delta, and with the default ramp
    learners end below the 57 threshold while non-learners stay above it.
    """
    delta = np.array(
        [
            [config.planted_delta(j, learners[i]) for j in range(config.n_sessions)]
            for i in range(config.n_subjects)
        ]
    )
    n = delta.size
    ranks = rankdata(delta.ravel(), method="average").reshape(delta.shape)
    normalized = (ranks - 1.0) / (n - 1) if n > 1 else np.full(delta.shape, 0.5)
    scores = SCORE_FLOOR + SCORE_SPAN * normalized
    if config.score_noise > 0:
        for i in range(config.n_subjects):
            for j in range(config.n_sessions):
                scores[i, j] += derive_rng(config.seed, _SCORE_STREAM, i, j).normal(
                    0.0, config.score_noise
                )
    return delta, np.clip(scores, 0.0, 100.0)


def _trial_path(subject: str, session: str, condition: str, trial: int) -> str:
    return f"{TRIALS_DIRECTORY}/{subject}/{session}/{condition}/trial_{trial:03d}.csv"


CellKey = tuple[int, int, int]


def _draw_labels(config: SynthConfig) -> dict[CellKey, list[TrialLabel]]:
    """Hit/Miss labels per (subject, session, condition) index."""
    labels: dict[CellKey, list[TrialLabel]] = {}
    for i in range(config.n_subjects):
        for j in range(config.n_sessions):
            for c in range(len(CONDITIONS)):
                misses = _miss_positions(config, i, j, c)
                labels[(i, j, c)] = [
                    "Miss" if t in misses else "Hit" for t in range(config.trials_per_cell)
                ]
    return labels


def _simulate_trials(
    config: SynthConfig,
    root: Path,
    labels: dict[CellKey, list[TrialLabel]],
    learners: list[bool],
    workers: int,
) -> None:
    subjects = config.subject_ids()
    sessions = config.session_ids()
    graphs = [
        neighbor_graph(config.n_rois, config.n_neighbors, derive_rng(config.seed, _GRAPH_STREAM, i))
        for i in range(config.n_subjects)
    ]
    extra = np.zeros(config.n_rois)
    extra[config.planted_rois] = config.planted_event_rate
    work = [
        (i, j, c, t)
        for i in range(config.n_subjects)
        for j in range(config.n_sessions)
        for c in range(len(CONDITIONS))
        for t in range(config.trials_per_cell)
    ]

    def write_trial(item: tuple[int, int, int, int]) -> None:
        i, j, c, t = item
        condition = CONDITIONS[c]
        label = labels[(i, j, c)][t]
        rng = derive_rng(config.seed, _TRIAL_STREAM, i, j, c, t)
        if condition == "MI" and label == "Miss":
            sigma = config.branching_sigma("Rest", j, learners[i])
        else:
            sigma = config.branching_sigma(condition, j, learners[i])
        planted = extra if condition == "MI" and label == "Hit" and config.planted_rois else None
        events = simulate_branching(
            graphs[i], config.n_samples, sigma, config.event_rate, rng, extra_rate=planted
        )
        signal = events_to_signal(events, config.kernel_width, config.noise_sd, rng)
        write_trial_csv(root / _trial_path(subjects[i], sessions[j], condition, t), signal)

    logger.info(
        "Simulating %d trials (%d subjects, %d learners, %d sessions)",
        len(work), config.n_subjects, config.n_learners, config.n_sessions,
    )
    ordered_map(write_trial, work, workers)


@dataclass
class _CellIndex:
    """Manifest and ground-truth entries keyed subject -> session -> condition."""

    trials: dict[str, dict[str, dict[str, list[str]]]] = field(default_factory=dict)
    trial_labels: dict[str, dict[str, dict[str, dict[str, TrialLabel]]]] = field(default_factory=dict)
    label_counts: dict[str, dict[str, dict[str, dict[str, int]]]] = field(default_factory=dict)
    sigmas: dict[str, dict[str, dict[str, float]]] = field(default_factory=dict)


def _index_cells(
    config: SynthConfig, labels: dict[CellKey, list[TrialLabel]], learners: list[bool]
) -> _CellIndex:
    index = _CellIndex()
    for i, subject in enumerate(config.subject_ids()):
        for j, session in enumerate(config.session_ids()):
            for c, condition in enumerate(CONDITIONS):
                cell_labels = labels[(i, j, c)]
                paths = [_trial_path(subject, session, condition, t) for t in range(config.trials_per_cell)]
                index.trials.setdefault(subject, {}).setdefault(session, {})[condition] = paths
                index.trial_labels.setdefault(subject, {}).setdefault(session, {})[condition] = {
                    Path(p).stem: lab for p, lab in zip(paths, cell_labels, strict=True)
                }
                index.label_counts.setdefault(subject, {}).setdefault(session, {})[condition] = {
                    "Hit": cell_labels.count("Hit"),
                    "Miss": cell_labels.count("Miss"),
                }
                index.sigmas.setdefault(subject, {}).setdefault(session, {})[condition] = (
                    config.branching_sigma(condition, j, learners[i])
                )
    return index


def generate(
    config: SynthConfig,
    out_dir: str | Path,
    *,
    workers: int = 1,
    expected_trials: int = 0,
    min_duration_samples: int = 2,
) -> GroundTruth:
    """Write a synthetic dataset and its ground truth.

    Trials are generated in parallel, each from its own derived seed, so the output
    is byte-identical for a given seed regardless of ``workers``.

    Args:
        config: Simulator configuration
        out_dir: Dataset directory (created if needed)
        workers: Thread count
        expected_trials: Monte Carlo trials per cell for :func:`expected_statistics`
            (0 skips the estimate)
        min_duration_samples: Minimum avalanche duration used by that estimate

    Returns:
        The ground truth, also written to ``ground_truth.json``
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    subjects = config.subject_ids()
    sessions = config.session_ids()
    learners = _learner_flags(config)
    labels = _draw_labels(config)
    _simulate_trials(config, root, labels, learners, workers)

    delta, scores = planted_scores(config, learners)
    index = _index_cells(config, labels, learners)

    score_map = {
        subject: {session: float(scores[i, j]) for j, session in enumerate(sessions)}
        for i, subject in enumerate(subjects)
    }
    manifest = DatasetManifest(
        subjects=subjects,
        sessions=sessions,
        conditions=list(CONDITIONS),
        n_rois=config.n_rois,
        sampling_rate_hz=config.sampling_rate_hz,
        roi_names=config.roi_names(),
        trials=index.trials,
        scores=score_map,
        trial_labels=index.trial_labels,
    )
    write_manifest(root, manifest)

    expected: list[ExpectedCell] = []
    if expected_trials > 0:
        expected = expected_cells(
            config, min_duration_samples=min_duration_samples, n_trials=expected_trials
        )

    roi_names = config.roi_names()
    truth = GroundTruth(
        learners=dict(zip(subjects, learners, strict=True)),
        branching_sigma=index.sigmas,
        planted_delta={
            subject: {session: float(delta[i, j]) for j, session in enumerate(sessions)}
            for i, subject in enumerate(subjects)
        },
        scores=score_map,
        label_counts=index.label_counts,
        planted_rois=[roi_names[r] for r in config.planted_rois],
        score_delta=config.score_delta,
        planted_couple=config.planted_couple,
        config=config,
        expected=expected,
    )
    (root / GROUND_TRUTH_FILENAME).write_text(truth.model_dump_json(indent=2))
    logger.info("Wrote synthetic dataset to %s", root)
    return truth


def simulate_mean_length(
    n_rois: int,
    n_neighbors: int,
    sigma: float,
    event_rate: float,
    n_samples: int,
    *,
    min_duration_samples: int,
    n_trials: int,
    rng: np.random.Generator,
) -> tuple[float, float, int]:
    """Monte Carlo mean of the trial-level mean avalanche length.

    A fresh neighbour graph is drawn per trial. Trials without avalanches do not
    contribute.

    Returns:
        ``(mean, standard error, total avalanches)``; NaN when fewer than two
        trials had avalanches
    """
    lengths: list[float] = []
    n_avalanches = 0
    for _ in range(n_trials):
        graph = neighbor_graph(n_rois, n_neighbors, rng)
        events = simulate_branching(graph, n_samples, sigma, event_rate, rng)
        features = features_from_binary(events, min_duration_samples)
        n_avalanches += features.n_avalanches
        if features.is_defined:
            lengths.append(features.mean_avalanche_length)
    if len(lengths) < 2:
        mean = float(lengths[0]) if lengths else float("nan")
        return mean, float("nan"), n_avalanches
    values = np.asarray(lengths)
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(values.size)), n_avalanches


def expected_cells(
    config: SynthConfig,
    *,
    min_duration_samples: int = 2,
    n_trials: int = 200,
    seed: int | None = None,
) -> list[ExpectedCell]:
    """Expected mean avalanche length per (session, condition, learner) cell.

    Simulates the binary process directly (no kernel, no noise, no planted ROIs)
    for each cell whose group has subjects.

    Args:
        config: Simulator configuration
        min_duration_samples: Minimum avalanche duration
        n_trials: Monte Carlo trials per cell
        seed: Monte Carlo seed (default: ``config.seed``)
    """
    master = config.seed if seed is None else seed
    groups = [
        learner
        for learner, size in ((True, config.n_learners), (False, config.n_subjects - config.n_learners))
        if size
    ]
    cells: list[ExpectedCell] = []
    for j, session in enumerate(config.session_ids()):
        for c, condition in enumerate(CONDITIONS):
            for learner in groups:
                sigma = config.branching_sigma(condition, j, learner)
                mean, se, n_avalanches = simulate_mean_length(
                    config.n_rois,
                    config.n_neighbors,
                    sigma,
                    config.event_rate,
                    config.n_samples,
                    min_duration_samples=min_duration_samples,
                    n_trials=n_trials,
                    rng=derive_rng(master, _EXPECTED_STREAM, j, c, int(learner)),
                )
                logger.debug("%s/%s learner=%s: mean length %.3f", session, condition, learner, mean)
                cells.append(
                    ExpectedCell(
                        session=session,
                        condition=condition,
                        learner=learner,
                        sigma=sigma,
                        mean_length=None if np.isnan(mean) else mean,
                        se=None if np.isnan(se) else se,
                        n_trials=n_trials,
                        n_avalanches=n_avalanches,
                    )
                )
    return cells


def expected_statistics(
    config: SynthConfig,
    *,
    min_duration_samples: int = 2,
    n_trials: int = 200,
    seed: int | None = None,
) -> pd.DataFrame:
    """:func:`expected_cells` as a frame with columns session, condition, learner,
    sigma, mean_length, se, n_trials, n_avalanches (NaN for undefined estimates)."""
    cells = expected_cells(
        config, min_duration_samples=min_duration_samples, n_trials=n_trials, seed=seed
    )
    frame = pd.DataFrame([cell.model_dump() for cell in cells])
    return frame.astype({"mean_length": np.float64, "se": np.float64})
