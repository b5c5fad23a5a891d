"""Dataset builders shared by the test modules."""

from pathlib import Path

import numpy as np

from avalanche_bci.dataio import DatasetManifest, write_manifest, write_trial_csv
from avalanche_bci.synth import SynthConfig

SMALL_SYNTH = SynthConfig(
    n_subjects=6,
    n_sessions=3,
    trials_per_cell=4,
    n_rois=6,
    n_samples=200,
    miss_rate=0.5,
    seed=5,
)


def write_dataset(
    root: Path,
    trials: dict[tuple[str, str, str], list[np.ndarray]],
    *,
    scores: dict[str, dict[str, float]] | None = None,
    labels: dict[tuple[str, str, str], list[str]] | None = None,
    sampling_rate_hz: float = 250.0,
) -> Path:
    """Write trial matrices keyed by (subject, session, condition) plus a manifest."""
    subjects = list(dict.fromkeys(key[0] for key in trials))
    sessions = list(dict.fromkeys(key[1] for key in trials))
    n_rois = next(iter(trials.values()))[0].shape[0]
    index: dict[str, dict[str, dict[str, list[str]]]] = {}
    label_index: dict[str, dict[str, dict[str, dict[str, str]]]] = {}
    for (subject, session, condition), matrices in trials.items():
        paths = []
        for t, matrix in enumerate(matrices):
            rel = f"{subject}/{session}/{condition}/t{t:02d}.csv"
            write_trial_csv(root / rel, matrix)
            paths.append(rel)
        index.setdefault(subject, {}).setdefault(session, {})[condition] = paths
        if labels is not None:
            cell_labels = labels[(subject, session, condition)]
            label_index.setdefault(subject, {}).setdefault(session, {})[condition] = {
                f"t{t:02d}": lab for t, lab in enumerate(cell_labels)
            }
    manifest = DatasetManifest(
        subjects=subjects,
        sessions=sessions,
        n_rois=n_rois,
        sampling_rate_hz=sampling_rate_hz,
        roi_names=[f"r{i}" for i in range(n_rois)],
        trials=index,
        scores=scores or {s: {t: 60.0 for t in sessions} for s in subjects},
        trial_labels=label_index if labels is not None else None,
    )
    return write_manifest(root, manifest)


def random_trials(
    rng: np.random.Generator,
    subjects: int = 3,
    sessions: int = 2,
    trials: int = 3,
    n_rois: int = 4,
    n_samples: int = 50,
) -> dict[tuple[str, str, str], list[np.ndarray]]:
    """Gaussian trial matrices for every (subject, session, condition) cell."""
    return {
        (f"S{i}", f"ses-{j}", condition): [rng.normal(size=(n_rois, n_samples)) for _ in range(trials)]
        for i in range(subjects)
        for j in range(sessions)
        for condition in ("Rest", "MI")
    }


