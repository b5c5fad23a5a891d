"""Tests for dataset loading, validation and trial views."""

import json

import numpy as np
import pytest

from avalanche_bci.dataio import (
    TrialFilter,
    filter_trials,
    load_dataset,
    read_trial_csv,
    write_trial_csv,
)
from avalanche_bci.exceptions import DatasetValidationError

from .helpers import SMALL_SYNTH, random_trials, write_dataset

EXPECTED_SMALL_TRIALS = 6 * 3 * 2 * 4
EXPECTED_MISS_PER_CELL = 2


def test_trial_csv_round_trip_is_bit_identical(tmp_path):
    """Test that written trial matrices read back bit-identically."""
    rng = np.random.default_rng(0)
    matrix = rng.normal(size=(5, 40)) * 1e3
    path = tmp_path / "trial.csv"

    write_trial_csv(path, matrix)
    loaded = read_trial_csv(path, n_rois=5)

    assert loaded.dtype == np.float64
    assert np.array_equal(loaded, matrix)


def test_read_trial_csv_shape_mismatch(tmp_path):
    """Test that a wrong row count names both counts."""
    path = tmp_path / "trial.csv"
    write_trial_csv(path, np.zeros((3, 10)))

    with pytest.raises(DatasetValidationError, match="3 rows, expected n_rois=4"):
        read_trial_csv(path, n_rois=4)


def test_read_trial_csv_non_finite_location(tmp_path):
    """Test that a non-finite sample is reported with its row and column."""
    path = tmp_path / "trial.csv"
    path.write_text("1.0,2.0,3.0\n4.0,5.0,nan\n")

    with pytest.raises(DatasetValidationError) as exc_info:
        read_trial_csv(path, n_rois=2)

    assert exc_info.value.location == "row 2, column 3"
    assert "non-finite" in str(exc_info.value)


def test_read_trial_csv_ragged_rows(tmp_path):
    """Test that a short row is a shape error naming the row, not a non-finite value."""
    path = tmp_path / "trial.csv"
    path.write_text("1.0,2.0,3.0\n4.0,5.0\n6.0,7.0,8.0\n")

    with pytest.raises(DatasetValidationError, match="ragged rows: 2 fields, expected 3") as exc_info:
        read_trial_csv(path, n_rois=3)

    assert exc_info.value.location == "row 2"


def test_read_trial_csv_long_row_is_ragged(tmp_path):
    """Test that an extra field is reported the same way."""
    path = tmp_path / "trial.csv"
    path.write_text("1.0,2.0\n3.0,4.0\n5.0,6.0,7.0\n")

    with pytest.raises(DatasetValidationError, match="ragged rows") as exc_info:
        read_trial_csv(path, n_rois=3)

    assert exc_info.value.location == "row 3"


def test_read_trial_csv_missing_file(tmp_path):
    """Test that a missing file raises a validation error."""
    with pytest.raises(DatasetValidationError, match="missing trial file"):
        read_trial_csv(tmp_path / "absent.csv", n_rois=2)


def test_load_dataset_from_directory_and_manifest(tmp_path):
    """Test that a dataset loads from its directory or its manifest path."""
    rng = np.random.default_rng(1)
    manifest_path = write_dataset(tmp_path, random_trials(rng))

    by_dir = load_dataset(tmp_path)
    by_file = load_dataset(manifest_path, check_trials=True)

    assert by_dir.subjects == ["S0", "S1", "S2"]
    assert by_dir.sessions == ["ses-0", "ses-1"]
    assert len(by_dir) == len(by_file) == 3 * 2 * 2 * 3
    assert by_dir.score("S1", "ses-0") == 60.0


def test_load_trial_is_memoized_and_read_only(tmp_path):
    """Test that repeated loads return the same read-only array."""
    rng = np.random.default_rng(2)
    write_dataset(tmp_path, random_trials(rng))
    dataset = load_dataset(tmp_path)
    ref = dataset.refs[0]

    first = dataset.load_trial(ref).data
    second = dataset.load_trial(ref).data

    assert first is second
    assert not first.flags.writeable


def test_missing_score_is_rejected(tmp_path):
    """Test that a manifest without a score for every pair fails validation."""
    rng = np.random.default_rng(3)
    manifest_path = write_dataset(tmp_path, random_trials(rng, subjects=2))
    raw = json.loads(manifest_path.read_text())
    del raw["scores"]["S1"]["ses-1"]
    manifest_path.write_text(json.dumps(raw))

    with pytest.raises(DatasetValidationError, match=r"missing score for \(S1, ses-1\)"):
        load_dataset(manifest_path)


def test_empty_subject_list_is_rejected(tmp_path):
    """Test that an empty subject list fails validation."""
    rng = np.random.default_rng(4)
    manifest_path = write_dataset(tmp_path, random_trials(rng, subjects=1))
    raw = json.loads(manifest_path.read_text())
    raw["subjects"] = []
    manifest_path.write_text(json.dumps(raw))

    with pytest.raises(DatasetValidationError, match="empty subject list"):
        load_dataset(manifest_path)


def test_score_outside_range_is_rejected(tmp_path):
    """Test that scores must lie in [0, 100]."""
    rng = np.random.default_rng(5)
    manifest_path = write_dataset(
        tmp_path,
        random_trials(rng, subjects=1, sessions=1),
        scores={"S0": {"ses-0": 101.0}},
    )

    with pytest.raises(DatasetValidationError, match="outside"):
        load_dataset(manifest_path)


def test_missing_trial_file_is_reported_at_load(tmp_path):
    """Test that a manifest entry without a file is caught when loading."""
    rng = np.random.default_rng(6)
    write_dataset(tmp_path, random_trials(rng, subjects=1, sessions=1))
    (tmp_path / "S0" / "ses-0" / "MI" / "t01.csv").unlink()

    with pytest.raises(DatasetValidationError, match="missing trial file"):
        load_dataset(tmp_path)


def test_invalid_json_manifest(tmp_path):
    """Test that unparseable JSON is a validation error with a line location."""
    (tmp_path / "manifest.json").write_text("{not json")

    with pytest.raises(DatasetValidationError) as exc_info:
        load_dataset(tmp_path)

    assert exc_info.value.location == "line 1"


def test_filter_view_sizes_match_planted_miss_counts(small_synth_dir):
    """Test that Hit and Miss views match the generator's bookkeeping exactly."""
    dataset = load_dataset(small_synth_dir)
    hit = filter_trials(dataset, TrialFilter.from_mode("hit"))
    miss = filter_trials(dataset, TrialFilter.from_mode("miss"))

    n_cells = SMALL_SYNTH.n_subjects * SMALL_SYNTH.n_sessions * 2
    assert len(dataset) == EXPECTED_SMALL_TRIALS
    assert len(miss) == n_cells * EXPECTED_MISS_PER_CELL
    assert len(hit) + len(miss) == len(dataset)
    assert set(miss.counts().values()) == {EXPECTED_MISS_PER_CELL}


def test_filtered_view_keeps_full_session_baseline(small_synth_dir):
    """Test that views expose filtered trials but the full (subject, session) set."""
    dataset = load_dataset(small_synth_dir)
    hit = filter_trials(dataset, TrialFilter.from_mode("hit"))

    assert len(hit.cell_refs("S01", "ses-1", "MI")) == 2
    assert len(hit.session_refs("S01", "ses-1")) == 8


def test_label_filter_requires_labels(tmp_path):
    """Test that a Hit/Miss filter on an unlabeled dataset is a validation error."""
    rng = np.random.default_rng(7)
    write_dataset(tmp_path, random_trials(rng))
    dataset = load_dataset(tmp_path)

    with pytest.raises(DatasetValidationError, match="no trial_labels"):
        filter_trials(dataset, TrialFilter.from_mode("hit"))


def test_condition_filter_without_labels(tmp_path):
    """Test that a condition-only filter works on unlabeled data."""
    rng = np.random.default_rng(8)
    write_dataset(tmp_path, random_trials(rng))
    dataset = load_dataset(tmp_path)

    view = filter_trials(dataset, TrialFilter(conditions=frozenset({"MI"})))

    assert len(view) == len(dataset) // 2
    assert {ref.condition for ref in view} == {"MI"}


def test_duplicate_trial_ids_in_a_cell_are_rejected(tmp_path):
    """Test that two files with the same stem in one cell cannot be told apart."""
    rng = np.random.default_rng(7)
    manifest_path = write_dataset(tmp_path, random_trials(rng, subjects=1, sessions=1))
    write_trial_csv(tmp_path / "extra" / "t00.csv", rng.normal(size=(4, 50)))
    raw = json.loads(manifest_path.read_text())
    raw["trials"]["S0"]["ses-0"]["MI"].append("extra/t00.csv")
    manifest_path.write_text(json.dumps(raw))

    with pytest.raises(DatasetValidationError, match="duplicate trial id 't00' in S0/ses-0/MI"):
        load_dataset(manifest_path)
