"""Tests for the longitudinal SVR/SVC models and leave-one-out evaluation."""

import time

import numpy as np
import pandas as pd
import pytest

from avalanche_bci import longitudinal
from avalanche_bci.exceptions import DegenerateDataError, SingleClassError
from avalanche_bci.longitudinal import (
    SubjectSeries,
    assemble_design,
    candidate_grid,
    first_session_beta,
    gram,
    loo_evaluate,
    lsvc_fit,
    lsvc_predict,
    lsvr_fit,
    lsvr_predict,
    select_hyperparameters,
    shuffle_sessions_control,
)
from avalanche_bci.qpsolve import predict, svc_fit, svr_fit

SMALL_SVR_GRID = {"C": [100.0], "epsilon": [0.1], "lam": [1.0]}
SMALL_SVC_GRID = {"C": [1.0], "lam": [1.0]}


def _series(X, y, chance=57.0):
    return [
        SubjectSeries(f"S{i:02d}", np.asarray(x, dtype=float), float(t), bool(t > chance))
        for i, (x, t) in enumerate(zip(X, y))
    ]


def _deltas(n_subjects, sessions, rng):
    rows = [
        {
            "subject": f"S{i:02d}",
            "session": session,
            "k": 2,
            "min_dur_samples": 2,
            "delta_length": rng.normal(),
            "delta_activations": rng.normal(),
        }
        for i in range(n_subjects)
        for session in sessions
    ]
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# Design assembly and Gram matrices
# ---------------------------------------------------------------------------


def test_assemble_design_shapes_and_strict_chance():
    """Test 20 subjects with 3 training sessions and the strict chance rule."""
    rng = np.random.default_rng(0)
    sessions = ["ses-1", "ses-2", "ses-3", "ses-4"]
    deltas = _deltas(20, sessions, rng)
    scores = {f"S{i:02d}": {"ses-4": 57.0 + (i % 3) - 1} for i in range(20)}

    design = assemble_design(deltas, scores, sessions, chance=57.0)

    assert len(design) == 20
    assert all(s.X.shape == (3, 2) for s in design)
    assert design.training_sessions == ["ses-1", "ses-2", "ses-3"]
    assert design.target_session == "ses-4"
    labels = {s.subject: s.label for s in design}
    assert labels["S01"] is False  # exactly 57.0
    assert labels["S02"] is True
    first = deltas.loc[(deltas["subject"] == "S00") & (deltas["session"] == "ses-2")]
    assert design[0].X[1, 0] == first["delta_length"].iloc[0]


def test_assemble_design_missing_training_session():
    """Test that a gap raises, or is dropped when asked to."""
    rng = np.random.default_rng(1)
    sessions = ["ses-1", "ses-2", "ses-3"]
    deltas = _deltas(4, sessions, rng)
    deltas = deltas.loc[~((deltas["subject"] == "S02") & (deltas["session"] == "ses-1"))]
    scores = {f"S{i:02d}": {"ses-3": 60.0} for i in range(4)}

    with pytest.raises(DegenerateDataError, match="S02"):
        assemble_design(deltas, scores, sessions)
    design = assemble_design(deltas, scores, sessions, drop_incomplete=True)

    assert [s.subject for s in design] == ["S00", "S01", "S03"]


def test_assemble_design_needs_two_sessions():
    """Test that a single session cannot form a longitudinal design."""
    rng = np.random.default_rng(2)

    with pytest.raises(DegenerateDataError, match=">= 2 sessions"):
        assemble_design(_deltas(3, ["ses-1"], rng), {}, ["ses-1"])


def test_gram_first_session_projection():
    """Test that beta = e1 gives inner products of the first-session rows."""
    rng = np.random.default_rng(3)
    X = rng.normal(size=(5, 3, 2))
    X[2] = 0.0

    G = gram(X, first_session_beta(3))

    assert G == pytest.approx(X[:, 0, :] @ X[:, 0, :].T)
    assert np.all(G[2] == 0.0) and np.all(G[:, 2] == 0.0)


# ---------------------------------------------------------------------------
# Reduction identities
# ---------------------------------------------------------------------------


def test_lsvr_single_session_reduces_to_svr():
    """Test that one training session gives the standard SVR predictions."""
    rng = np.random.default_rng(4)
    X = rng.normal(size=(8, 1, 2))
    y = 60.0 + 5.0 * rng.normal(size=8)

    model = lsvr_fit(_series(X, y), C=10.0, epsilon=0.5, standardize=False)
    reference = svr_fit(X[:, 0, :], y, C=10.0, epsilon=0.5)

    assert model.beta.tolist() == [1.0]
    unseen = rng.normal(size=(4, 1, 2))
    expected = predict(reference, unseen[:, 0, :])
    actual = [lsvr_predict(model, p).raw_score for p in unseen]
    assert actual == pytest.approx(expected, abs=1e-8)


def test_lsvc_single_session_reduces_to_svc():
    """Test that one training session gives the standard SVC labels."""
    rng = np.random.default_rng(5)
    X = rng.normal(size=(10, 1, 2))
    labels = np.where(X[:, 0, 0] > 0, 1.0, -1.0)
    y = np.where(labels > 0, 70.0, 40.0)

    model = lsvc_fit(_series(X, y), C=1.0, standardize=False)
    reference = svc_fit(X[:, 0, :], labels, C=1.0)

    unseen = rng.normal(size=(6, 1, 2))
    assert [lsvc_predict(model, p) for p in unseen] == predict(reference, unseen[:, 0, :]).tolist()


def test_lsvc_duplicated_sessions_with_unit_beta():
    """Test that beta = 1 over identical session rows equals SVC on the row scaled by S."""
    rng = np.random.default_rng(6)
    rows = rng.normal(size=(10, 2))
    X = np.repeat(rows[:, None, :], 2, axis=1)
    y = np.where(rows[:, 0] + 0.3 * rows[:, 1] > 0, 70.0, 40.0)
    labels = np.where(y > 57.0, 1.0, -1.0)

    model = lsvc_fit(
        _series(X, y), C=1.0, beta_init=np.ones(2), update_beta=False, standardize=False
    )
    reference = svc_fit(2.0 * rows, labels, C=1.0)

    unseen = rng.normal(size=(5, 2))
    for row in unseen:
        duplicated = np.vstack([row, row])
        assert model.decision_function(duplicated) == pytest.approx(
            reference.decision_function(2.0 * row[None, :])[0], abs=1e-8
        )


def test_lsvr_zero_input_predicts_intercept():
    """Test that an all-zero input predicts b."""
    rng = np.random.default_rng(7)
    X = rng.normal(size=(6, 2, 2))
    y = 50.0 + 10.0 * rng.normal(size=6)

    model = lsvr_fit(_series(X, y), C=10.0, epsilon=0.1, standardize=False)

    assert lsvr_predict(model, np.zeros((2, 2))).raw_score == pytest.approx(model.b)


def test_lsvr_free_support_vectors_sit_on_the_tube():
    """Test the KKT condition: free support vectors are predicted within epsilon."""
    rng = np.random.default_rng(8)
    X = rng.normal(size=(12, 3, 2))
    y = 60.0 + 3.0 * rng.normal(size=12)
    series = _series(X, y)
    epsilon = 0.2

    model = lsvr_fit(series, C=10.0, epsilon=epsilon, standardize=False)

    free = np.flatnonzero((np.abs(model.coef) > 1e-6) & (np.abs(model.coef) < model.C - 1e-6))
    assert free.size > 0
    for i in free:
        assert abs(model.decision_function(series[i].X) - series[i].y) <= epsilon + 1e-4


def test_alternation_keeps_first_weight_and_never_raises_objective():
    """Test beta[0] = 1 along the trajectory and monotone objectives."""
    rng = np.random.default_rng(9)
    X = rng.normal(size=(12, 3, 2))
    y = 60.0 + 4.0 * X[:, 2, 0] + rng.normal(size=12)

    model = lsvr_fit(_series(X, y), C=10.0, epsilon=0.1, lam=1.0)

    assert model.beta_trajectory[0] == [1.0, 0.0, 0.0]
    assert all(beta[0] == 1.0 for beta in model.beta_trajectory)
    assert np.all(np.diff(model.objective_trajectory) <= 1e-12)
    assert len(model.beta_trajectory) == len(model.objective_trajectory)


def test_lsvc_single_class_instructs_threshold_review():
    """Test that every subject above chance is a single-class error."""
    rng = np.random.default_rng(10)

    with pytest.raises(SingleClassError, match="chance threshold"):
        lsvc_fit(_series(rng.normal(size=(5, 2, 2)), [70.0] * 5))


def test_fit_needs_three_subjects():
    """Test that fewer than three subjects are rejected."""
    rng = np.random.default_rng(11)

    with pytest.raises(ValueError, match=">= 3 subjects"):
        lsvr_fit(_series(rng.normal(size=(2, 2, 2)), [60.0, 50.0]))


def test_fixed_first_session_beta_reduces_to_svr_for_three_sessions():
    """Test that beta = e1 held fixed gives the SVR on first-session rows with S_train = 3."""
    rng = np.random.default_rng(19)
    X = rng.normal(size=(9, 3, 2))
    y = 60.0 + 5.0 * rng.normal(size=9)

    model = lsvr_fit(_series(X, y), C=10.0, epsilon=0.5, update_beta=False, standardize=False)
    reference = svr_fit(X[:, 0, :], y, C=10.0, epsilon=0.5)

    assert model.beta.tolist() == [1.0, 0.0, 0.0]
    new = rng.normal(size=(4, 3, 2))
    expected = predict(reference, new[:, 0, :])
    actual = [lsvr_predict(model, x).raw_score for x in new]
    assert actual == pytest.approx(expected, abs=1e-8)


def test_fixed_first_session_beta_reduces_to_svc_for_three_sessions():
    """Test that beta = e1 held fixed gives the SVC on first-session rows with S_train = 3."""
    rng = np.random.default_rng(20)
    X = rng.normal(size=(12, 3, 2))
    labels = np.where(X[:, 0, 0] + 0.5 * X[:, 0, 1] > 0, 1.0, -1.0)
    y = np.where(labels > 0, 70.0, 40.0)

    model = lsvc_fit(_series(X, y), C=1.0, update_beta=False, standardize=False)
    reference = svc_fit(X[:, 0, :], labels, C=1.0)

    new = rng.normal(size=(6, 3, 2))
    for x in new:
        assert model.decision_function(x) == pytest.approx(
            reference.decision_function(x[0][None, :])[0], abs=1e-8
        )
    assert [lsvc_predict(model, x) for x in new] == predict(reference, new[:, 0, :]).tolist()


def test_subject_order_does_not_change_the_fit():
    """Test that permuting the subjects leaves beta and the predictions unchanged."""
    rng = np.random.default_rng(21)
    X = rng.normal(size=(12, 3, 2))
    y = 60.0 + 4.0 * X[:, 1, 0] + rng.normal(size=12)
    series = _series(X, y)
    order = rng.permutation(12)

    model = lsvr_fit(series, C=10.0, epsilon=0.5, qp_tolerance=1e-10)
    permuted = lsvr_fit([series[i] for i in order], C=10.0, epsilon=0.5, qp_tolerance=1e-10)

    assert permuted.beta == pytest.approx(model.beta, abs=1e-5)
    new = rng.normal(size=(5, 3, 2))
    for x in new:
        assert lsvr_predict(permuted, x).raw_score == pytest.approx(lsvr_predict(model, x).raw_score, abs=1e-4)


def test_gram_is_positive_semidefinite_for_random_beta():
    """Test that every eigenvalue of the temporal Gram matrix is >= -1e-9."""
    rng = np.random.default_rng(22)
    for _ in range(50):
        X = rng.normal(size=(10, 4, 3))
        beta = np.concatenate([[1.0], rng.normal(scale=2.0, size=3)])

        assert np.linalg.eigvalsh(gram(X, beta)).min() >= -1e-9


def test_rejected_beta_update_is_not_convergence(monkeypatch):
    """Test the stop reason when the first beta update is rejected."""
    rng = np.random.default_rng(23)
    series = _series(rng.normal(size=(8, 3, 2)), 60.0 + rng.normal(size=8))
    monkeypatch.setattr(longitudinal, "_beta_update", lambda *args: None)

    model = lsvr_fit(series, C=10.0, epsilon=0.1)

    assert model.stopped == "rejected"
    assert not model.converged
    assert model.rejected_updates == 1
    assert model.iterations == 1
    assert model.beta.tolist() == [1.0, 0.0, 0.0]


def test_stop_reasons_converged_and_max_outer(monkeypatch):
    """Test that only a beta change below tol counts as convergence."""
    rng = np.random.default_rng(24)
    series = _series(rng.normal(size=(8, 3, 2)), 60.0 + rng.normal(size=8))

    exhausted = lsvr_fit(series, C=10.0, epsilon=0.1, max_outer=0)
    monkeypatch.setattr(longitudinal, "_beta_update", lambda X, beta, *args: beta.copy())
    stationary = lsvr_fit(series, C=10.0, epsilon=0.1)

    assert exhausted.stopped == "max_outer"
    assert not exhausted.converged
    assert stationary.stopped == "converged"
    assert stationary.converged
    assert stationary.rejected_updates == 0
    assert stationary.to_dict()["stopped"] == "converged"


# ---------------------------------------------------------------------------
# Shuffle control and hyperparameters
# ---------------------------------------------------------------------------


def test_shuffle_sessions_control_properties():
    """Test determinism, row permutation, untouched targets and the one-session no-op."""
    rng = np.random.default_rng(12)
    series = _series(rng.normal(size=(6, 4, 2)), 50.0 + rng.normal(size=6))

    first = shuffle_sessions_control(series, seed=3)
    second = shuffle_sessions_control(series, seed=3)

    for original, a, b in zip(series, first, second):
        assert np.array_equal(a.X, b.X)
        assert a.y == original.y and a.label == original.label
        assert sorted(map(tuple, a.X)) == sorted(map(tuple, original.X))
    single = _series(rng.normal(size=(3, 1, 2)), [50.0, 60.0, 70.0])
    for original, shuffled in zip(single, shuffle_sessions_control(single, seed=1)):
        assert np.array_equal(original.X, shuffled.X)


def test_candidate_grid_tie_break_order():
    """Test that candidates are ordered by C, then lambda."""
    candidates = candidate_grid("lsvc", {"C": [10.0, 1.0], "lam": [5.0, 0.5]})

    assert candidates == [
        {"C": 1.0, "lam": 0.5},
        {"C": 1.0, "lam": 5.0},
        {"C": 10.0, "lam": 0.5},
        {"C": 10.0, "lam": 5.0},
    ]
    assert set(candidate_grid("svr")[0]) == {"C", "epsilon"}


def test_select_hyperparameters_small_training_set():
    """Test that fewer than four subjects take the first candidate."""
    rng = np.random.default_rng(13)
    series = _series(rng.normal(size=(3, 2, 2)), [50.0, 60.0, 70.0])

    assert select_hyperparameters("lsvr", series) == candidate_grid("lsvr")[0]


class _OffsetModel:
    def __init__(self, offset):
        self.offset = offset

    def predict(self, s):
        return s.y + self.offset, s.signed_label


def test_failed_inner_folds_are_charged_the_maximal_loss(monkeypatch, caplog):
    """Test that a grid point cannot win on the inner folds that happened to succeed."""
    rng = np.random.default_rng(25)
    series = _series(rng.normal(size=(5, 2, 2)), [45.0, 50.0, 60.0, 65.0, 70.0])

    def fake_fit(kind, training, params, *, max_outer):
        if params["C"] == 1.0 and "S00" not in [s.subject for s in training]:
            raise DegenerateDataError("no usable support")
        return _OffsetModel(0.0 if params["C"] == 1.0 else 1.0)

    monkeypatch.setattr(longitudinal, "fit_model", fake_fit)

    chosen = select_hyperparameters("lsvr", series, {"C": [1.0, 10.0], "epsilon": [1.0], "lam": [1.0]})

    assert chosen["C"] == 10.0
    assert "charging maximal loss" in caplog.text


# ---------------------------------------------------------------------------
# Leave-one-out evaluation
# ---------------------------------------------------------------------------


def test_loo_three_subjects_three_folds():
    """Test that n = 3 gives exactly three folds, plus a baseline report."""
    rng = np.random.default_rng(14)
    series = _series(rng.normal(size=(3, 2, 2)), [50.0, 60.0, 70.0])

    report = loo_evaluate(series, "lsvr", SMALL_SVR_GRID)

    assert report.n_folds == 3
    assert [p.subject for p in report.predictions] == ["S00", "S01", "S02"]
    assert report.baseline is not None
    assert report.baseline.kind == "svr"
    assert report.baseline.n_folds == 3


def test_loo_needs_three_subjects():
    """Test that two subjects cannot be evaluated."""
    rng = np.random.default_rng(15)

    with pytest.raises(ValueError, match=">= 3 subjects"):
        loo_evaluate(_series(rng.normal(size=(2, 2, 2)), [50.0, 60.0]), "lsvr")


def test_loo_lsvr_perfect_linear_target():
    """Test that a noiseless linear target is predicted within one percent point."""
    rng = np.random.default_rng(16)
    rows = rng.normal(size=(10, 2))
    X = np.repeat(rows[:, None, :], 3, axis=1)
    y = 60.0 + 5.0 * rows[:, 0]

    report = loo_evaluate(_series(X, y), "lsvr", SMALL_SVR_GRID, include_baseline=False)

    assert not report.failed_folds
    assert report.rmse is not None
    assert report.rmse < 1.0


def test_loo_lsvc_separable_classes():
    """Test that well-separated classes are classified in leave-one-out."""
    rng = np.random.default_rng(17)
    signs = np.where(np.arange(20) % 2 == 0, 1.0, -1.0)
    rows = np.column_stack([signs * (1.0 + np.abs(rng.normal(size=20))), rng.normal(size=20) * 0.1])
    X = np.repeat(rows[:, None, :], 3, axis=1)
    y = np.where(signs > 0, 75.0, 40.0)

    report = loo_evaluate(_series(X, y), "lsvc", SMALL_SVC_GRID, include_baseline=False, workers=2)

    assert report.accuracy is not None
    assert report.accuracy >= 0.85
    assert sum(map(sum, report.confusion_matrix)) == 20


def test_loo_records_single_class_fold_as_failed():
    """Test that a fold whose training set is one class is reported, not raised."""
    rng = np.random.default_rng(18)
    X = rng.normal(size=(4, 2, 2))
    y = [70.0, 40.0, 40.0, 40.0]

    report = loo_evaluate(_series(X, y), "lsvc", SMALL_SVC_GRID, include_baseline=False)

    assert report.failed_folds == ["S00"]
    assert "chance threshold" in report.predictions[0].failed
    assert report.n_folds == 4


def test_loo_fold_ignores_the_held_out_features():
    """Test that a fold's fit does not change when the held-out subject's features do."""
    rng = np.random.default_rng(26)
    X = rng.normal(size=(6, 3, 2))
    y = 60.0 + 4.0 * X[:, 0, 0] + rng.normal(size=6)
    grid = {"C": [1.0, 100.0], "epsilon": [0.1], "lam": [1.0]}
    altered = X.copy()
    altered[2] = 10.0 * rng.normal(size=(3, 2))

    original = loo_evaluate(_series(X, y), "lsvr", grid, include_baseline=False)
    changed = loo_evaluate(_series(altered, y), "lsvr", grid, include_baseline=False)

    before, after = original.predictions[2], changed.predictions[2]
    assert after.hyperparameters == before.hyperparameters
    assert after.beta == before.beta
    assert after.b == before.b
    assert after.predicted != before.predicted


def test_shuffle_control_drops_lsvc_accuracy():
    """Test that moving the informative first session at random lowers LOO accuracy."""
    drops = []
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        signs = np.where(np.arange(20) % 2 == 0, 1.0, -1.0)
        X = 3.0 * rng.normal(size=(20, 3, 2))
        X[:, 0, 0] = signs * (1.0 + np.abs(rng.normal(size=20)))
        X[:, 0, 1] = 0.1 * rng.normal(size=20)
        series = _series(X, np.where(signs > 0, 75.0, 40.0))

        original = loo_evaluate(series, "lsvc", SMALL_SVC_GRID, include_baseline=False)
        shuffled = loo_evaluate(shuffle_sessions_control(series, seed), "lsvc", SMALL_SVC_GRID, include_baseline=False)
        drops.append(original.accuracy - shuffled.accuracy)

    assert np.median(drops) >= 0.10


@pytest.mark.slow
def test_loo_default_grid_runtime():
    """Test that LSVR leave-one-out over the default grid on 20 subjects x 3 sessions stays under 30 s."""
    rng = np.random.default_rng(27)
    X = rng.normal(size=(20, 3, 4))
    y = 60.0 + 5.0 * X[:, 0, 0] + 2.0 * X[:, 2, 1] + rng.normal(size=20)

    start = time.perf_counter()
    report = loo_evaluate(_series(X, y), "lsvr", workers=4)
    elapsed = time.perf_counter() - start

    assert report.n_folds == 20
    assert not report.failed_folds
    assert elapsed < 30.0
