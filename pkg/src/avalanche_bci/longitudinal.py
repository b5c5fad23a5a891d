"""Longitudinal SVR/SVC with a temporal weight vector over sessions.

Each subject contributes a sessions x features matrix ``X_i``. The models work on
projections ``P_i = X_i' beta`` (Gram matrix ``G_ij = P_i . P_j``) with
``beta[0] = 1`` pinned, and alternate between the SVM dual for fixed ``beta`` and a
ridge-regularized linear update of the remaining ``beta`` components.
"""

from __future__ import annotations

import itertools
import logging
from collections.abc import Callable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field, replace
from typing import Any, Literal

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from sklearn.metrics import accuracy_score, confusion_matrix, mean_squared_error
from sklearn.model_selection import LeaveOneOut

from .exceptions import DegenerateDataError, NumericalError, SingleClassError
from .qpsolve import DEFAULT_TOLERANCE, DualFit, SvmModel, predict, svc_dual, svc_fit, svr_dual, svr_fit
from .types import DELTA_SIGN_CONVENTION, ModelKind
from .utils import derive_rng, ordered_map

logger = logging.getLogger(__name__)

# Constants
DEFAULT_CHANCE = 57.0
DEFAULT_LAMBDA = 1.0
DEFAULT_MAX_OUTER = 50
DEFAULT_INNER_MAX_OUTER = 10
DESIGN_FEATURES = ("delta_length", "delta_activations")
FULL_GRID: dict[str, list[float]] = {
    "C": [0.1, 1.0, 10.0, 100.0],
    "epsilon": [0.1, 1.0, 5.0],
    "lam": [0.1, 1.0, 10.0],
}
# Subset searched by default; pass FULL_GRID as the grid for the exhaustive search
DEFAULT_GRID: dict[str, list[float]] = {
    "C": [1.0, 10.0, 100.0],
    "epsilon": [1.0],
    "lam": [1.0, 10.0],
}
SCORE_RANGE = (0.0, 100.0)
_SUPPORT_THRESHOLD = 1e-12

StopReason = Literal["converged", "rejected", "max_outer"]


@dataclass(frozen=True)
class SubjectSeries:
    """Training-session features and next-session target of one subject."""

    subject: str
    X: np.ndarray
    y: float
    label: bool

    @property
    def signed_label(self) -> int:
        return 1 if self.label else -1


@dataclass(frozen=True)
class Standardizer:
    """Per-column feature mean/sd pooled over subjects and sessions, plus target mean/sd."""

    x_mean: np.ndarray
    x_sd: np.ndarray
    y_mean: float
    y_sd: float

    @classmethod
    def fit(cls, series: Sequence[SubjectSeries]) -> Standardizer:
        rows = np.concatenate([s.X for s in series], axis=0)
        x_sd = rows.std(axis=0)
        if np.any(x_sd == 0):
            logger.warning("Constant feature column(s) %s left unscaled", np.flatnonzero(x_sd == 0).tolist())
            x_sd = np.where(x_sd == 0, 1.0, x_sd)
        y = np.array([s.y for s in series])
        y_sd = float(y.std()) or 1.0
        return cls(rows.mean(axis=0), x_sd, float(y.mean()), y_sd)

    @classmethod
    def identity(cls, n_features: int) -> Standardizer:
        return cls(np.zeros(n_features), np.ones(n_features), 0.0, 1.0)

    def transform_x(self, X: np.ndarray) -> np.ndarray:  # noqa: N803
        return (np.asarray(X, dtype=np.float64) - self.x_mean) / self.x_sd

    def transform_y(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self.y_mean) / self.y_sd

    def inverse_y(self, value: float) -> float:
        return float(value * self.y_sd + self.y_mean)


@dataclass
class Design:
    """Subject series plus the standardization fitted on them."""

    series: list[SubjectSeries]
    standardizer: Standardizer
    training_sessions: list[str]
    target_session: str
    features: tuple[str, ...] = DESIGN_FEATURES

    def __len__(self) -> int:
        return len(self.series)

    def __iter__(self) -> Iterator[SubjectSeries]:
        return iter(self.series)

    def __getitem__(self, index: int) -> SubjectSeries:
        return self.series[index]


def assemble_design(
    deltas: pd.DataFrame,
    scores: Mapping[str, Mapping[str, float]],
    sessions: Sequence[str],
    chance: float = DEFAULT_CHANCE,
    *,
    features: Sequence[str] = DESIGN_FEATURES,
    drop_incomplete: bool = False,
) -> Design:
    """Build per-subject design matrices from delta features of one couple.

    Training sessions are all but the last; the target is the last session's score
    and the label is ``score > chance``.

    Args:
        deltas: Output of :func:`stats.delta_features`, restricted to one couple
        scores: subject -> session -> score
        sessions: Ordered session ids
        chance: Chance threshold (strict ``>`` for the positive class)
        features: Delta columns used as features
        drop_incomplete: Drop (with a warning) instead of raising on missing data

    Raises:
        DegenerateDataError: If a subject lacks a training session or the target score
    """
    if len(sessions) < 2:
        raise DegenerateDataError("longitudinal design needs >= 2 sessions")
    if deltas[["k", "min_dur_samples"]].drop_duplicates().shape[0] > 1:
        raise ValueError("assemble_design expects the deltas of a single couple")
    training, target = list(sessions[:-1]), sessions[-1]
    indexed = deltas.set_index(["subject", "session"])
    series: list[SubjectSeries] = []
    for subject in pd.unique(deltas["subject"]):
        try:
            rows = indexed.loc[[(subject, s) for s in training], list(features)]
        except KeyError:
            problem = f"subject {subject}: missing delta features for a training session"
        else:
            score = scores.get(subject, {}).get(target)
            if score is not None:
                X = rows.to_numpy(dtype=np.float64)  # noqa: N806
                series.append(SubjectSeries(str(subject), X, float(score), bool(score > chance)))
                continue
            problem = f"subject {subject}: missing score for session {target}"
        if not drop_incomplete:
            raise DegenerateDataError(problem)
        logger.warning("Dropping %s", problem)
    if not series:
        raise DegenerateDataError("no complete subject series")
    logger.info(
        "Design: %d subjects, %d training sessions, %d features", len(series), len(training), len(features)
    )
    return Design(series, Standardizer.fit(series), training, target, tuple(features))


def _stack(series: Sequence[SubjectSeries] | np.ndarray) -> np.ndarray:
    if isinstance(series, np.ndarray):
        X = series  # noqa: N806
    else:
        shapes = {s.X.shape for s in series}
        if len(shapes) != 1:
            raise ValueError(f"subject matrices differ in shape: {sorted(shapes)}")
        X = np.stack([s.X for s in series])  # noqa: N806
    if X.ndim != 3:
        raise ValueError(f"expected subjects x sessions x features, got {X.shape}")
    return X


def project(X: np.ndarray, beta: np.ndarray) -> np.ndarray:  # noqa: N803
    """Projections ``P_i = X_i' beta`` (subjects x features)."""
    stacked = _stack(X)
    b = np.asarray(beta, dtype=np.float64)
    if b.shape != (stacked.shape[1],):
        raise ValueError(f"beta has length {b.shape}, expected {stacked.shape[1]}")
    return np.einsum("isf,s->if", stacked, b)


def first_session_beta(n_sessions: int) -> np.ndarray:
    """``e_1``: the projection onto the first training session."""
    beta = np.zeros(n_sessions)
    beta[0] = 1.0
    return beta


def gram(series: Sequence[SubjectSeries] | np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Temporal Gram matrix ``G_ij = beta' X_i X_j' beta``."""
    P = project(_stack(series), beta)  # noqa: N806
    return P @ P.T


@dataclass
class LongitudinalModel:
    """Fitted LSVR or LSVC."""

    kind: Literal["lsvr", "lsvc"]
    beta: np.ndarray
    coef: np.ndarray
    dual: np.ndarray
    b: float
    C: float
    epsilon: float | None
    lam: float
    standardizer: Standardizer
    train_X: np.ndarray = field(repr=False)
    subjects: list[str] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    beta_trajectory: list[list[float]] = field(default_factory=list)
    objective_trajectory: list[float] = field(default_factory=list)
    rejected_updates: int = 0
    stopped: StopReason = "max_outer"

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(np.abs(self.coef) > _SUPPORT_THRESHOLD)

    @property
    def weights(self) -> np.ndarray:
        """Feature-space weights ``sum_i coef_i P_i``."""
        return self.coef @ project(self.train_X, self.beta)

    def decision_function(self, X_new: np.ndarray) -> float:  # noqa: N803
        """Raw model output in standardized units."""
        Z = self.standardizer.transform_x(X_new)  # noqa: N806
        if Z.shape != self.train_X.shape[1:]:
            raise ValueError(f"X_new has shape {Z.shape}, expected {self.train_X.shape[1:]}")
        return float(self.weights @ (Z.T @ self.beta) + self.b)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "beta": self.beta.tolist(),
            "coef": self.coef.tolist(),
            "b": self.b,
            "C": self.C,
            "epsilon": self.epsilon,
            "lambda": self.lam,
            "iterations": self.iterations,
            "converged": self.converged,
            "stopped": self.stopped,
            "beta_trajectory": self.beta_trajectory,
            "objective_trajectory": self.objective_trajectory,
            "support": self.support.tolist(),
        }


def _beta_update(
    X: np.ndarray, beta: np.ndarray, fit: DualFit, residual_targets: np.ndarray, lam: float  # noqa: N803
) -> np.ndarray | None:
    """Ridge step on ``beta[1:]`` with ``beta[0] = 1`` held fixed."""
    support = np.flatnonzero(np.abs(fit.coef) > _SUPPORT_THRESHOLD)
    if support.size == 0:
        return None
    w = fit.coef @ project(X, beta)
    V = np.einsum("isf,f->is", X[support], w)  # noqa: N806
    r = residual_targets[support] - V[:, 0]
    V_free = V[:, 1:]  # noqa: N806
    lhs = lam * np.eye(V_free.shape[1]) + V_free.T @ V_free
    rhs = lam * beta[1:] + V_free.T @ r
    try:
        free = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(free)):
        return None
    return np.concatenate([[1.0], free])


DualSolver = Callable[[np.ndarray, np.ndarray | None], DualFit]


def _dual_solver(
    kind: Literal["lsvr", "lsvc"],
    series: Sequence[SubjectSeries],
    X: np.ndarray,  # noqa: N803
    scaler: Standardizer,
    C: float,  # noqa: N803
    epsilon: float | None,
    qp_tolerance: float,
) -> tuple[np.ndarray, DualSolver]:
    """Targets plus a dual solver ``(beta, warm_start) -> DualFit`` on the temporal Gram matrix."""
    if kind == "lsvr":
        assert epsilon is not None
        targets = scaler.transform_y(np.array([s.y for s in series]))
        eps = epsilon / scaler.y_sd

        def solve_svr(beta: np.ndarray, start: np.ndarray | None) -> DualFit:
            return svr_dual(gram(X, beta), targets, C, eps, tolerance=qp_tolerance, x0=start)

        return targets, solve_svr

    labels = np.array([s.signed_label for s in series], dtype=np.float64)
    if np.unique(labels).size < 2:
        raise SingleClassError(f"all {len(series)} subjects fall in one class")

    def solve_svc(beta: np.ndarray, start: np.ndarray | None) -> DualFit:
        return svc_dual(gram(X, beta), labels, C, tolerance=qp_tolerance, x0=start)

    return labels, solve_svc


def _initial_beta(beta_init: np.ndarray | None, n_sessions: int) -> np.ndarray:
    if beta_init is None:
        return first_session_beta(n_sessions)
    beta = np.asarray(beta_init, dtype=np.float64).copy()
    if beta.shape != (n_sessions,):
        raise ValueError(f"beta_init must have length {n_sessions}")
    if beta[0] != 1.0:
        raise ValueError("beta_init[0] must be 1")
    return beta


@dataclass
class _Alternation:
    """Accepted iterates of the beta/dual alternation."""

    beta: np.ndarray
    fit: DualFit
    beta_trajectory: list[list[float]]
    objective_trajectory: list[float]
    iterations: int = 0
    rejected: int = 0
    stopped: StopReason = "max_outer"

    @property
    def objective(self) -> float:
        return self.objective_trajectory[-1]

    def reject(self) -> None:
        self.rejected += 1
        self.stopped = "rejected"

    def accept(self, beta: np.ndarray, fit: DualFit) -> float:
        """Move to ``beta`` and return the relative beta change."""
        change = float(np.linalg.norm(beta - self.beta) / max(np.linalg.norm(self.beta), 1e-12))
        self.beta, self.fit = beta, fit
        self.beta_trajectory.append(beta.tolist())
        self.objective_trajectory.append(-fit.objective)
        return change


def _run_alternation(
    kind: Literal["lsvr", "lsvc"],
    X: np.ndarray,  # noqa: N803
    targets: np.ndarray,
    solve_dual: DualSolver,
    state: _Alternation,
    lam: float,
    *,
    max_outer: int,
    tol: float,
) -> None:
    while state.iterations < max_outer:
        state.iterations += 1
        residual_targets = targets - state.fit.b if kind == "lsvr" else targets
        candidate = _beta_update(X, state.beta, state.fit, residual_targets, lam)
        if candidate is None:
            logger.info("%s: beta update rejected (degenerate system), keeping previous beta", kind)
            state.reject()
            return
        candidate_fit = solve_dual(candidate, state.fit.dual)
        if -candidate_fit.objective > state.objective:
            logger.debug("%s: beta update would raise the objective, stopping", kind)
            state.reject()
            return
        if state.accept(candidate, candidate_fit) < tol:
            state.stopped = "converged"
            return
    logger.warning("%s: beta did not converge within %d outer iterations", kind, max_outer)


def _alternate(
    kind: Literal["lsvr", "lsvc"],
    series: Sequence[SubjectSeries],
    C: float,  # noqa: N803
    epsilon: float | None,
    lam: float,
    *,
    max_outer: int,
    tol: float,
    beta_init: np.ndarray | None,
    update_beta: bool,
    standardize: bool,
    qp_tolerance: float,
) -> LongitudinalModel:
    if len(series) < 3:
        raise ValueError(f"{kind} needs >= 3 subjects, got {len(series)}")
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    raw = _stack(series)
    scaler = Standardizer.fit(series) if standardize else Standardizer.identity(raw.shape[2])
    X = scaler.transform_x(raw)  # noqa: N806
    targets, solve_dual = _dual_solver(kind, series, X, scaler, C, epsilon, qp_tolerance)
    beta = _initial_beta(beta_init, X.shape[1])
    fit = solve_dual(beta, None)
    state = _Alternation(beta, fit, [beta.tolist()], [-fit.objective])
    if X.shape[1] == 1 or not update_beta:
        state.stopped = "converged"
    else:
        _run_alternation(kind, X, targets, solve_dual, state, lam, max_outer=max_outer, tol=tol)
    if not state.fit.solution.converged:
        logger.warning("%s: inner QP did not converge", kind)

    return LongitudinalModel(
        kind=kind,
        beta=state.beta,
        coef=state.fit.coef,
        dual=state.fit.dual,
        b=state.fit.b,
        C=float(C),
        epsilon=epsilon,
        lam=float(lam),
        standardizer=scaler,
        train_X=X,
        subjects=[s.subject for s in series],
        iterations=state.iterations,
        converged=state.stopped == "converged" and state.fit.solution.converged,
        stopped=state.stopped,
        beta_trajectory=state.beta_trajectory,
        objective_trajectory=state.objective_trajectory,
        rejected_updates=state.rejected,
    )


def lsvr_fit(
    series: Sequence[SubjectSeries],
    C: float = 1.0,  # noqa: N803
    epsilon: float = 0.1,
    lam: float = DEFAULT_LAMBDA,
    *,
    max_outer: int = DEFAULT_MAX_OUTER,
    tol: float = 1e-6,
    beta_init: np.ndarray | None = None,
    update_beta: bool = True,
    standardize: bool = True,
    qp_tolerance: float = DEFAULT_TOLERANCE,
) -> LongitudinalModel:
    """Fit a longitudinal epsilon-SVR.

    Args:
        series: At least three subject series of equal shape
        C: Box constraint
        epsilon: Tube half-width in score units (percent points)
        lam: Ridge weight pulling each beta update toward the previous beta
        max_outer: Maximum alternating iterations
        tol: Relative beta change that ends the alternation
        beta_init: Starting beta (``beta[0]`` must be 1); defaults to
            the first-session projection (1, 0, ..., 0)
        update_beta: Keep beta fixed at ``beta_init`` when false
        standardize: Standardize features and target on ``series``
        qp_tolerance: KKT tolerance of the inner QP

    Returns:
        Fitted model with beta and objective trajectories
    """
    return _alternate(
        "lsvr", series, C, epsilon, lam,
        max_outer=max_outer, tol=tol, beta_init=beta_init, update_beta=update_beta,
        standardize=standardize, qp_tolerance=qp_tolerance,
    )


def lsvc_fit(
    series: Sequence[SubjectSeries],
    C: float = 1.0,  # noqa: N803
    lam: float = DEFAULT_LAMBDA,
    *,
    max_outer: int = DEFAULT_MAX_OUTER,
    tol: float = 1e-6,
    beta_init: np.ndarray | None = None,
    update_beta: bool = True,
    standardize: bool = True,
    qp_tolerance: float = DEFAULT_TOLERANCE,
) -> LongitudinalModel:
    """Fit a longitudinal SVC on the labels ``score > chance``.

    Raises:
        SingleClassError: If every subject falls in one class
    """
    return _alternate(
        "lsvc", series, C, None, lam,
        max_outer=max_outer, tol=tol, beta_init=beta_init, update_beta=update_beta,
        standardize=standardize, qp_tolerance=qp_tolerance,
    )


@dataclass(frozen=True)
class ScorePrediction:
    score: float
    raw_score: float
    clipped: bool


def lsvr_predict(model: LongitudinalModel, X_new: np.ndarray) -> ScorePrediction:  # noqa: N803
    """Predict a next-session score in percent, clipped to [0, 100]."""
    raw = model.standardizer.inverse_y(model.decision_function(X_new))
    score = float(np.clip(raw, *SCORE_RANGE))
    if score != raw:
        logger.debug("Prediction %.3f clipped to %.1f", raw, score)
    return ScorePrediction(score=score, raw_score=raw, clipped=score != raw)


def lsvc_predict(model: LongitudinalModel, X_new: np.ndarray) -> int:  # noqa: N803
    """Predicted class (+1 above chance); ties resolve to +1."""
    return 1 if model.decision_function(X_new) >= 0 else -1


def shuffle_sessions_control(series: Sequence[SubjectSeries], seed: int) -> list[SubjectSeries]:
    """Permute each subject's session rows independently; targets are untouched."""
    shuffled = []
    for index, s in enumerate(series):
        order = derive_rng(seed, index).permutation(s.X.shape[0])
        shuffled.append(replace(s, X=s.X[order]))
    return shuffled


# ---------------------------------------------------------------------------
# Leave-one-out evaluation
# ---------------------------------------------------------------------------


class SubjectPrediction(BaseModel):
    subject: str
    actual: float
    actual_label: int
    predicted: float | None = None
    predicted_label: int | None = None
    clipped: bool = False
    hyperparameters: dict[str, float] = Field(default_factory=dict)
    beta: list[float] | None = None
    b: float | None = None
    failed: str | None = None


class LooReport(BaseModel):
    """Content of ``predictions.json`` for one model kind."""

    kind: ModelKind
    n_folds: int
    rmse: float | None = None
    accuracy: float | None = None
    confusion_matrix: list[list[int]] | None = None
    predictions: list[SubjectPrediction] = Field(default_factory=list)
    failed_folds: list[str] = Field(default_factory=list)
    chance: float = DEFAULT_CHANCE
    sign_convention: str = DELTA_SIGN_CONVENTION
    baseline: LooReport | None = None
    control: LooReport | None = None


_PARAMS_BY_KIND: dict[str, tuple[str, ...]] = {
    "lsvr": ("C", "lam", "epsilon"),
    "lsvc": ("C", "lam"),
    "svr": ("C", "epsilon"),
    "svc": ("C",),
}


def candidate_grid(kind: ModelKind, grid: Mapping[str, Sequence[float]] | None = None) -> list[dict[str, float]]:
    """Hyperparameter combinations in tie-break order (smaller C, then smaller lambda)."""
    merged = {**DEFAULT_GRID, **(grid or {})}
    names = _PARAMS_BY_KIND[kind]
    values = [sorted(merged[name]) for name in names]
    return [dict(zip(names, combo, strict=True)) for combo in itertools.product(*values)]


@dataclass
class FittedModel:
    """A fold's fitted model, longitudinal or standard."""

    kind: ModelKind
    params: dict[str, float]
    longitudinal: LongitudinalModel | None = None
    standard: SvmModel | None = None
    scaler: Standardizer | None = None

    def predict(self, s: SubjectSeries) -> tuple[float, int]:
        if self.longitudinal is not None:
            if self.kind == "lsvr":
                value = lsvr_predict(self.longitudinal, s.X).score
                return value, 0
            return self.longitudinal.decision_function(s.X), lsvc_predict(self.longitudinal, s.X)
        assert self.standard is not None and self.scaler is not None
        row = self.scaler.transform_x(s.X).mean(axis=0)
        out = predict(self.standard, row[None, :])
        if self.kind == "svr":
            return float(np.clip(self.scaler.inverse_y(float(out[0])), *SCORE_RANGE)), 0
        return float(self.standard.decision_function(row[None, :])[0]), int(out[0])


def fit_model(
    kind: ModelKind,
    series: Sequence[SubjectSeries],
    params: Mapping[str, float],
    *,
    max_outer: int = DEFAULT_MAX_OUTER,
) -> FittedModel:
    """Fit one model kind; ``svr``/``svc`` use the session-averaged feature row."""
    C = params["C"]  # noqa: N806
    if kind == "lsvr":
        model = lsvr_fit(series, C, params["epsilon"], params["lam"], max_outer=max_outer)
        return FittedModel(kind, dict(params), longitudinal=model)
    if kind == "lsvc":
        model = lsvc_fit(series, C, params["lam"], max_outer=max_outer)
        return FittedModel(kind, dict(params), longitudinal=model)
    scaler = Standardizer.fit(series)
    rows = np.stack([scaler.transform_x(s.X).mean(axis=0) for s in series])
    if kind == "svr":
        targets = scaler.transform_y(np.array([s.y for s in series]))
        standard = svr_fit(rows, targets, C, params["epsilon"] / scaler.y_sd)
    else:
        labels = np.array([s.signed_label for s in series], dtype=np.float64)
        if np.unique(labels).size < 2:
            raise SingleClassError(f"all {len(series)} subjects fall in one class")
        standard = svc_fit(rows, labels, C)
    return FittedModel(kind, dict(params), standard=standard, scaler=scaler)


def _is_regression(kind: ModelKind) -> bool:
    return kind in ("lsvr", "svr")


def _max_loss(kind: ModelKind, held_out: SubjectSeries) -> float:
    """Loss charged to a failed fold: a misclassification, or the worst in-range score."""
    if not _is_regression(kind):
        return 1.0
    low, high = SCORE_RANGE
    return max(held_out.y - low, high - held_out.y) ** 2


def _inner_score(kind: ModelKind, series: list[SubjectSeries], params: dict[str, float], max_outer: int) -> float:
    losses = []
    for train_idx, test_idx in LeaveOneOut().split(np.arange(len(series))):
        held_out = series[int(test_idx[0])]
        try:
            model = fit_model(kind, [series[i] for i in train_idx], params, max_outer=max_outer)
        except (NumericalError, ValueError) as e:
            logger.warning("%s %s: inner fold %s failed (%s), charging maximal loss", kind, params, held_out.subject, e)
            losses.append(_max_loss(kind, held_out))
            continue
        value, label = model.predict(held_out)
        losses.append((value - held_out.y) ** 2 if _is_regression(kind) else float(label != held_out.signed_label))
    return float(np.mean(losses))


def select_hyperparameters(
    kind: ModelKind,
    series: list[SubjectSeries],
    grid: Mapping[str, Sequence[float]] | None = None,
    *,
    max_outer: int = DEFAULT_INNER_MAX_OUTER,
) -> dict[str, float]:
    """Pick hyperparameters by inner leave-one-out on ``series`` only.

    A failed inner fold is logged and charged the maximal loss, so grid points whose
    fits break cannot win on the folds that happened to succeed.
    """
    candidates = candidate_grid(kind, grid)
    if len(candidates) == 1 or len(series) < 4:
        return candidates[0]
    best, best_score = candidates[0], np.inf
    for params in candidates:
        score = _inner_score(kind, series, params, max_outer)
        if score < best_score:
            best, best_score = params, score
    logger.debug("%s: selected %s (inner loss %.4g)", kind, best, best_score)
    return best


def _run_fold(
    kind: ModelKind,
    series: list[SubjectSeries],
    held_out: int,
    grid: Mapping[str, Sequence[float]] | None,
    max_outer: int,
    inner_max_outer: int,
) -> SubjectPrediction:
    target = series[held_out]
    training = [s for i, s in enumerate(series) if i != held_out]
    prediction = SubjectPrediction(subject=target.subject, actual=target.y, actual_label=target.signed_label)
    try:
        params = select_hyperparameters(kind, training, grid, max_outer=inner_max_outer)
        model = fit_model(kind, training, params, max_outer=max_outer)
    except (NumericalError, ValueError) as e:
        logger.warning("Fold %s failed: %s", target.subject, e)
        prediction.failed = str(e)
        return prediction
    value, label = model.predict(target)
    prediction.hyperparameters = params
    if model.longitudinal is not None:
        prediction.beta = model.longitudinal.beta.tolist()
        prediction.b = model.longitudinal.b
    elif model.standard is not None:
        prediction.b = model.standard.b
    if _is_regression(kind):
        prediction.predicted = value
        prediction.clipped = model.longitudinal is not None and lsvr_predict(model.longitudinal, target.X).clipped
    else:
        prediction.predicted = value
        prediction.predicted_label = label
    return prediction


def _summarize(kind: ModelKind, predictions: list[SubjectPrediction], chance: float) -> LooReport:
    ok = [p for p in predictions if p.failed is None and p.predicted is not None]
    report = LooReport(
        kind=kind,
        n_folds=len(predictions),
        predictions=predictions,
        failed_folds=[p.subject for p in predictions if p.failed is not None],
        chance=chance,
    )
    if not ok:
        return report
    if _is_regression(kind):
        actual = [p.actual for p in ok]
        predicted = [p.predicted for p in ok]
        report.rmse = float(np.sqrt(mean_squared_error(actual, predicted)))
    else:
        actual_labels = [p.actual_label for p in ok]
        predicted_labels = [p.predicted_label for p in ok]
        report.accuracy = float(accuracy_score(actual_labels, predicted_labels))
        report.confusion_matrix = confusion_matrix(actual_labels, predicted_labels, labels=[-1, 1]).tolist()
    return report


def loo_evaluate(
    series: Sequence[SubjectSeries],
    kind: ModelKind,
    grid: Mapping[str, Sequence[float]] | None = None,
    *,
    chance: float = DEFAULT_CHANCE,
    include_baseline: bool = True,
    max_outer: int = DEFAULT_MAX_OUTER,
    inner_max_outer: int = DEFAULT_INNER_MAX_OUTER,
    workers: int = 1,
) -> LooReport:
    """Leave-one-subject-out evaluation with inner-LOO hyperparameter selection.

    Standardization, hyperparameter selection and fitting see the training subjects
    of each fold only. Failed folds are reported, not raised. For ``lsvr``/``lsvc``
    the report carries the matching standard model (``svr``/``svc`` on the
    session-averaged row) as ``baseline``.

    Args:
        series: At least three subject series
        kind: Model kind
        grid: Hyperparameter lists overriding ``DEFAULT_GRID`` entries
        chance: Chance threshold recorded in the report
        include_baseline: Also evaluate the standard model
        max_outer: Alternating iterations of the outer fits
        inner_max_outer: Alternating iterations of the inner-LOO fits
        workers: Threads over folds

    Returns:
        Report with per-subject predictions and RMSE or accuracy + confusion matrix
    """
    items = list(series)
    if len(items) < 3:
        raise ValueError(f"loo_evaluate needs >= 3 subjects, got {len(items)}")
    folds = [int(test[0]) for _, test in LeaveOneOut().split(np.arange(len(items)))]
    predictions = ordered_map(
        lambda held_out: _run_fold(kind, items, held_out, grid, max_outer, inner_max_outer),
        folds,
        workers,
    )
    report = _summarize(kind, predictions, chance)
    logger.info(
        "LOO %s: %d folds, %d failed, rmse=%s accuracy=%s",
        kind, report.n_folds, len(report.failed_folds), report.rmse, report.accuracy,
    )
    if include_baseline and kind in ("lsvr", "lsvc"):
        baseline_kind: ModelKind = "svr" if kind == "lsvr" else "svc"
        report.baseline = loo_evaluate(
            items, baseline_kind, grid, chance=chance, include_baseline=False, workers=workers
        )
    return report
