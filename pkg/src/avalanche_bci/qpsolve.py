"""Box-constrained QP with one linear equality, and linear SVC/SVR on top of it.

The solver minimizes ``0.5 x'Qx + c'x`` subject to ``lower <= x <= upper`` and
``a'x = rhs`` by sequential pairwise updates: at each step the maximal KKT
violating pair is moved jointly along the equality constraint with an exact,
clipped line search. Variables with ``a_i = 0`` (or every variable when there is no
equality) take single-coordinate steps instead. The iteration loop is compiled with
numba and releases the GIL, so concurrent fits run in parallel threads.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Literal

import numba as nb
import numpy as np

from .exceptions import InfeasibleProblemError, SingleClassError

logger = logging.getLogger(__name__)

# Constants
DEFAULT_TOLERANCE = 1e-6
DEFAULT_MAX_ITERATIONS = 100_000
SYMMETRY_TOLERANCE = 1e-10
_CURVATURE_FLOOR = 1e-12
_FREE_MARGIN = 1e-9


@dataclass
class QpProblem:
    """``min 0.5 x'Qx + c'x`` s.t. ``lower <= x <= upper`` and ``a'x = rhs``.

    ``a = None`` drops the equality constraint.
    """

    Q: np.ndarray
    c: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    a: np.ndarray | None = None
    rhs: float = 0.0
    tolerance: float = DEFAULT_TOLERANCE
    max_iterations: int = DEFAULT_MAX_ITERATIONS

    def __post_init__(self) -> None:
        self.Q = np.asarray(self.Q, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.float64)
        n = self.c.shape[0]
        self.lower = np.broadcast_to(np.asarray(self.lower, dtype=np.float64), (n,)).copy()
        self.upper = np.broadcast_to(np.asarray(self.upper, dtype=np.float64), (n,)).copy()
        if self.a is not None:
            self.a = np.asarray(self.a, dtype=np.float64)
        self.validate()

    @property
    def n(self) -> int:
        return int(self.c.shape[0])

    def validate(self) -> None:
        """Check shapes, bounds, symmetry and feasibility.

        Raises:
            ValueError: On malformed input
            InfeasibleProblemError: If ``rhs`` cannot be reached within the bounds
        """
        n = self.n
        if self.Q.shape != (n, n):
            raise ValueError(f"Q must be {n}x{n}, got {self.Q.shape}")
        if self.a is not None and self.a.shape != (n,):
            raise ValueError(f"a must have length {n}, got {self.a.shape}")
        if not (np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper))):
            raise ValueError("bounds must be finite")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")
        if np.max(np.abs(self.Q - self.Q.T), initial=0.0) > SYMMETRY_TOLERANCE:
            raise ValueError("Q is not symmetric")
        if self.a is not None:
            low = np.minimum(self.a * self.lower, self.a * self.upper).sum()
            high = np.maximum(self.a * self.lower, self.a * self.upper).sum()
            if not low - self.tolerance <= self.rhs <= high + self.tolerance:
                raise InfeasibleProblemError(
                    f"equality a'x = {self.rhs} unreachable within bounds (range [{low}, {high}])"
                )

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.Q @ x + self.c @ x)


@dataclass
class QpSolution:
    x: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    converged: bool
    gradient: np.ndarray = field(repr=False)


def _feasible_start(problem: QpProblem, start: np.ndarray | None = None) -> np.ndarray:
    """Clip ``start`` (default zeros) into the box and repair ``a'x = rhs`` greedily."""
    if start is None:
        x = np.zeros(problem.n)
    else:
        x = np.asarray(start, dtype=np.float64).copy()
        if x.shape != (problem.n,):
            raise ValueError(f"x0 must have length {problem.n}, got {x.shape}")
    x = np.clip(x, problem.lower, problem.upper)
    if problem.a is None:
        return x
    a = problem.a
    residual = problem.rhs - float(a @ x)
    for i in np.flatnonzero(a):
        if abs(residual) <= 1e-15:
            break
        step = np.clip(residual / a[i], problem.lower[i] - x[i], problem.upper[i] - x[i])
        x[i] += step
        residual -= a[i] * step
    return x


@nb.njit(cache=True, nogil=True)
def _most_violating(
    x: np.ndarray, g: np.ndarray, lower: np.ndarray, upper: np.ndarray, a: np.ndarray
) -> tuple[float, int, int, float, int]:
    """Maximal violating pair over ``a_i != 0`` and maximal single violation over ``a_i = 0``."""
    up_value, up_index = np.inf, -1
    down_value, down_index = -np.inf, -1
    single_value, single_index = 0.0, -1
    for k in range(x.shape[0]):
        below_upper = x[k] < upper[k]
        above_lower = x[k] > lower[k]
        if a[k] != 0.0:
            h = g[k] / a[k]
            can_up = below_upper if a[k] > 0.0 else above_lower
            can_down = above_lower if a[k] > 0.0 else below_upper
            if can_up and h < up_value:
                up_value, up_index = h, k
            if can_down and h > down_value:
                down_value, down_index = h, k
        else:
            if g[k] < 0.0:
                violation = -g[k] if below_upper else 0.0
            else:
                violation = g[k] if above_lower else 0.0
            if violation > single_value:
                single_value, single_index = violation, k
    pair_value = down_value - up_value if up_index >= 0 and down_index >= 0 else 0.0
    return pair_value, up_index, down_index, single_value, single_index


@nb.njit(cache=True, nogil=True)
def _apply(
    x: np.ndarray, g: np.ndarray, Q: np.ndarray, lower: np.ndarray, upper: np.ndarray, i: int, delta: float  # noqa: N803
) -> None:
    if delta == 0.0:
        return
    new = x[i] + delta
    # Snap to a bound when the step lands on it
    if abs(new - upper[i]) <= 1e-14 * max(1.0, abs(upper[i])):
        new = upper[i]
    elif abs(new - lower[i]) <= 1e-14 * max(1.0, abs(lower[i])):
        new = lower[i]
    new = min(max(new, lower[i]), upper[i])
    moved = new - x[i]
    for k in range(g.shape[0]):
        g[k] += Q[k, i] * moved
    x[i] = new


@nb.njit(cache=True, nogil=True)
def _pair_step(
    x: np.ndarray, g: np.ndarray, Q: np.ndarray, lower: np.ndarray, upper: np.ndarray, a: np.ndarray, i: int, j: int  # noqa: N803
) -> None:
    """Move along ``x_i += t / a_i``, ``x_j -= t / a_j`` (keeps ``a'x``)."""
    h_i, h_j = g[i] / a[i], g[j] / a[j]
    curvature = Q[i, i] / a[i] ** 2 + Q[j, j] / a[j] ** 2 - 2.0 * Q[i, j] / (a[i] * a[j])
    t = (h_j - h_i) / curvature if curvature > _CURVATURE_FLOOR else np.inf
    t_i = max(a[i] * (lower[i] - x[i]), a[i] * (upper[i] - x[i]))
    t_j = max(a[j] * (x[j] - upper[j]), a[j] * (x[j] - lower[j]))
    t = min(t, t_i, t_j)
    di, dj = t / a[i], -t / a[j]
    _apply(x, g, Q, lower, upper, i, di)
    _apply(x, g, Q, lower, upper, j, dj)


@nb.njit(cache=True, nogil=True)
def _single_step(x: np.ndarray, g: np.ndarray, Q: np.ndarray, lower: np.ndarray, upper: np.ndarray, i: int) -> None:  # noqa: N803
    q = Q[i, i]
    if q > _CURVATURE_FLOOR:
        target = x[i] - g[i] / q
    else:
        target = upper[i] if g[i] < 0.0 else lower[i]
    _apply(x, g, Q, lower, upper, i, min(max(target, lower[i]), upper[i]) - x[i])


@nb.njit(cache=True, nogil=True)
def _smo_loop(
    x: np.ndarray,
    g: np.ndarray,
    Q: np.ndarray,  # noqa: N803
    lower: np.ndarray,
    upper: np.ndarray,
    a: np.ndarray,
    tolerance: float,
    max_iterations: int,
) -> tuple[int, float]:
    """Update ``x`` and ``g`` in place; returns (iterations, final KKT residual)."""
    iterations = 0
    while True:
        pair_value, i, j, single_value, s = _most_violating(x, g, lower, upper, a)
        residual = max(pair_value, single_value, 0.0)
        if residual < tolerance or iterations >= max_iterations:
            return iterations, residual
        if pair_value >= single_value:
            _pair_step(x, g, Q, lower, upper, a, i, j)
        else:
            _single_step(x, g, Q, lower, upper, s)
        iterations += 1


def _equality_row(problem: QpProblem) -> np.ndarray:
    return np.zeros(problem.n) if problem.a is None else np.ascontiguousarray(problem.a)


def kkt_residual(problem: QpProblem, x: np.ndarray) -> float:
    """Largest KKT violation of ``x`` (0 at an exact optimum)."""
    point = np.ascontiguousarray(x, dtype=np.float64)
    g = problem.Q @ point + problem.c
    pair_value, _, _, single_value, _ = _most_violating(
        point, g, problem.lower, problem.upper, _equality_row(problem)
    )
    return float(max(pair_value, single_value, 0.0))


def solve(problem: QpProblem, x0: np.ndarray | None = None) -> QpSolution:
    """Solve a box-constrained QP with at most one equality constraint.

    Args:
        problem: Validated problem
        x0: Optional warm start; it is clipped into the box and the equality is
            repaired before the first step

    Returns:
        Solution; ``converged`` is false when ``max_iterations`` was reached first,
        in which case the last iterate is returned

    Example:
        ```python
        problem = QpProblem(Q=np.eye(2), c=np.zeros(2), lower=0.0, upper=1.0,
                            a=np.ones(2), rhs=1.0)
        solve(problem).x  # array([0.5, 0.5])
        ```
    """
    x = _feasible_start(problem, x0)
    if x0 is not None and problem.a is not None and abs(float(problem.a @ x) - problem.rhs) > problem.tolerance:
        logger.debug("Warm start could not be repaired, starting from zero")
        x = _feasible_start(problem)
    Q = np.ascontiguousarray(problem.Q)  # noqa: N806
    g = Q @ x + problem.c
    iterations, residual = _smo_loop(
        x, g, Q, problem.lower, problem.upper, _equality_row(problem),
        float(problem.tolerance), int(problem.max_iterations),
    )

    converged = bool(residual < problem.tolerance)
    if not converged:
        logger.warning(
            "QP not converged after %d iterations (KKT residual %.3g)", iterations, residual
        )
    g = Q @ x + problem.c
    return QpSolution(
        x=x,
        objective=problem.objective(x),
        kkt_residual=float(residual),
        iterations=int(iterations),
        converged=converged,
        gradient=g,
    )


def intercept(solution: QpSolution, problem: QpProblem) -> float:
    """Equality multiplier of an SVM dual, i.e. the bias ``b``.

    Mean of ``-g_i / a_i`` over free variables; without free variables, the
    midpoint of the interval allowed by the variables at their bounds.
    """
    a = problem.a
    if a is None:
        return 0.0
    x, g = solution.x, solution.gradient
    nonzero = a != 0
    values = np.where(nonzero, -g / np.where(nonzero, a, 1.0), np.nan)
    span = problem.upper - problem.lower
    at_lower = x <= problem.lower + _FREE_MARGIN * np.maximum(span, 1.0)
    at_upper = x >= problem.upper - _FREE_MARGIN * np.maximum(span, 1.0)
    free = nonzero & ~at_lower & ~at_upper
    if free.any():
        return float(values[free].mean())
    positive = a > 0
    lb_mask = nonzero & ((at_lower & positive) | (at_upper & ~positive))
    ub_mask = nonzero & ((at_lower & ~positive) | (at_upper & positive))
    lb = float(values[lb_mask].max()) if lb_mask.any() else -np.inf
    ub = float(values[ub_mask].min()) if ub_mask.any() else np.inf
    if np.isfinite(lb) and np.isfinite(ub):
        return (lb + ub) / 2.0
    return lb if np.isfinite(lb) else (ub if np.isfinite(ub) else 0.0)


@dataclass
class DualFit:
    """SVM dual solution on a precomputed kernel.

    ``coef`` are the signed coefficients of the expansion
    ``f(z) = sum_i coef_i k(x_i, z) + b`` (``alpha_i y_i`` for SVC,
    ``gamma*_i - gamma_i`` for SVR).
    """

    coef: np.ndarray
    b: float
    dual: np.ndarray
    objective: float
    solution: QpSolution = field(repr=False)

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(np.abs(self.coef) > 0)


def svc_dual(
    K: np.ndarray,  # noqa: N803
    y: np.ndarray,
    C: float,  # noqa: N803
    *,
    tolerance: float = DEFAULT_TOLERANCE,
    max_iterations: int = DEFAULT_MAX_ITERATIONS,
    x0: np.ndarray | None = None,
) -> DualFit:
    """Soft-margin SVC dual on kernel ``K`` with labels in {-1, +1}.

    Raises:
        SingleClassError: If only one class is present
    """
    labels = np.asarray(y, dtype=np.float64)
    if not np.all(np.isin(labels, (-1.0, 1.0))):
        raise ValueError("SVC labels must be -1 or +1")
    if np.unique(labels).size < 2:
        raise SingleClassError(f"SVC needs both classes, got only {int(labels[0]):+d}")
    if C <= 0:
        raise ValueError(f"C must be positive, got {C}")
    n = labels.size
    problem = QpProblem(
        Q=np.outer(labels, labels) * K,
        c=-np.ones(n),
        lower=np.zeros(n),
        upper=np.full(n, float(C)),
        a=labels,
        rhs=0.0,
        tolerance=tolerance,
        max_iterations=max_iterations,
    )
    solution = solve(problem, x0)
    return DualFit(
        coef=solution.x * labels,
        b=intercept(solution, problem),
        dual=solution.x,
        objective=solution.objective,
        solution=solution,
    )


def svr_dual(
    K: np.ndarray,  # noqa: N803
    targets: np.ndarray,
    C: float,  # noqa: N803
    epsilon: float,
    *,
    tolerance: float = DEFAULT_TOLERANCE,
    max_iterations: int = DEFAULT_MAX_ITERATIONS,
    x0: np.ndarray | None = None,
) -> DualFit:
    """Epsilon-insensitive SVR dual on kernel ``K``.

    Variables are ``[gamma*; gamma]`` in ``[0, C]`` with ``sum(gamma* - gamma) = 0``.
    ``x0`` warm-starts the solver, e.g. from the dual of a neighboring kernel.
    """
    t = np.asarray(targets, dtype=np.float64)
    n = t.size
    if n < 2:
        raise ValueError(f"SVR needs >= 2 samples, got {n}")
    if C <= 0 or epsilon < 0:
        raise ValueError(f"need C > 0 and epsilon >= 0, got C={C}, epsilon={epsilon}")
    problem = QpProblem(
        Q=np.block([[K, -K], [-K, K]]),
        c=np.concatenate([epsilon - t, epsilon + t]),
        lower=np.zeros(2 * n),
        upper=np.full(2 * n, float(C)),
        a=np.concatenate([np.ones(n), -np.ones(n)]),
        rhs=0.0,
        tolerance=tolerance,
        max_iterations=max_iterations,
    )
    solution = solve(problem, x0)
    return DualFit(
        coef=solution.x[:n] - solution.x[n:],
        b=intercept(solution, problem),
        dual=solution.x,
        objective=solution.objective,
        solution=solution,
    )


@dataclass
class SvmModel:
    """Linear SVC or SVR fitted by :func:`svc_fit` / :func:`svr_fit`."""

    kind: Literal["svc", "svr"]
    coef: np.ndarray
    b: float
    support: np.ndarray
    X: np.ndarray
    C: float
    epsilon: float | None
    converged: bool
    iterations: int

    @property
    def weights(self) -> np.ndarray:
        return self.coef @ self.X

    def decision_function(self, features: np.ndarray) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(features, dtype=np.float64))  # noqa: N806
        if Z.shape[1] != self.X.shape[1]:
            raise ValueError(f"expected {self.X.shape[1]} features, got {Z.shape[1]}")
        return Z @ self.weights + self.b

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "coef": self.coef.tolist(),
            "b": self.b,
            "support": self.support.tolist(),
            "C": self.C,
            "epsilon": self.epsilon,
            "converged": self.converged,
            "iterations": self.iterations,
        }


def _as_matrix(features: np.ndarray) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)  # noqa: N806
    if X.ndim == 1:
        X = X[:, None]  # noqa: N806
    return X


def svc_fit(features: np.ndarray, labels: np.ndarray, C: float, **solver: Any) -> SvmModel:  # noqa: N803
    """Linear soft-margin SVC."""
    X = _as_matrix(features)  # noqa: N806
    fit = svc_dual(X @ X.T, np.asarray(labels, dtype=np.float64), C, **solver)
    return SvmModel(
        "svc", fit.coef, fit.b, fit.support, X, float(C), None,
        fit.solution.converged, fit.solution.iterations,
    )


def svr_fit(features: np.ndarray, targets: np.ndarray, C: float, epsilon: float, **solver: Any) -> SvmModel:  # noqa: N803
    """Linear epsilon-SVR."""
    X = _as_matrix(features)  # noqa: N806
    fit = svr_dual(X @ X.T, np.asarray(targets, dtype=np.float64), C, epsilon, **solver)
    return SvmModel(
        "svr", fit.coef, fit.b, fit.support, X, float(C), float(epsilon),
        fit.solution.converged, fit.solution.iterations,
    )


def predict(model: SvmModel, features: np.ndarray) -> np.ndarray:
    """SVR values, or SVC labels by sign with ties (f = 0) resolved to +1.

    A 1-D input is a column of samples for single-feature models, else one sample.
    """
    Z = np.asarray(features, dtype=np.float64)  # noqa: N806
    if Z.ndim == 1:
        Z = Z[:, None] if model.X.shape[1] == 1 else Z[None, :]  # noqa: N806
    f = model.decision_function(Z)
    if model.kind == "svc":
        return np.where(f >= 0, 1, -1)
    return f
