"""Tests for the box-constrained QP solver and the SVM duals built on it."""

import itertools

import numpy as np
import pytest
from sklearn.svm import SVC, SVR

from avalanche_bci.exceptions import InfeasibleProblemError, SingleClassError
from avalanche_bci.qpsolve import (
    QpProblem,
    SvmModel,
    kkt_residual,
    predict,
    solve,
    svc_dual,
    svc_fit,
    svr_fit,
)

TIGHT = {"tolerance": 1e-10}


def _enumerate_active_sets(problem):
    """Best objective over all (lower, upper, free) assignments that satisfy the KKT system."""
    n = problem.n
    best = np.inf
    for status in itertools.product((0, 1, 2), repeat=n):
        x = np.zeros(n)
        free = np.array([s == 2 for s in status])
        for i, s in enumerate(status):
            if s == 0:
                x[i] = problem.lower[i]
            elif s == 1:
                x[i] = problem.upper[i]
        bound = ~free
        if free.any():
            Q_ff = problem.Q[np.ix_(free, free)]
            rhs_f = -problem.c[free] - problem.Q[np.ix_(free, bound)] @ x[bound]
            if problem.a is None:
                system, target = Q_ff, rhs_f
            else:
                a_f = problem.a[free][:, None]
                system = np.block([[Q_ff, a_f], [a_f.T, np.zeros((1, 1))]])
                target = np.concatenate([rhs_f, [problem.rhs - problem.a[bound] @ x[bound]]])
            solution, *_ = np.linalg.lstsq(system, target, rcond=None)
            if not np.allclose(system @ solution, target, atol=1e-9):
                continue
            x[free] = solution[: int(free.sum())]
        elif problem.a is not None and abs(problem.a @ x - problem.rhs) > 1e-9:
            continue
        if np.all(x >= problem.lower - 1e-9) and np.all(x <= problem.upper + 1e-9):
            best = min(best, problem.objective(x))
    return best


def test_scalar_problem_clamps_to_bound():
    """Test that the unconstrained optimum 4 is clamped to the upper bound 2."""
    solution = solve(QpProblem(Q=[[1.0]], c=[-4.0], lower=0.0, upper=2.0))

    assert solution.x == pytest.approx([2.0])
    assert solution.converged


def test_symmetric_problem_with_equality():
    """Test x = (0.5, 0.5) for the identity with x1 + x2 = 1."""
    problem = QpProblem(Q=np.eye(2), c=np.zeros(2), lower=0.0, upper=1.0, a=np.ones(2), rhs=1.0)

    solution = solve(problem)

    assert solution.x == pytest.approx([0.5, 0.5])
    assert kkt_residual(problem, solution.x) < problem.tolerance


def test_random_problems_match_active_set_enumeration():
    """Test objectives against brute-force active-set enumeration on 4 variables."""
    rng = np.random.default_rng(0)
    for trial in range(50):
        B = rng.normal(size=(4, 4))
        Q = B @ B.T + 0.1 * np.eye(4)
        lower = -rng.uniform(0.0, 1.0, size=4)
        upper = rng.uniform(0.5, 2.0, size=4)
        a = None
        rhs = 0.0
        if trial % 2 == 0:
            a = rng.choice([-1.0, 1.0], size=4) * rng.uniform(0.5, 1.5, size=4)
            rhs = float(a @ rng.uniform(lower, upper))
        problem = QpProblem(
            Q=Q, c=rng.normal(size=4) * 3, lower=lower, upper=upper, a=a, rhs=rhs, **TIGHT
        )

        solution = solve(problem)

        assert solution.converged
        assert solution.objective == pytest.approx(_enumerate_active_sets(problem), abs=1e-6)
        assert np.all(solution.x >= lower) and np.all(solution.x <= upper)
        if a is not None:
            assert a @ solution.x == pytest.approx(rhs, abs=1e-9)


def test_infeasible_equality():
    """Test that an unreachable right-hand side is rejected at construction."""
    with pytest.raises(InfeasibleProblemError, match="unreachable"):
        QpProblem(Q=np.eye(2), c=np.zeros(2), lower=0.0, upper=1.0, a=np.ones(2), rhs=3.0)


def test_malformed_problems():
    """Test asymmetric Q and crossed bounds."""
    with pytest.raises(ValueError, match="not symmetric"):
        QpProblem(Q=[[1.0, 2.0], [0.0, 1.0]], c=np.zeros(2), lower=0.0, upper=1.0)
    with pytest.raises(ValueError, match="lower bound exceeds"):
        QpProblem(Q=np.eye(2), c=np.zeros(2), lower=1.0, upper=0.0)


def test_iteration_cap_returns_last_iterate():
    """Test that hitting max_iterations reports non-convergence."""
    rng = np.random.default_rng(1)
    B = rng.normal(size=(6, 6))
    problem = QpProblem(
        Q=B @ B.T, c=rng.normal(size=6), lower=-1.0, upper=1.0, max_iterations=1, tolerance=1e-12
    )

    solution = solve(problem)

    assert not solution.converged
    assert solution.iterations == 1


def _svc_kernel(rng, n=20):
    X = rng.normal(size=(n, 3))
    y = np.where(X[:, 0] + 0.5 * rng.normal(size=n) > 0, 1.0, -1.0)
    return X @ X.T, y


def test_warm_start_at_the_optimum_takes_no_iterations():
    """Test that restarting from a converged dual stops immediately."""
    K, y = _svc_kernel(np.random.default_rng(3))
    cold = svc_dual(K, y, 1.0, **TIGHT)

    warm = svc_dual(K, y, 1.0, x0=cold.dual, **TIGHT)

    assert cold.solution.converged
    assert warm.solution.iterations == 0
    assert warm.dual == pytest.approx(cold.dual, abs=1e-12)


def test_warm_start_outside_the_feasible_set_is_repaired():
    """Test that an infeasible start is clipped and balanced before solving."""
    rng = np.random.default_rng(4)
    K, y = _svc_kernel(rng)
    cold = svc_dual(K, y, 1.0, **TIGHT)

    warm = svc_dual(K, y, 1.0, x0=rng.normal(scale=5.0, size=y.size), **TIGHT)

    assert warm.solution.converged
    assert warm.objective == pytest.approx(cold.objective, abs=1e-8)
    assert np.all((warm.dual >= -1e-12) & (warm.dual <= 1.0 + 1e-12))
    assert y @ warm.dual == pytest.approx(0.0, abs=1e-10)


def test_warm_start_on_a_nearby_kernel_reaches_the_cold_solution():
    """Test that a warm start only changes the path, not the optimum."""
    rng = np.random.default_rng(5)
    K, y = _svc_kernel(rng)
    E = rng.normal(scale=0.05, size=K.shape)
    nearby = K + E @ E.T
    previous = svc_dual(K, y, 1.0, **TIGHT)

    cold = svc_dual(nearby, y, 1.0, **TIGHT)
    warm = svc_dual(nearby, y, 1.0, x0=previous.dual, **TIGHT)

    assert warm.solution.converged
    assert warm.objective == pytest.approx(cold.objective, abs=1e-8)


def test_warm_start_length_mismatch():
    """Test that a warm start of the wrong length is rejected."""
    problem = QpProblem(Q=np.eye(2), c=np.zeros(2), lower=0.0, upper=1.0)

    with pytest.raises(ValueError, match="x0 must have length 2"):
        solve(problem, np.zeros(3))


def test_svc_max_margin_two_points():
    """Test that x = -1 and x = 1 with large C put the boundary at 0 with margin 1."""
    model = svc_fit(np.array([[-1.0], [1.0]]), np.array([-1.0, 1.0]), C=100.0, **TIGHT)

    assert model.weights == pytest.approx([1.0])
    assert model.b == pytest.approx(0.0, abs=1e-9)
    assert model.decision_function(np.array([[1.0]])) == pytest.approx([1.0])


def test_svc_single_class():
    """Test that one-class labels raise with a threshold instruction."""
    with pytest.raises(SingleClassError, match="chance threshold"):
        svc_fit(np.array([[0.0], [1.0], [2.0]]), np.array([1.0, 1.0, 1.0]), C=1.0)


def test_svc_weights_match_libsvm():
    """Test the primal weights against scikit-learn's linear SVC."""
    rng = np.random.default_rng(2)
    X = rng.normal(size=(30, 3))
    y = np.where(X @ np.array([1.0, -0.5, 0.2]) + 0.3 * rng.normal(size=30) > 0, 1.0, -1.0)

    model = svc_fit(X, y, C=1.0, **TIGHT)
    reference = SVC(kernel="linear", C=1.0, tol=1e-10).fit(X, y)

    assert model.converged
    assert model.weights == pytest.approx(reference.coef_[0], abs=1e-4)


def test_svr_constant_targets():
    """Test that constant targets give a constant predictor."""
    X = np.array([[0.0], [1.0], [2.0], [5.0]])

    for epsilon in (0.0, 0.5):
        model = svr_fit(X, np.full(4, 3.0), C=10.0, epsilon=epsilon)

        assert predict(model, np.array([[-2.0], [7.0]])) == pytest.approx([3.0, 3.0])


def test_svr_recovers_collinear_slope():
    """Test y = 2x with epsilon = 0 and large C gives slope 2."""
    x = np.linspace(-1.0, 1.0, 9)

    model = svr_fit(x, 2.0 * x, C=100.0, epsilon=0.0, **TIGHT)

    assert model.weights == pytest.approx([2.0], abs=1e-4)
    assert model.b == pytest.approx(0.0, abs=1e-4)


def test_svr_weights_match_libsvm():
    """Test the primal weights against scikit-learn's linear SVR."""
    rng = np.random.default_rng(3)
    X = rng.normal(size=(25, 2))
    t = X @ np.array([0.7, -1.2]) + 0.5 + 0.2 * rng.normal(size=25)

    model = svr_fit(X, t, C=2.0, epsilon=0.1, **TIGHT)
    reference = SVR(kernel="linear", C=2.0, epsilon=0.1, tol=1e-10).fit(X, t)

    assert model.weights == pytest.approx(reference.coef_[0], abs=1e-4)


def test_predict_tie_resolves_to_positive():
    """Test that f = 0 maps to label +1."""
    model = SvmModel(
        kind="svc",
        coef=np.array([1.0, -1.0]),
        b=0.0,
        support=np.array([0, 1]),
        X=np.array([[1.0], [-1.0]]),
        C=1.0,
        epsilon=None,
        converged=True,
        iterations=0,
    )

    assert predict(model, np.array([0.0])).tolist() == [1]
    assert predict(model, np.array([-0.5, 0.5])).tolist() == [-1, 1]


def test_decision_function_feature_mismatch():
    """Test that a wrong feature count is rejected."""
    model = svc_fit(np.array([[-1.0, 0.0], [1.0, 0.0]]), np.array([-1.0, 1.0]), C=1.0)

    with pytest.raises(ValueError, match="expected 2 features"):
        model.decision_function(np.zeros((1, 3)))
