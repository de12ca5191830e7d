import numpy as np
import pytest

from deskdrive.qp import (
    INFEASIBLE,
    MAX_ITER,
    OPTIMAL,
    AdmmQpSolver,
    QPProblem,
    kkt_residual,
    solve_equality_kkt,
    solve_qp,
)

TOL = 1e-6


def _random_eq_qp(seed: int) -> QPProblem:
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    m = int(rng.integers(1, n))
    M = rng.normal(size=(n, n))
    Q = M.T @ M + 0.05 * np.eye(n)
    A = rng.normal(size=(m, n))
    b = rng.normal(size=m)
    c = rng.normal(size=n)
    return QPProblem(Q, A, b, np.zeros((0, n)), [], c)


def test_textbook_kkt():
    # min x^2 s.t. x >= 1
    p = QPProblem(np.array([[1.0]]), np.zeros((0, 1)), [], np.array([[-1.0]]), [-1.0])
    s = solve_qp(p, tol=TOL)
    assert s.status == OPTIMAL
    assert s.x[0] == pytest.approx(1.0, abs=1e-8)
    assert s.objective == pytest.approx(1.0, abs=1e-8)


def test_unconstrained_pd():
    Q = np.array([[2.0, 0.3], [0.3, 1.0]])
    s = solve_qp(QPProblem(Q, np.zeros((0, 2)), [], np.zeros((0, 2)), []))
    assert s.status == OPTIMAL
    assert np.abs(s.x).max() < 1e-8


def test_equality_constrained_matches_dense_oracle():
    for seed in range(100):
        p = _random_eq_qp(seed)
        s = solve_qp(p, tol=TOL)
        oracle = solve_equality_kkt(p.Q, p.c, p.A_eq, p.b_eq)[: p.n]
        assert s.status == OPTIMAL, f"seed {seed}: {s.status}"
        assert np.abs(s.x - oracle).max() < 1e-6, f"seed {seed}"
        assert s.kkt_residual <= TOL


def test_active_inequality():
    # min x^2+y^2 s.t. x+y=1, x-y <= -0.8  ->  (0.1, 0.9)
    p = QPProblem(np.eye(2), np.array([[1.0, 1.0]]), [1.0], np.array([[1.0, -1.0]]), [-0.8])
    s = solve_qp(p, tol=TOL)
    assert s.status == OPTIMAL
    assert np.allclose(s.x, [0.1, 0.9], atol=1e-7)


def test_inactive_inequality_is_free():
    p = QPProblem(np.eye(2), np.array([[1.0, 1.0]]), [1.0], np.array([[1.0, 0.0]]), [5.0])
    s = solve_qp(p, tol=TOL)
    assert s.status == OPTIMAL
    assert np.allclose(s.x, [0.5, 0.5], atol=1e-7)
    assert s.y_ieq[0] == pytest.approx(0.0, abs=1e-7)


def test_kkt_residual_certifies_optimal_solutions():
    rng = np.random.default_rng(123)
    for seed in range(30):
        p = _random_eq_qp(seed + 1000)
        s = solve_qp(p, tol=TOL)
        assert s.status == OPTIMAL
        # independent recomputation of every KKT condition
        assert kkt_residual(p, s.x, s.y_eq, s.y_ieq) <= TOL
        # perturbation must break the certificate
        bad = s.x + rng.normal(scale=1e-2, size=p.n)
        assert kkt_residual(p, bad, s.y_eq, s.y_ieq) > TOL


def test_infeasible_equalities():
    # x = 0 and x = 1 cannot both hold
    p = QPProblem(np.array([[1.0]]), np.array([[1.0], [1.0]]), [0.0, 1.0],
                  np.zeros((0, 1)), [])
    s = solve_qp(p, tol=TOL, max_iter=3000)
    assert s.status in (INFEASIBLE, MAX_ITER)
    assert s.status != OPTIMAL


def test_infeasible_box():
    # x >= 1 and x <= 0
    p = QPProblem(np.array([[1.0]]), np.zeros((0, 1)), [],
                  np.array([[-1.0], [1.0]]), [-1.0, 0.0])
    s = solve_qp(p, tol=TOL, max_iter=3000)
    assert s.status in (INFEASIBLE, MAX_ITER)


def test_warm_start_reaches_same_solution():
    p = _random_eq_qp(5)
    s_cold = solve_qp(p, tol=TOL)
    solver = AdmmQpSolver(p)
    s_warm = solver.solve(tol=TOL, x0=s_cold.x)
    assert s_warm.status == OPTIMAL
    assert np.abs(s_warm.x - s_cold.x).max() < 1e-6


def test_rhs_reuse():
    # the same factorization serves multiple right-hand sides
    p = _random_eq_qp(6)
    solver = AdmmQpSolver(p)
    s1 = solver.solve(tol=TOL)
    b2 = p.b_eq + 0.5
    s2 = solver.solve(tol=TOL, b_eq=b2)
    oracle2 = solve_equality_kkt(p.Q, p.c, p.A_eq, b2)[: p.n]
    assert s1.status == OPTIMAL and s2.status == OPTIMAL
    assert np.abs(s2.x - oracle2).max() < 1e-6


def test_problem_validation():
    with pytest.raises(ValueError):
        QPProblem(np.array([[1.0, 0.5], [0.0, 1.0]]), np.zeros((0, 2)), [], np.zeros((0, 2)), [])
    with pytest.raises(ValueError):
        QPProblem(np.eye(2), np.array([[1.0, 0.0]]), [1.0, 2.0], np.zeros((0, 2)), [])
