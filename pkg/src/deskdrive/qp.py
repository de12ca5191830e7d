"""Convex quadratic programs: problem container, splitting solver, KKT checks.

Problems have the form

    min  P' Q P + c' P   s.t.  A_eq P = b_eq,  A_ieq P <= b_ieq

with Q symmetric positive semidefinite. The solver is an operator-splitting
(ADMM) method with Ruiz diagonal scaling, adaptive penalty, warm starting and
an active-set polish step; a dense KKT factorization for equality-constrained
problems is kept separately as an independent oracle for tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

OPTIMAL = "optimal"
MAX_ITER = "max_iter"
INFEASIBLE = "infeasible"


@dataclass
class QPProblem:
    """Quadratic program over a coefficient vector P.

    c is the linear term; the pure paper form has c = 0, but soft anchor
    matching in the trajectory generator contributes one.
    """

    Q: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray
    A_ieq: np.ndarray
    b_ieq: np.ndarray
    c: np.ndarray | None = None

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        n = self.Q.shape[0]
        if self.Q.shape != (n, n):
            raise ValueError("Q must be square")
        if not np.allclose(self.Q, self.Q.T, atol=1e-10 * (1 + abs(self.Q).max())):
            raise ValueError("Q must be symmetric")
        self.A_eq = np.asarray(self.A_eq, dtype=float).reshape(-1, n)
        self.b_eq = np.asarray(self.b_eq, dtype=float).ravel()
        self.A_ieq = np.asarray(self.A_ieq, dtype=float).reshape(-1, n)
        self.b_ieq = np.asarray(self.b_ieq, dtype=float).ravel()
        if len(self.b_eq) != len(self.A_eq) or len(self.b_ieq) != len(self.A_ieq):
            raise ValueError("constraint right-hand sides do not match matrices")
        self.c = np.zeros(n) if self.c is None else np.asarray(self.c, dtype=float).ravel()

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    def objective(self, x: np.ndarray) -> float:
        return float(x @ self.Q @ x + self.c @ x)


@dataclass
class QPSolution:
    x: np.ndarray
    objective: float
    kkt_residual: float
    status: str
    iterations: int = 0
    y_eq: np.ndarray | None = None
    y_ieq: np.ndarray | None = None


def kkt_residual(p: QPProblem, x: np.ndarray, y_eq: np.ndarray, y_ieq: np.ndarray) -> float:
    """Worst violation among primal feasibility, stationarity, complementarity.

    Stationarity refers to the gradient 2 Q x + c + A_eq' y_eq + A_ieq' y_ieq.
    """
    terms = [0.0]
    if len(p.b_eq):
        terms.append(float(np.abs(p.A_eq @ x - p.b_eq).max()))
    grad = 2.0 * p.Q @ x + p.c
    if len(p.b_eq):
        grad = grad + p.A_eq.T @ y_eq
    if len(p.b_ieq):
        grad = grad + p.A_ieq.T @ y_ieq
        slack = p.A_ieq @ x - p.b_ieq
        terms.append(float(np.maximum(slack, 0.0).max()))
        terms.append(float(np.maximum(-y_ieq, 0.0).max()))
        terms.append(float(np.abs(y_ieq * slack).max()))
    terms.append(float(np.abs(grad).max()) if len(grad) else 0.0)
    return max(terms)


def solve_equality_kkt(Q: np.ndarray, c: np.ndarray, A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Direct dense solve of the equality-constrained optimality system.

    Returns the stacked (x, multipliers) solution of

        [2Q  A'] [x ]   [-c]
        [A   0 ] [nu] = [ b]

    Used as the small-instance oracle and by the smoother's fast path.
    """
    n, m = Q.shape[0], A.shape[0]
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = 2.0 * Q
    kkt[:n, n:] = A.T
    kkt[n:, :n] = A
    rhs = np.concatenate([-c, b])
    return np.linalg.solve(kkt, rhs)


def _ruiz_scaling(H: sp.spmatrix, iters: int = 8) -> np.ndarray:
    """Iterative inf-norm equilibration diagonal for a sparse symmetric matrix."""
    d = np.ones(H.shape[0])
    M = H.tocsc(copy=True)
    for _ in range(iters):
        norms = np.asarray(abs(M).max(axis=0).todense()).ravel()
        norms[norms < 1e-10] = 1.0
        s = 1.0 / np.sqrt(norms)
        D = sp.diags(s)
        M = D @ M @ D
        d *= s
    return d


class AdmmQpSolver:
    """Operator-splitting solver with a reusable sparse KKT factorization.

    Construction pays the scaling + factorization cost once; solve() may be
    called repeatedly with fresh right-hand sides (and warm starts) of the
    same structure, which is what the closed-loop smoother does every tick.
    """

    def __init__(self, p: QPProblem, sigma: float = 1e-6, rho: float = 0.1,
                 alpha: float = 1.6, eq_rho_scale: float = 1e3):
        self.p = p
        n = p.n
        self.m_eq, self.m_ieq = len(p.b_eq), len(p.b_ieq)
        m = self.m_eq + self.m_ieq
        A = np.vstack([p.A_eq, p.A_ieq]) if m else np.zeros((0, n))
        P_hat = sp.csc_matrix(2.0 * p.Q)
        A_sp = sp.csc_matrix(A)

        kkt_sym = sp.bmat(
            [[P_hat, A_sp.T], [A_sp, sp.csc_matrix((m, m))]], format="csc"
        )
        scale = _ruiz_scaling(kkt_sym)
        self.d = scale[:n]
        self.e = scale[n:]

        Dd = sp.diags(self.d)
        Ee = sp.diags(self.e) if m else sp.csc_matrix((0, 0))
        self.P_s = (Dd @ P_hat @ Dd).tocsr()
        self.A_s = (Ee @ A_sp @ Dd).tocsr() if m else sp.csr_matrix((0, n))
        self.sigma, self.alpha = sigma, alpha
        self.rho_vec = np.full(m, rho)
        self.rho_vec[: self.m_eq] *= eq_rho_scale
        self._factorize()

    def _factorize(self):
        n, m = self.P_s.shape[0], len(self.rho_vec)
        blocks = [[self.P_s + self.sigma * sp.eye(n), self.A_s.T]]
        if m:
            blocks.append([self.A_s, -sp.diags(1.0 / self.rho_vec)])
            kkt = sp.bmat(blocks, format="csc")
        else:
            kkt = (self.P_s + self.sigma * sp.eye(n)).tocsc()
        self._lu = spla.splu(kkt)

    def solve(self, tol: float = 1e-6, max_iter: int = 10000,
              b_eq: np.ndarray | None = None, b_ieq: np.ndarray | None = None,
              c: np.ndarray | None = None, x0: np.ndarray | None = None) -> QPSolution:
        p = self.p
        n = p.n
        m = self.m_eq + self.m_ieq
        b_eq = p.b_eq if b_eq is None else np.asarray(b_eq, dtype=float)
        b_ieq = p.b_ieq if b_ieq is None else np.asarray(b_ieq, dtype=float)
        c = p.c if c is None else np.asarray(c, dtype=float)

        q_s = c * self.d
        e_eq = self.e[: self.m_eq]
        lo = np.concatenate([b_eq * e_eq, np.full(self.m_ieq, -np.inf)])
        hi = np.concatenate([b_eq * e_eq, b_ieq * self.e[self.m_eq:]])

        if x0 is not None:
            x = np.asarray(x0, dtype=float) / self.d
            z = np.clip(self.A_s @ x, lo, hi)
        else:
            x = np.zeros(n)
            z = np.zeros(m)
        y = np.zeros(m)
        x_best, y_best, best_res = x.copy(), y.copy(), np.inf
        y_prev = None
        status, iters = MAX_ITER, max_iter
        for it in range(1, max_iter + 1):
            rhs = np.concatenate([self.sigma * x - q_s, z - y / self.rho_vec])
            sol = self._lu.solve(rhs)
            x_t, nu = sol[:n], sol[n:]
            z_t = z + (nu - y) / self.rho_vec
            x = self.alpha * x_t + (1 - self.alpha) * x
            v = self.alpha * z_t + (1 - self.alpha) * z
            z_new = np.clip(v + y / self.rho_vec, lo, hi)
            y = y + self.rho_vec * (v - z_new)
            z = z_new

            if it % 25 == 0 or it == max_iter:
                if not (np.isfinite(x).all() and np.isfinite(y).all()):
                    status, iters = MAX_ITER, it  # diverged; fall back to best iterate
                    x, y = x_best, y_best
                    break
                r_prim, r_dual = self._residuals(x, z, y, q_s)
                if max(r_prim, r_dual) < best_res:
                    best_res = max(r_prim, r_dual)
                    x_best, y_best = x.copy(), y.copy()
                if r_prim <= tol and r_dual <= tol:
                    status, iters = OPTIMAL, it
                    break
                if self._primal_infeasible(None if y_prev is None else y - y_prev, lo, hi, tol):
                    return QPSolution(self._unscale_x(x), np.nan, np.inf, INFEASIBLE, it)
                y_prev = y.copy()
                if it % 100 == 0:
                    self._adapt_rho(x, z, y, q_s, r_prim, r_dual)
        x_u = self._unscale_x(x)
        y_u = y * self.e
        y_eq, y_ieq = y_u[: self.m_eq], np.maximum(y_u[self.m_eq:], 0.0)

        x_u, y_eq, y_ieq = self._polish(x_u, y_eq, y_ieq, b_eq, b_ieq, c, tol)
        res = kkt_residual(
            QPProblem(p.Q, p.A_eq, b_eq, p.A_ieq, b_ieq, c), x_u, y_eq, y_ieq
        )
        if res <= tol:
            status = OPTIMAL
        elif status == OPTIMAL:
            status = MAX_ITER
        obj = float(x_u @ p.Q @ x_u + c @ x_u)
        return QPSolution(x_u, obj, res, status, iters, y_eq, y_ieq)

    def _unscale_x(self, x: np.ndarray) -> np.ndarray:
        return x * self.d

    def _adapt_rho(self, x, z, y, q_s, r_prim, r_dual):
        """Rebalance the penalty from the residual ratio (OSQP rule)."""
        if not len(z):
            return
        denom_p = max(
            float(np.abs(self.A_s @ x).max(initial=0.0)),
            float(np.abs(z).max(initial=0.0)),
            1e-10,
        )
        denom_d = max(
            float(np.abs(self.P_s @ x).max(initial=0.0)),
            float(np.abs(self.A_s.T @ y).max(initial=0.0)),
            float(np.abs(q_s).max(initial=0.0)),
            1e-10,
        )
        ratio = math.sqrt((r_prim / denom_p) / max(r_dual / denom_d, 1e-16))
        if 0.2 < ratio < 5.0:
            return
        ratio = float(np.clip(ratio, 1e-3, 1e3))
        self.rho_vec = np.clip(self.rho_vec * ratio, 1e-6, 1e6)
        self._factorize()

    def _residuals(self, x, z, y, q_s):
        if len(z):
            ax = self.A_s @ x
            r_prim = float(np.abs((ax - z) / np.where(self.e == 0, 1.0, self.e)).max())
        else:
            r_prim = 0.0
        dual = self.P_s @ x + q_s + self.A_s.T @ y
        r_dual = float(np.abs(dual / self.d).max())
        return r_prim, r_dual

    def _primal_infeasible(self, dy, lo, hi, tol) -> bool:
        """OSQP-style certificate on the dual increment."""
        if dy is None:
            return False
        nrm = np.abs(dy).max() if len(dy) else 0.0
        if nrm <= tol or not np.isfinite(nrm):
            return False
        v = dy / nrm
        pos, neg = v > tol, v < -tol
        if np.any(pos & ~np.isfinite(hi)) or np.any(neg & ~np.isfinite(lo)):
            return False
        support = float(np.sum(hi[pos] * v[pos]) + np.sum(lo[neg] * v[neg]))
        if support > -tol:
            return False
        return bool(np.abs(self.A_s.T @ v / self.d).max() <= tol)

    def _polish(self, x, y_eq, y_ieq, b_eq, b_ieq, c, tol):
        """Re-solve on the detected active set for a high-accuracy solution."""
        p = self.p
        active = np.zeros(self.m_ieq, dtype=bool)
        if self.m_ieq:
            slack = p.A_ieq @ x - b_ieq
            active = (slack > -max(10 * tol, 1e-8) * (1 + np.abs(b_ieq))) | (y_ieq > tol)
        A_act = np.vstack([p.A_eq, p.A_ieq[active]])
        b_act = np.concatenate([b_eq, b_ieq[active]])
        n, ma = p.n, len(b_act)
        kkt = np.zeros((n + ma, n + ma))
        kkt[:n, :n] = 2 * p.Q + 1e-12 * np.eye(n)
        kkt[:n, n:] = A_act.T
        kkt[n:, :n] = A_act
        rhs = np.concatenate([-c, b_act])
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
        x_new, nu = sol[:n], sol[n:]
        y_ieq_new = np.zeros(self.m_ieq)
        if active.any():
            y_ieq_new[active] = np.maximum(nu[self.m_eq:], 0.0)
        prob = QPProblem(p.Q, p.A_eq, b_eq, p.A_ieq, b_ieq, c)
        if kkt_residual(prob, x_new, nu[: self.m_eq], y_ieq_new) < kkt_residual(
            prob, x, y_eq, y_ieq
        ):
            return x_new, nu[: self.m_eq], y_ieq_new
        return x, y_eq, y_ieq


def solve_qp(p: QPProblem, tol: float = 1e-6, max_iter: int = 10000,
             x0: np.ndarray | None = None) -> QPSolution:
    """One-shot convenience wrapper around :class:`AdmmQpSolver`."""
    return AdmmQpSolver(p).solve(tol=tol, max_iter=max_iter, x0=x0)
