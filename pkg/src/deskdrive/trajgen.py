"""Minimum-jerk trajectory generator.

Sparse anchor points from the policy are turned into a dense, smooth,
dynamics-respecting trajectory by solving a convex QP over piecewise-quintic
coefficients: the objective integrates squared jerk over the horizon, the
equalities pin the initial state, C2 continuity and the first/last anchors,
and collocated inequalities bound acceleration (an octagonal outer
approximation of the disc) and a linearized lateral-acceleration proxy for
curvature. Interior anchors are matched softly so noisy exploration outputs
cannot make the problem infeasible; if the solver still fails, a C1 cubic
spline through the anchors is returned and flagged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .action import ActionConfig, Trajectory
from .errors import BadAnchors
from .qp import (
    OPTIMAL,
    AdmmQpSolver,
    QPProblem,
    QPSolution,
    kkt_residual,
    solve_equality_kkt,
)

DEGREE = 5
NCOEF = DEGREE + 1
# Reference speed below which the curvature proxy row is skipped (m/s).
CURV_SPEED_FLOOR = 1.0


def basis_row(tau: float, h: float, deriv: int) -> np.ndarray:
    """Row r with r @ coeffs = d^deriv/dt^deriv of the quintic at local time tau.

    Coefficients multiply powers of the normalized time u = tau / h, which
    keeps all six comparable in magnitude and the QP well conditioned.
    """
    u = tau / h
    row = np.zeros(NCOEF)
    for i in range(deriv, NCOEF):
        f = 1.0
        for j in range(i, i - deriv, -1):
            f *= j
        row[i] = f * u ** (i - deriv) / h**deriv
    return row


def jerk_block(h: float) -> np.ndarray:
    """Gram matrix of integral of (third derivative)^2 over one segment of length h."""
    g = np.zeros((NCOEF, NCOEF))
    g[3, 3] = 36.0
    g[3, 4] = g[4, 3] = 72.0
    g[3, 5] = g[5, 3] = 120.0
    g[4, 4] = 192.0
    g[4, 5] = g[5, 4] = 360.0
    g[5, 5] = 720.0
    return g / h**5


def jerk_matrix(knots: np.ndarray, dims: int = 2) -> np.ndarray:
    """Block-diagonal jerk-energy matrix over all segment/dimension coefficients."""
    k = len(knots) - 1
    n = dims * k * NCOEF
    Q = np.zeros((n, n))
    for d in range(dims):
        for i in range(k):
            a = d * k * NCOEF + i * NCOEF
            Q[a : a + NCOEF, a : a + NCOEF] = jerk_block(float(knots[i + 1] - knots[i]))
    return Q


@dataclass
class PiecewisePoly:
    """Two-dimensional piecewise quintic over strictly increasing knots."""

    knots: np.ndarray
    coeffs: np.ndarray  # (segments, NCOEF, 2)

    def __post_init__(self):
        self.knots = np.asarray(self.knots, dtype=float)
        if np.any(np.diff(self.knots) <= 0):
            raise ValueError("knot times must be strictly increasing")
        self.coeffs = np.asarray(self.coeffs, dtype=float)

    def eval(self, t: float, deriv: int = 0) -> np.ndarray:
        t = min(max(float(t), self.knots[0]), self.knots[-1])
        i = int(np.searchsorted(self.knots, t, side="right")) - 1
        i = min(max(i, 0), len(self.knots) - 2)
        h = float(self.knots[i + 1] - self.knots[i])
        row = basis_row(t - self.knots[i], h, deriv)
        return row @ self.coeffs[i]


def _var_index(dim: int, seg: int, k: int) -> int:
    return dim * k * NCOEF + seg * NCOEF


@dataclass
class _Structure:
    """Anchor-independent pieces of the QP, reusable across control ticks."""

    knots: np.ndarray
    A_eq: np.ndarray
    Q: np.ndarray  # jerk + soft-anchor quadratic
    soft_sel: np.ndarray  # (soft anchors * dims, nvars) position selector
    soft_ids: list[int]  # anchor indices matched softly
    soft_w: np.ndarray  # per-row soft weights
    A_acc: np.ndarray
    eq_rows: list[str]
    kkt_lu: object
    w_anchor: float


_STRUCTURE_CACHE: dict[tuple, _Structure] = {}

_OCTAGON = [
    (math.cos(m * math.pi / 4.0), math.sin(m * math.pi / 4.0)) for m in range(8)
]


def _build_structure(k: int, dt: float, w_anchor: float, end_mode: str,
                     colloc: int) -> _Structure:
    knots = np.arange(k + 1) * dt
    nvars = 2 * k * NCOEF
    Q = jerk_matrix(knots)

    rows: list[np.ndarray] = []
    labels: list[str] = []

    def add(row, label):
        rows.append(row)
        labels.append(label)

    def seg_row(dim, seg, tau, deriv):
        r = np.zeros(nvars)
        a = _var_index(dim, seg, k)
        r[a : a + NCOEF] = basis_row(tau, dt, deriv)
        return r

    for dim in range(2):
        for deriv in range(3):
            add(seg_row(dim, 0, 0.0, deriv), f"init_d{deriv}_dim{dim}")
    for seg in range(k - 1):
        for dim in range(2):
            for deriv in range(3):
                r = seg_row(dim, seg, dt, deriv) - seg_row(dim, seg + 1, 0.0, deriv)
                add(r, f"cont_seg{seg}_d{deriv}_dim{dim}")
    # only the last anchor is a hard constraint; the first is matched softly
    # at 10x weight (hard-pinning it against the fixed initial acceleration
    # is frequently infeasible over one short segment)
    hard_ids = [k - 1]
    for j in hard_ids:
        for dim in range(2):
            add(seg_row(dim, j, dt, 0), f"anchor{j}_dim{dim}")
    if end_mode == "rest":
        for dim in range(2):
            for deriv in (1, 2):
                add(seg_row(dim, k - 1, dt, deriv), f"end_d{deriv}_dim{dim}")
    A_eq = np.array(rows)

    soft_ids = [j for j in range(k) if j not in hard_ids]
    sel_rows, sel_w = [], []
    for j in soft_ids:
        for dim in range(2):
            sel_rows.append(seg_row(dim, j, dt, 0))
            sel_w.append(10.0 * w_anchor if j == 0 else w_anchor)
    soft_sel = np.array(sel_rows) if sel_rows else np.zeros((0, nvars))
    soft_w = np.array(sel_w)
    if len(soft_sel):
        Q = Q + (soft_sel * soft_w[:, None]).T @ soft_sel

    # tau = 0 rows are redundant: continuity makes them equal the previous
    # segment's tau = h rows, and the very first is pinned by the initial state
    acc_rows = []
    taus = np.linspace(0.0, dt, colloc + 1)[1:]
    for seg in range(k):
        for tau in taus:
            rx = seg_row(0, seg, float(tau), 2)
            ry = seg_row(1, seg, float(tau), 2)
            for cx, cy in _OCTAGON:
                acc_rows.append(cx * rx + cy * ry)
    A_acc = np.array(acc_rows)

    n_eq = len(A_eq)
    kkt = np.zeros((nvars + n_eq, nvars + n_eq))
    kkt[:nvars, :nvars] = 2.0 * Q + 1e-9 * np.eye(nvars)
    kkt[:nvars, nvars:] = A_eq.T
    kkt[nvars:, :nvars] = A_eq
    lu = scipy.linalg.lu_factor(kkt)
    return _Structure(knots, A_eq, Q, soft_sel, soft_ids, soft_w, A_acc, labels, lu, w_anchor)


def _structure(k, dt, w_anchor, end_mode, colloc) -> _Structure:
    key = (k, round(dt, 12), round(w_anchor, 12), end_mode, colloc)
    if key not in _STRUCTURE_CACHE:
        _STRUCTURE_CACHE[key] = _build_structure(k, dt, w_anchor, end_mode, colloc)
    return _STRUCTURE_CACHE[key]


def _initial_motion(state) -> tuple[np.ndarray, np.ndarray]:
    """Planning-frame initial velocity and acceleration from the ego state."""
    v = np.array([state.speed, 0.0])
    a = np.array([state.accel, state.speed**2 * state.kappa])
    return v, a


def _rhs_and_linear(st: _Structure, anchors_xy: np.ndarray, state, end_mode: str):
    k = len(st.knots) - 1
    b = []
    v0, a0 = _initial_motion(state)
    for dim in range(2):
        b += [0.0, v0[dim], a0[dim]]
    b += [0.0] * (6 * (k - 1))
    b += [anchors_xy[k - 1, 0], anchors_xy[k - 1, 1]]
    if end_mode == "rest":
        b += [0.0, 0.0, 0.0, 0.0]
    b_eq = np.array(b)
    c = np.zeros(st.A_eq.shape[1])
    if len(st.soft_sel):
        target = np.array([anchors_xy[j, d] for j in st.soft_ids for d in range(2)])
        c = -2.0 * st.soft_sel.T @ (st.soft_w * target)
    return b_eq, c


def _curvature_rows(st: _Structure, anchors_xy: np.ndarray, limits, colloc: int):
    """Linearized lateral-acceleration rows from the anchor reference motion."""
    k = len(st.knots) - 1
    dt = float(st.knots[1] - st.knots[0])
    nvars = 2 * k * NCOEF
    rows, bs = [], []
    taus = np.linspace(0.0, dt, colloc + 1)[1:]
    prev = np.zeros(2)
    for seg in range(k):
        d = anchors_xy[seg] - prev
        prev = anchors_xy[seg]
        v_ref = float(np.hypot(d[0], d[1])) / dt
        if v_ref < CURV_SPEED_FLOOR:
            continue
        ct, s_t = d[0] / (v_ref * dt), d[1] / (v_ref * dt)
        bound = limits.kappa_max * v_ref**2
        for tau in taus:
            rx = np.zeros(nvars)
            ry = np.zeros(nvars)
            ax = _var_index(0, seg, k)
            ay = _var_index(1, seg, k)
            rx[ax : ax + NCOEF] = basis_row(float(tau), dt, 2)
            ry[ay : ay + NCOEF] = basis_row(float(tau), dt, 2)
            lat = -s_t * rx + ct * ry
            rows.append(lat)
            bs.append(bound)
            rows.append(-lat)
            bs.append(bound)
    if not rows:
        return np.zeros((0, nvars)), np.zeros(0)
    return np.array(rows), np.array(bs)


def build_qp(anchors: Trajectory, cfg: ActionConfig, limits, state,
             w_anchor: float = 10.0, colloc: int = 3,
             end_mode: str = "free") -> QPProblem:
    """Assemble the full minimum-jerk QP for a set of anchor points.

    Anchors are the ego-frame action points at the cfg grid; end_mode 'rest'
    additionally pins zero terminal velocity and acceleration.
    """
    xy = anchors.xy
    k = len(xy)
    if k < 2:
        raise BadAnchors("need at least 2 anchor points")
    st = _structure(k, anchors.dt, w_anchor, end_mode, colloc)
    b_eq, c = _rhs_and_linear(st, xy, state, end_mode)
    A_curv, b_curv = _curvature_rows(st, xy, limits, colloc)
    A_ieq = np.vstack([st.A_acc, A_curv])
    b_ieq = np.concatenate([np.full(len(st.A_acc), limits.a_max), b_curv])
    return QPProblem(st.Q, st.A_eq, b_eq, A_ieq, b_ieq, c)


def _coeffs_from_vector(x: np.ndarray, k: int) -> np.ndarray:
    coeffs = np.zeros((k, NCOEF, 2))
    for dim in range(2):
        for seg in range(k):
            a = _var_index(dim, seg, k)
            coeffs[seg, :, dim] = x[a : a + NCOEF]
    return coeffs


def _fallback_spline(anchors_xy: np.ndarray, state, dt: float, dense_t: np.ndarray):
    """C1 cubic Hermite through the anchors with centered-difference slopes."""
    from scipy.interpolate import CubicHermiteSpline

    times = np.concatenate([[0.0], np.arange(1, len(anchors_xy) + 1) * dt])
    pts = np.vstack([[0.0, 0.0], anchors_xy])
    v0, _ = _initial_motion(state)
    slopes = np.gradient(pts, times, axis=0)
    slopes[0] = v0
    spline = CubicHermiteSpline(times, pts, slopes)
    pos = spline(dense_t)
    vel = spline.derivative()(dense_t)
    return pos, vel


def _poses_from_samples(pos: np.ndarray, vel: np.ndarray) -> np.ndarray:
    out = np.zeros((len(pos), 3))
    theta = 0.0
    for i in range(len(pos)):
        if np.hypot(vel[i, 0], vel[i, 1]) > 1e-6:
            theta = math.atan2(vel[i, 1], vel[i, 0])
        out[i] = (pos[i, 0], pos[i, 1], theta)
    return out


def _active_set_solve(problem: QPProblem, x_eq: np.ndarray, nu_eq: np.ndarray,
                      tol: float, max_rounds: int = 6) -> QPSolution | None:
    """Cheap primal active-set refinement seeded by the equality solution.

    Violated inequality rows are pinned and the augmented KKT re-solved;
    succeeds when the final multipliers are nonnegative and nothing else is
    violated. Returns None if it cannot certify, leaving the splitting
    solver to decide.
    """
    A_ieq, b_ieq = problem.A_ieq, problem.b_ieq
    x, nu = x_eq, nu_eq
    active: set[int] = set()
    n_eq = len(problem.b_eq)
    for _ in range(max_rounds):
        viol = A_ieq @ x - b_ieq
        worst = np.where(viol > tol)[0]
        if len(worst) == 0:
            y_ieq = np.zeros(len(b_ieq))
            act = sorted(active)
            if act:
                mult = nu[n_eq:]
                if np.any(mult < -tol):
                    return None  # wrong active set; not an optimum
                y_ieq[act] = np.maximum(mult, 0.0)
            res = kkt_residual(problem, x, nu[:n_eq], y_ieq)
            if res <= tol:
                return QPSolution(x, problem.objective(x), res, OPTIMAL,
                                  y_eq=nu[:n_eq], y_ieq=y_ieq)
            return None
        active.update(int(i) for i in worst[np.argsort(viol[worst])[::-1][:8]])
        act = sorted(active)
        A = np.vstack([problem.A_eq, A_ieq[act]])
        b = np.concatenate([problem.b_eq, b_ieq[act]])
        try:
            sol = solve_equality_kkt(problem.Q, problem.c, A, b)
        except np.linalg.LinAlgError:
            return None
        x, nu = sol[: problem.n], sol[problem.n :]
    return None


@dataclass
class SmoothResult:
    trajectory: Trajectory
    fallback: bool
    objective: float  # full QP objective (jerk + soft-anchor deviation)
    jerk_energy: float  # integral of squared jerk alone
    kkt_residual: float
    status: str
    poly: PiecewisePoly | None = None


def smooth(anchors: Trajectory, state, limits, cfg: ActionConfig,
           dense_dt: float = 0.05, w_anchor: float = 10.0, colloc: int = 3,
           end_mode: str = "free", tol: float = 1e-6,
           max_iter: int = 10000) -> SmoothResult:
    """Densify sparse anchors into a smooth trajectory (spline fallback on failure).

    Fast path: the equality-constrained optimum is computed from a cached
    KKT factorization; it is the exact solution of the full QP whenever it
    already satisfies every inequality. Only when an inequality is violated
    does the splitting solver run on the full problem.
    """
    xy = anchors.xy
    k = len(xy)
    if k < 2:
        raise BadAnchors("need at least 2 anchor points")
    st = _structure(k, anchors.dt, w_anchor, end_mode, colloc)
    b_eq, c = _rhs_and_linear(st, xy, state, end_mode)
    nvars = st.A_eq.shape[1]
    sol_vec = scipy.linalg.lu_solve(st.kkt_lu, np.concatenate([-c, b_eq]))
    x, nu = sol_vec[:nvars], sol_vec[nvars:]

    A_curv, b_curv = _curvature_rows(st, xy, limits, colloc)
    A_ieq = np.vstack([st.A_acc, A_curv])
    b_ieq = np.concatenate([np.full(len(st.A_acc), limits.a_max), b_curv])

    problem = QPProblem(st.Q, st.A_eq, b_eq, A_ieq, b_ieq, c)
    solution = _active_set_solve(problem, x, nu, tol)
    if solution is None:
        solution = AdmmQpSolver(problem).solve(tol=tol, max_iter=max_iter, x0=x)

    dense_t = np.arange(0.0, k * anchors.dt + 0.5 * dense_dt, dense_dt)
    if solution.status == OPTIMAL:
        coeffs = _coeffs_from_vector(solution.x, k)
        poly = PiecewisePoly(st.knots, coeffs)
        pos = np.array([poly.eval(t) for t in dense_t])
        vel = np.array([poly.eval(t, 1) for t in dense_t])
        traj = Trajectory(_poses_from_samples(pos, vel), dense_dt)
        jerk = float(solution.x @ jerk_matrix(st.knots) @ solution.x)
        return SmoothResult(traj, False, solution.objective, jerk,
                            solution.kkt_residual, solution.status, poly)
    pos, vel = _fallback_spline(xy, state, anchors.dt, dense_t)
    traj = Trajectory(_poses_from_samples(pos, vel), dense_dt)
    return SmoothResult(traj, True, float("nan"), float("nan"),
                        solution.kkt_residual, solution.status)
