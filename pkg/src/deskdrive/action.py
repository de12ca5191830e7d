"""Trajectory actions and dynamics-constrained exploration.

A planned action is a short future trajectory, either as ego-frame Cartesian
poses or as per-step polar increments (dR, dphi): displacement magnitude and
heading change. The polar form makes kinematic limits expressible as simple
per-coordinate intervals, and exploration then draws exact truncated-Gaussian
samples by restricting the uniform variable to the CDF image of the feasible
interval and inverting. This avoids the probability atoms at the interval
ends that plain clipping would create.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import DegenerateRange, OutOfRange
from .geometry import norm_angle

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
# Interval probability mass below this is treated as numerically empty.
MIN_INTERVAL_MASS = 1e-12


@dataclass(frozen=True)
class ActionConfig:
    """Sampling grid of a planned trajectory: n_points poses, delta_t apart."""

    delta_t: float = 0.2
    n_points: int = 15

    @property
    def t_predict(self) -> float:
        return self.delta_t * self.n_points

    def __post_init__(self):
        if self.delta_t <= 0 or self.n_points < 1:
            raise ValueError("delta_t must be > 0 and n_points >= 1")


@dataclass
class Trajectory:
    """Ego-frame poses (x, y, theta), one row per future sample time.

    points has shape (m, 3); dt is the sample interval in seconds. Action
    trajectories have m == ActionConfig.n_points; densified trajectories from
    the smoother use a finer dt and more rows.
    """

    points: np.ndarray
    dt: float

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.points[:, 2] = [norm_angle(t) for t in self.points[:, 2]]

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xy(self) -> np.ndarray:
        return self.points[:, :2]


@dataclass
class PolarTrajectory:
    """Per-step polar increments, shape (n, 2): columns (dR >= 0, dphi)."""

    steps: np.ndarray

    def __post_init__(self):
        self.steps = np.asarray(self.steps, dtype=float).reshape(-1, 2)
        if np.any(self.steps[:, 0] < 0):
            raise ValueError("dR must be >= 0")

    def __len__(self) -> int:
        return len(self.steps)


@dataclass
class FeasibleRanges:
    """Per-step closed intervals for dR and dphi, each of shape (n, 2)."""

    dr: np.ndarray
    dphi: np.ndarray

    def __post_init__(self):
        self.dr = np.asarray(self.dr, dtype=float).reshape(-1, 2)
        self.dphi = np.asarray(self.dphi, dtype=float).reshape(-1, 2)
        if np.any(self.dr[:, 0] > self.dr[:, 1]) or np.any(self.dphi[:, 0] > self.dphi[:, 1]):
            raise ValueError("range lower bounds must not exceed upper bounds")


@dataclass(frozen=True)
class ExplorationConfig:
    """How stochastic rollouts perturb the policy mean.

    scheme 'polar_gaussian' is the default; 'cartesian_disc' keeps the older
    uniform-disc sampling available for ablations.
    """

    scheme: str = "polar_gaussian"
    std_r: float = 0.3
    std_phi: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in ("polar_gaussian", "cartesian_disc"):
            raise ValueError(f"unknown exploration scheme {self.scheme!r}")
        if self.std_r <= 0 or self.std_phi <= 0:
            raise ValueError("exploration stds must be > 0")


@dataclass
class PolicyOutput:
    """Trajectory distribution emitted by a policy: per-step means + stds."""

    mean_dr: np.ndarray
    mean_dphi: np.ndarray
    std_r: float | None = None
    std_phi: float | None = None

    def __post_init__(self):
        self.mean_dr = np.asarray(self.mean_dr, dtype=float).ravel()
        self.mean_dphi = np.asarray(self.mean_dphi, dtype=float).ravel()


def polar_to_cartesian(polar: PolarTrajectory, cfg: ActionConfig) -> Trajectory:
    """Integrate polar increments into ego-frame poses.

    Heading-first convention: the heading is advanced by dphi_k before the
    displacement dR_k is applied, so a constant (dR, dphi) traces an exact
    circle of radius dR / (2 sin(dphi / 2)).
    """
    steps = polar.steps
    pts = np.zeros((len(steps), 3))
    x, y, theta = 0.0, 0.0, 0.0
    for k, (dr, dphi) in enumerate(steps):
        theta = norm_angle(theta + dphi)
        x += dr * math.cos(theta)
        y += dr * math.sin(theta)
        pts[k] = (x, y, theta)
    return Trajectory(pts, cfg.delta_t)


def cartesian_to_polar(traj: Trajectory, cfg: ActionConfig) -> PolarTrajectory:
    """Invert :func:`polar_to_cartesian` from the positions.

    Coincident consecutive points map to (0, 0) for that step. Headings are
    derived from segment directions, so the round trip reproduces positions
    (and headings, for trajectories realizable under the heading-first
    convention) to floating-point accuracy.
    """
    xy = traj.xy
    steps = np.zeros((len(xy), 2))
    prev = np.zeros(2)
    heading = 0.0
    for k in range(len(xy)):
        d = xy[k] - prev
        dr = float(np.hypot(d[0], d[1]))
        if dr > 0.0:
            new_heading = math.atan2(d[1], d[0])
            steps[k] = (dr, norm_angle(new_heading - heading))
            heading = new_heading
        prev = xy[k]
    return PolarTrajectory(steps)


def sample_cartesian_disc(mean: Trajectory, rng: np.random.Generator) -> Trajectory:
    """Uniform-disc exploration around each mean point (legacy scheme).

    Point k is drawn uniformly from the disc centered at mean point k whose
    radius is half the mean displacement at that step; headings are then
    recomputed from consecutive sampled points. Each point is sampled
    independently, so the result ignores vehicle kinematics by construction.
    """
    xy = mean.xy
    prev_mean = np.zeros(2)
    out = np.zeros((len(xy), 3))
    prev = np.zeros(2)
    heading = 0.0
    for k in range(len(xy)):
        radius = 0.5 * float(np.linalg.norm(xy[k] - prev_mean))
        u, v = rng.random(2)
        r = radius * math.sqrt(u)
        ang = 2.0 * math.pi * v
        p = xy[k] + np.array([r * math.cos(ang), r * math.sin(ang)])
        d = p - prev
        if np.hypot(d[0], d[1]) > 0:
            heading = math.atan2(d[1], d[0])
        out[k] = (p[0], p[1], heading)
        prev = p
        prev_mean = xy[k]
    return Trajectory(out, mean.dt)


def disc_log_prob(sampled: Trajectory, mean: Trajectory) -> float:
    """Log density of a disc-sampled trajectory (positions only).

    Heading recomputation is deterministic given the positions, so it does
    not contribute. Zero-radius steps are deterministic and contribute 0.
    """
    xy = mean.xy
    prev_mean = np.zeros(2)
    logp = 0.0
    for k in range(len(xy)):
        radius = 0.5 * float(np.linalg.norm(xy[k] - prev_mean))
        if radius > 0:
            logp -= math.log(math.pi * radius * radius)
        prev_mean = xy[k]
    return logp


def feasible_ranges(speed: float, limits, cfg: ActionConfig) -> FeasibleRanges:
    """Reachable (dR, dphi) intervals per step from the current speed.

    Speed bounds are propagated step by step under +-a_max; the heading
    change per step is capped by the angular-rate limit and by the curvature
    limit applied to the largest reachable displacement.
    """
    n, dt = cfg.n_points, cfg.delta_t
    dr = np.zeros((n, 2))
    dphi = np.zeros((n, 2))
    s_lo = s_hi = float(speed)
    for k in range(n):
        s_lo = max(0.0, s_lo - limits.a_max * dt)
        s_hi = s_hi + limits.a_max * dt
        dr[k] = (s_lo * dt, s_hi * dt)
        m = min(limits.omega_max * dt, limits.kappa_max * dr[k, 1])
        dphi[k] = (-m, m)
    return FeasibleRanges(dr, dphi)


def _interval_params(mean: float, std: float, lo: float, hi: float):
    if std <= 0:
        raise ValueError("std must be > 0")
    if not lo < hi:
        raise ValueError("interval must satisfy lo < hi")
    alpha = (lo - mean) / std
    beta = (hi - mean) / std
    cdf_lo = float(ndtr(alpha))
    mass = float(ndtr(beta)) - cdf_lo
    if mass < MIN_INTERVAL_MASS:
        raise DegenerateRange(
            f"interval [{lo}, {hi}] holds mass {mass:.3e} under N({mean}, {std}^2)"
        )
    return alpha, beta, cdf_lo, mass


def interval_sample(mean: float, std: float, lo: float, hi: float, u: float) -> float:
    """Map a uniform draw u in [0, 1] to an exact truncated-normal sample.

    The uniform variable is restricted to the CDF image of [lo, hi] and sent
    through the inverse CDF, so the Gaussian shape inside the interval is
    preserved and no probability mass piles up at the ends.
    """
    alpha, beta, cdf_lo, mass = _interval_params(mean, std, lo, hi)
    x = mean + std * float(ndtri(cdf_lo + u * mass))
    # Guard the open ends of ndtri against rounding just past the interval.
    return min(max(x, lo), hi)


def truncated_log_prob(x: float, mean: float, std: float, lo: float, hi: float) -> float:
    """Log density of the renormalized Gaussian restricted to [lo, hi]."""
    if not lo <= x <= hi:
        raise OutOfRange(f"x={x} outside [{lo}, {hi}]")
    alpha, beta, cdf_lo, mass = _interval_params(mean, std, lo, hi)
    z = (x - mean) / std
    return -0.5 * z * z - LOG_SQRT_2PI - math.log(std) - math.log(mass)


def _phi(z: float) -> float:
    return math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


def truncated_entropy(mean: float, std: float, lo: float, hi: float) -> float:
    """Differential entropy of the truncated Gaussian, in nats.

    H = ln(sqrt(2 pi e) std Z) + (alpha phi(alpha) - beta phi(beta)) / (2 Z)
    with Z the interval mass; reduces to the usual Gaussian entropy as the
    interval grows.
    """
    alpha, beta, _, mass = _interval_params(mean, std, lo, hi)
    return (
        math.log(math.sqrt(2.0 * math.pi * math.e) * std * mass)
        + (alpha * _phi(alpha) - beta * _phi(beta)) / (2.0 * mass)
    )


def truncated_mean_var(mean: float, std: float, lo: float, hi: float) -> tuple[float, float]:
    """Analytic mean and variance of the truncated Gaussian (test oracle)."""
    alpha, beta, _, mass = _interval_params(mean, std, lo, hi)
    pa, pb = _phi(alpha), _phi(beta)
    m1 = (pa - pb) / mass
    mu = mean + std * m1
    var = std * std * (1.0 + (alpha * pa - beta * pb) / mass - m1 * m1)
    return mu, var


def project_to_ranges(out: PolicyOutput, ranges: FeasibleRanges) -> PolarTrajectory:
    """Clip per-step means into their feasible intervals (mean-action mode)."""
    dr = np.clip(out.mean_dr, ranges.dr[:, 0], ranges.dr[:, 1])
    dphi = np.clip(out.mean_dphi, ranges.dphi[:, 0], ranges.dphi[:, 1])
    return PolarTrajectory(np.column_stack([dr, dphi]))


@dataclass
class ExplorationStats:
    """Saturation bookkeeping exported with episode logs."""

    samples: int = 0
    mean_clipped: int = 0


def sample_polar_exploration(
    out: PolicyOutput,
    ranges: FeasibleRanges,
    cfg: ExplorationConfig,
    rng: np.random.Generator,
    stats: ExplorationStats | None = None,
) -> tuple[PolarTrajectory, float]:
    """Draw a dynamics-feasible polar action and its exact log density.

    Means falling outside their feasible interval are projected to the
    nearest end before truncation (counted as saturations); every coordinate
    is then an exact truncated-Gaussian draw via :func:`interval_sample`.
    """
    n = len(ranges.dr)
    std_r = float(out.std_r if out.std_r is not None else cfg.std_r)
    std_phi = float(out.std_phi if out.std_phi is not None else cfg.std_phi)
    uniforms = rng.random((n, 2))
    steps = np.zeros((n, 2))
    logp = 0.0
    clipped = 0
    for k in range(n):
        for j, (mean, std, (lo, hi)) in enumerate(
            (
                (float(out.mean_dr[k]), std_r, ranges.dr[k]),
                (float(out.mean_dphi[k]), std_phi, ranges.dphi[k]),
            )
        ):
            m = min(max(mean, lo), hi)
            clipped += m != mean
            x = interval_sample(m, std, lo, hi, float(uniforms[k, j]))
            steps[k, j] = x
            logp += truncated_log_prob(x, m, std, lo, hi)
    if stats is not None:
        stats.samples += 2 * n
        stats.mean_clipped += int(clipped)
    return PolarTrajectory(steps), logp
