import math

import numpy as np
import pytest
from scipy import stats as spstats
from scipy.special import ndtr, ndtri

from deskdrive.action import (
    ActionConfig,
    ExplorationConfig,
    FeasibleRanges,
    PolarTrajectory,
    PolicyOutput,
    Trajectory,
    cartesian_to_polar,
    disc_log_prob,
    feasible_ranges,
    interval_sample,
    polar_to_cartesian,
    project_to_ranges,
    sample_cartesian_disc,
    sample_polar_exploration,
    truncated_entropy,
    truncated_log_prob,
    truncated_mean_var,
)
from deskdrive.errors import DegenerateRange, OutOfRange
from deskdrive.simkernel import DynamicsLimits

ACFG = ActionConfig()

# 50-digit-reference values (mpmath), truncated to double precision.
PHI_TABLE = [
    (-6.0, 9.86587645037698140700864132398e-10),
    (-3.5, 0.000232629079035525036349925886728),
    (-1.0, 0.158655253931457051414767454368),
    (-0.5, 0.308537538725986896362295389392),
    (0.0, 0.5),
    (0.5, 0.691462461274013103637704610608),
    (1.0, 0.841344746068542948585232545632),
    (2.5, 0.993790334674223864833021895426),
    (6.0, 0.999999999013412354962301859299),
]
PHI_INV_TABLE = [
    (0.001, -3.09023230616781354154039983011),
    (0.2, -0.841621233572914205178706121363),
    (0.5, 0.0),
    (0.8, 0.841621233572914205178706121363),
    (0.975, 1.95996398454005423552459443052),
    (0.999999, 4.753424308822898948193988187),
]

# truncated N(0,1) on [-1, 1], high-precision reference
TRUNC_LOGP_AT_0 = -0.53722338690254666951
TRUNC_VAR = 0.29112509477279321119
TRUNC_ENTROPY = 0.6827859342889432751
# truncated N(0.3, 0.7^2) on [-0.2, 1.1]
ASYM = dict(mean=0.3, std=0.7, lo=-0.2, hi=1.1)
ASYM_MEAN = 0.41171130143800154047
ASYM_VAR = 0.12455023520123286671
ASYM_ENTROPY = 0.24941634774493548019
ASYM_LOGP_AT_05 = -0.15040650073452230493


def test_normal_cdf_accuracy_vs_reference():
    for x, ref in PHI_TABLE:
        assert abs(float(ndtr(x)) - ref) < 1e-10


def test_normal_icdf_accuracy_vs_reference():
    for p, ref in PHI_INV_TABLE:
        assert abs(float(ndtri(p)) - ref) < 1e-9


class TestConversions:
    def test_straight_line(self):
        p = PolarTrajectory(np.column_stack([np.ones(15), np.zeros(15)]))
        traj = polar_to_cartesian(p, ACFG)
        assert np.allclose(traj.points[:, 0], np.arange(1, 16))
        assert np.allclose(traj.points[:, 1:], 0)

    def test_zero_displacement_accumulates_heading(self):
        p = PolarTrajectory(np.column_stack([np.zeros(15), np.full(15, 0.1)]))
        traj = polar_to_cartesian(p, ACFG)
        assert np.allclose(traj.xy, 0)
        assert np.allclose(traj.points[:, 2], 0.1 * np.arange(1, 16))

    def test_constant_step_traces_circle(self):
        dr, dphi = 1.0, 0.1
        p = PolarTrajectory(np.tile([dr, dphi], (15, 1)))
        traj = polar_to_cartesian(p, ACFG)
        radius = dr / (2 * math.sin(dphi / 2))
        # the circle passes through the origin with center on the
        # perpendicular of the first chord
        center = np.array(
            [-radius * math.sin(0.0), radius * math.cos(0.0)]
        )  # heading starts at dphi after the first step; derive center from two chords
        # robust: fit center by least squares and compare the radius
        pts = np.vstack([[0.0, 0.0], traj.xy])
        A = np.column_stack([2 * pts[:, 0], 2 * pts[:, 1], np.ones(len(pts))])
        b = (pts**2).sum(axis=1)
        sol, *_ = np.linalg.lstsq(A, b, rcond=None)
        r_fit = math.sqrt(sol[2] + sol[0] ** 2 + sol[1] ** 2)
        assert abs(r_fit - radius) < 1e-9

    def test_inverse_of_straight(self):
        xy = np.column_stack([np.arange(1, 16), np.zeros(15), np.zeros(15)])
        polar = cartesian_to_polar(Trajectory(xy, 0.2), ACFG)
        assert np.allclose(polar.steps[:, 0], 1.0)
        assert np.allclose(polar.steps[:, 1], 0.0)

    def test_round_trip_random(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            steps = np.column_stack(
                [rng.uniform(0.05, 2.0, 15), rng.uniform(-0.4, 0.4, 15)]
            )
            p = PolarTrajectory(steps)
            traj = polar_to_cartesian(p, ACFG)
            back = cartesian_to_polar(traj, ACFG)
            again = polar_to_cartesian(back, ACFG)
            assert np.abs(again.xy - traj.xy).max() < 1e-9

    def test_coincident_points_zero_step(self):
        xy = np.array([[1.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
        polar = cartesian_to_polar(Trajectory(xy, 0.2), ActionConfig(0.2, 3))
        assert polar.steps[1, 0] == 0.0
        assert polar.steps[1, 1] == 0.0


class TestDiscSampling:
    def test_zero_radius_reproduces_mean(self):
        mean = Trajectory(np.zeros((15, 3)), 0.2)
        out = sample_cartesian_disc(mean, np.random.default_rng(0))
        assert np.allclose(out.xy, 0)

    def test_containment(self):
        rng = np.random.default_rng(2)
        xy = np.column_stack([np.arange(1, 16) * 1.0, np.zeros(15), np.zeros(15)])
        mean = Trajectory(xy, 0.2)
        prev = np.zeros(2)
        for _ in range(200):
            out = sample_cartesian_disc(mean, rng)
            prev_mean = np.zeros(2)
            for k in range(15):
                r = 0.5 * np.linalg.norm(mean.xy[k] - prev_mean)
                assert np.linalg.norm(out.xy[k] - mean.xy[k]) <= r + 1e-12
                prev_mean = mean.xy[k]

    def test_uniformity_chi2(self):
        # point 1 has radius 0.5 around (1, 0): radial quartiles and angular
        # octants must look uniform for the disc law
        rng = np.random.default_rng(3)
        xy = np.column_stack([np.arange(1, 16) * 1.0, np.zeros(15), np.zeros(15)])
        mean = Trajectory(xy, 0.2)
        n = 20000
        pts = np.array([sample_cartesian_disc(mean, rng).xy[0] for _ in range(n)])
        d = pts - [1.0, 0.0]
        r = np.linalg.norm(d, axis=1) / 0.5
        ang = np.arctan2(d[:, 1], d[:, 0])
        r_bins = np.histogram(r**2, bins=8, range=(0, 1))[0]  # r^2 uniform on disc
        a_bins = np.histogram(ang, bins=8, range=(-math.pi, math.pi))[0]
        assert spstats.chisquare(r_bins).pvalue > 0.01
        assert spstats.chisquare(a_bins).pvalue > 0.01

    def test_disc_log_prob_value(self):
        xy = np.column_stack([[2.0, 4.0], [0, 0], [0, 0]])
        mean = Trajectory(xy, 0.2)
        # radii 1.0 and 1.0 -> density (1/pi)^2
        lp = disc_log_prob(mean, mean)
        assert lp == pytest.approx(-2 * math.log(math.pi))


class TestFeasibleRanges:
    def test_first_step_arithmetic(self):
        limits = DynamicsLimits(a_max=3.0)
        rg = feasible_ranges(5.0, limits, ACFG)
        assert rg.dr[0, 0] == pytest.approx(0.88)
        assert rg.dr[0, 1] == pytest.approx(1.12)

    def test_speed_floor(self):
        rg = feasible_ranges(0.0, DynamicsLimits(), ACFG)
        assert rg.dr[0, 0] == 0.0
        assert rg.dr[0, 1] > 0

    def test_monotone_widening(self):
        rng = np.random.default_rng(4)
        limits = DynamicsLimits()
        for _ in range(100):
            rg = feasible_ranges(float(rng.uniform(0, 15)), limits, ACFG)
            for k in range(len(rg.dr) - 1):
                assert rg.dr[k + 1, 0] <= rg.dr[k, 0] + 1e-12
                assert rg.dr[k + 1, 1] >= rg.dr[k, 1] - 1e-12

    def test_dphi_cap(self):
        limits = DynamicsLimits(omega_max=0.6, kappa_max=0.2)
        rg = feasible_ranges(5.0, limits, ACFG)
        for k in range(15):
            m = min(limits.omega_max * 0.2, limits.kappa_max * rg.dr[k, 1])
            assert rg.dphi[k, 1] == pytest.approx(m)
            assert rg.dphi[k, 0] == pytest.approx(-m)


class TestIntervalSampling:
    def test_symmetric_median(self):
        assert interval_sample(0.0, 1.0, -1.0, 1.0, 0.5) == pytest.approx(0.0, abs=1e-9)

    def test_containment_exact(self):
        rng = np.random.default_rng(5)
        for _ in range(2000):
            std = rng.uniform(0.05, 2)
            lo = rng.uniform(-2, 0)
            hi = lo + rng.uniform(0.05, 3)
            # keep the interval mass clearly above the degenerate cutoff
            mean = rng.uniform(lo - 2 * std, hi + 2 * std)
            x = interval_sample(mean, std, lo, hi, rng.random())
            assert lo <= x <= hi

    def test_no_boundary_atoms(self):
        # unlike clipping, interval sampling leaves no mass at the ends
        rng = np.random.default_rng(6)
        hits = 0
        for _ in range(100000):
            x = interval_sample(2.0, 1.0, -1.0, 1.0, rng.random())
            hits += x == -1.0 or x == 1.0
        assert hits == 0

    def test_ks_against_analytic_cdf(self):
        rng = np.random.default_rng(7)
        n = 100000
        u = rng.random(n)
        xs = np.array([interval_sample(0.0, 1.0, -1.0, 1.0, ui) for ui in u])
        z = ndtr(-1.0)
        cdf = lambda x: (ndtr(x) - z) / (ndtr(1.0) - z)
        d, p = spstats.kstest(xs, cdf)
        assert p > 0.01

    def test_moments_match_reference(self):
        mu, var = truncated_mean_var(0.0, 1.0, -1.0, 1.0)
        assert mu == pytest.approx(0.0, abs=1e-15)
        assert var == pytest.approx(TRUNC_VAR, abs=1e-12)
        mu2, var2 = truncated_mean_var(**ASYM)
        assert mu2 == pytest.approx(ASYM_MEAN, abs=1e-12)
        assert var2 == pytest.approx(ASYM_VAR, abs=1e-12)

    def test_degenerate_range(self):
        with pytest.raises(DegenerateRange):
            interval_sample(0.0, 0.1, 50.0, 50.1, 0.5)


class TestTruncatedLogProb:
    def test_reference_values(self):
        assert truncated_log_prob(0.0, 0.0, 1.0, -1.0, 1.0) == pytest.approx(
            TRUNC_LOGP_AT_0, abs=1e-12
        )
        assert truncated_log_prob(0.5, **ASYM) == pytest.approx(ASYM_LOGP_AT_05, abs=1e-12)

    def test_wide_range_matches_untruncated(self):
        lp = truncated_log_prob(0.3, 0.0, 1.0, -1e6, 1e6)
        ref = -0.5 * 0.3**2 - 0.5 * math.log(2 * math.pi)
        assert lp == pytest.approx(ref, abs=1e-8)

    def test_out_of_range(self):
        with pytest.raises(OutOfRange):
            truncated_log_prob(2.0, 0.0, 1.0, -1.0, 1.0)

    def test_gradient_wrt_mean_finite_difference(self):
        eps = 1e-6
        for mean in (0.0, 0.4, -0.3):
            up = truncated_log_prob(0.2, mean + eps, 1.0, -1.0, 1.0)
            dn = truncated_log_prob(0.2, mean - eps, 1.0, -1.0, 1.0)
            fd = (up - dn) / (2 * eps)
            # analytic: z/std + (phi(beta) - phi(alpha)) / (std * Z)
            a, b = (-1 - mean), (1 - mean)
            phi = lambda t: math.exp(-t * t / 2) / math.sqrt(2 * math.pi)
            z = ndtr(b) - ndtr(a)
            grad = (0.2 - mean) + (phi(b) - phi(a)) / z
            assert abs(fd - grad) / max(abs(grad), 1e-8) < 1e-5

    def test_entropy_reference(self):
        assert truncated_entropy(0.0, 1.0, -1.0, 1.0) == pytest.approx(
            TRUNC_ENTROPY, abs=1e-12
        )
        assert truncated_entropy(**ASYM) == pytest.approx(ASYM_ENTROPY, abs=1e-12)

    def test_entropy_vs_quadrature(self):
        from scipy.integrate import quad

        for kw in (dict(mean=0.0, std=1.0, lo=-1.0, hi=1.0), ASYM):
            z = ndtr((kw["hi"] - kw["mean"]) / kw["std"]) - ndtr((kw["lo"] - kw["mean"]) / kw["std"])

            def neg_plogp(x):
                lp = truncated_log_prob(x, **kw)
                return -math.exp(lp) * lp

            h, _ = quad(neg_plogp, kw["lo"], kw["hi"], epsabs=1e-12)
            assert truncated_entropy(**kw) == pytest.approx(h, abs=1e-9)


class TestPolarExploration:
    def _setup(self, speed=5.0):
        limits = DynamicsLimits()
        ranges = feasible_ranges(speed, limits, ACFG)
        out = PolicyOutput(
            mean_dr=np.full(15, speed * 0.2), mean_dphi=np.zeros(15),
            std_r=0.3, std_phi=0.05,
        )
        return out, ranges

    def test_concentration_at_tiny_std(self):
        out, ranges = self._setup()
        out.std_r = out.std_phi = 1e-8
        cfg = ExplorationConfig(std_r=1e-8, std_phi=1e-8)
        action, _ = sample_polar_exploration(out, ranges, cfg, np.random.default_rng(0))
        proj = project_to_ranges(out, ranges)
        assert np.abs(action.steps - proj.steps).max() < 1e-6

    def test_all_samples_feasible(self):
        out, ranges = self._setup()
        cfg = ExplorationConfig()
        rng = np.random.default_rng(8)
        for _ in range(200):
            action, logp = sample_polar_exploration(out, ranges, cfg, rng)
            assert np.all(action.steps[:, 0] >= ranges.dr[:, 0] - 1e-12)
            assert np.all(action.steps[:, 0] <= ranges.dr[:, 1] + 1e-12)
            assert np.all(action.steps[:, 1] >= ranges.dphi[:, 0] - 1e-12)
            assert np.all(action.steps[:, 1] <= ranges.dphi[:, 1] + 1e-12)
            assert np.isfinite(logp)

    def test_empirical_mean_matches_truncated_moments(self):
        out, ranges = self._setup()
        cfg = ExplorationConfig(std_r=0.3, std_phi=0.05)
        rng = np.random.default_rng(9)
        n = 20000
        acc = np.zeros((15, 2))
        for _ in range(n):
            action, _ = sample_polar_exploration(out, ranges, cfg, rng)
            acc += action.steps
        emp = acc / n
        for k in range(15):
            m = np.clip(out.mean_dr[k], ranges.dr[k, 0], ranges.dr[k, 1])
            mu, var = truncated_mean_var(m, 0.3, ranges.dr[k, 0], ranges.dr[k, 1])
            assert abs(emp[k, 0] - mu) < 4 * math.sqrt(var / n) + 1e-4
            mu2, var2 = truncated_mean_var(0.0, 0.05, ranges.dphi[k, 0], ranges.dphi[k, 1])
            assert abs(emp[k, 1] - mu2) < 4 * math.sqrt(var2 / n) + 1e-4

    def test_log_prob_consistency(self):
        out, ranges = self._setup()
        cfg = ExplorationConfig(std_r=0.3, std_phi=0.05)
        action, logp = sample_polar_exploration(out, ranges, cfg, np.random.default_rng(10))
        manual = 0.0
        for k in range(15):
            m = float(np.clip(out.mean_dr[k], ranges.dr[k, 0], ranges.dr[k, 1]))
            manual += truncated_log_prob(action.steps[k, 0], m, 0.3, *ranges.dr[k])
            m2 = float(np.clip(out.mean_dphi[k], ranges.dphi[k, 0], ranges.dphi[k, 1]))
            manual += truncated_log_prob(action.steps[k, 1], m2, 0.05, *ranges.dphi[k])
        assert logp == pytest.approx(manual, abs=1e-12)

    def test_determinism_per_seed(self):
        out, ranges = self._setup()
        cfg = ExplorationConfig()
        a1, l1 = sample_polar_exploration(out, ranges, cfg, np.random.default_rng(11))
        a2, l2 = sample_polar_exploration(out, ranges, cfg, np.random.default_rng(11))
        assert np.array_equal(a1.steps, a2.steps)
        assert l1 == l2
