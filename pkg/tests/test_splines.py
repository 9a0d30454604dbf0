import numpy as np
import pytest

from vesselsynth import splines as sp


def deboor_basis(i, p, x, knots):
    """Textbook recursive Cox-de Boor basis, independent of the library."""
    if p == 0:
        return 1.0 if knots[i] <= x < knots[i + 1] else 0.0
    left = 0.0
    if knots[i + p] > knots[i]:
        left = (x - knots[i]) / (knots[i + p] - knots[i]) * deboor_basis(i, p - 1, x, knots)
    right = 0.0
    if knots[i + p + 1] > knots[i + 1]:
        right = ((knots[i + p + 1] - x) / (knots[i + p + 1] - knots[i + 1])
                 * deboor_basis(i + 1, p - 1, x, knots))
    return left + right


def periodic_deboor(control_values, theta):
    """Periodic uniform cubic evaluation via the recursive basis."""
    P = len(control_values)
    x = (theta % (2 * np.pi)) / (2 * np.pi) * P
    knots = np.arange(-3, P + 5, dtype=float)
    total = 0.0
    for i in range(-3, P + 1):
        w = deboor_basis(i + 3, 3, x, knots)
        total += w * control_values[(i + 2) % P]
    return total


class TestPeriodic:
    def test_partition_of_unity_constant(self):
        s = sp.PeriodicSpline(np.full(8, 3.25))
        thetas = np.linspace(0, 2 * np.pi, 50)
        assert np.allclose(s(thetas), 3.25, atol=1e-12)

    def test_periodicity(self):
        rng = np.random.default_rng(0)
        s = sp.PeriodicSpline(rng.uniform(0.5, 2.0, size=10))
        th = rng.uniform(0, 2 * np.pi, size=20)
        assert np.allclose(s(th), s(th + 2 * np.pi), atol=1e-12)

    def test_seam_continuity(self):
        rng = np.random.default_rng(1)
        s = sp.PeriodicSpline(rng.uniform(0.5, 2.0, size=8))
        h = 1e-4
        assert abs(s(0.0) - s(2 * np.pi - 1e-12)) < 1e-9
        # one-sided first and second differences must agree across the seam
        d1_below = (s(0.0) - s(-h)) / h
        d1_above = (s(h) - s(0.0)) / h
        assert abs(d1_below - d1_above) < 1e-3
        d2_below = (s(0.0) - 2 * s(-h) + s(-2 * h)) / h**2
        d2_above = (s(2 * h) - 2 * s(h) + s(0.0)) / h**2
        assert abs(d2_below - d2_above) < 1e-2 * max(1.0, abs(d2_below))

    def test_against_deboor_oracle(self):
        rng = np.random.default_rng(2)
        cv = rng.uniform(0.5, 2.0, size=8)
        s = sp.PeriodicSpline(cv)
        assert abs(float(s(1.234)) - periodic_deboor(cv, 1.234)) < 1e-12

    def test_deboor_oracle_many_angles(self):
        rng = np.random.default_rng(3)
        cv = rng.uniform(0.2, 3.0, size=12)
        s = sp.PeriodicSpline(cv)
        for th in rng.uniform(-7, 13, size=25):
            assert abs(float(s(th)) - periodic_deboor(cv, th)) < 1e-12

    def test_convex_hull_property(self):
        rng = np.random.default_rng(4)
        cv = rng.uniform(0.1, 5.0, size=9)
        s = sp.PeriodicSpline(cv)
        vals = s(np.linspace(0, 2 * np.pi, 500))
        assert vals.min() >= cv.min() - 1e-12
        assert vals.max() <= cv.max() + 1e-12


class TestFitPeriodic:
    def test_constant_radius(self):
        th = np.linspace(0, 2 * np.pi, 40, endpoint=False)
        s, rms = sp.fit_periodic(np.column_stack([th, np.ones(40)]), P=8)
        assert np.allclose(s.control_values, 1.0, atol=1e-9)
        assert rms < 1e-10

    def test_circle_radius_two(self):
        th = np.linspace(0, 2 * np.pi, 64, endpoint=False)
        s, _ = sp.fit_periodic(np.column_stack([th, np.full(64, 2.0)]), P=16)
        dense = np.linspace(0, 2 * np.pi, 1000)
        assert np.abs(s(dense) - 2.0).max() < 1e-6

    def test_ellipse(self):
        a, b = 2.0, 1.0
        th = np.linspace(0, 2 * np.pi, 64, endpoint=False)
        r = a * b / np.sqrt(b**2 * np.cos(th)**2 + a**2 * np.sin(th)**2)
        s, rms = sp.fit_periodic(np.column_stack([th, r]), P=16)
        # frozen from the dense least-squares projection onto this basis
        assert rms < 1.2e-3

    def test_fit_idempotence(self):
        rng = np.random.default_rng(5)
        cv = rng.uniform(0.5, 2.0, size=16)
        src = sp.PeriodicSpline(cv)
        th = np.linspace(0, 2 * np.pi, 200, endpoint=False)
        refit, _ = sp.fit_periodic(np.column_stack([th, src(th)]), P=16)
        dense = np.linspace(0, 2 * np.pi, 777)
        assert np.abs(refit(dense) - src(dense)).max() < 1e-8

    def test_too_few_samples(self):
        with pytest.raises(sp.FitError, match="at least"):
            sp.fit_periodic(np.zeros((4, 2)), P=8)

    def test_clustered_angles_rejected(self):
        th = np.full(32, 0.1)
        r = np.ones(32)
        with pytest.raises(sp.FitError, match="rank"):
            sp.fit_periodic(np.column_stack([th, r]), P=8)


class TestOpen:
    def test_clamped_endpoint_interpolation(self):
        rng = np.random.default_rng(6)
        cp = rng.normal(size=(6, 3))
        s = sp.OpenSpline(cp)
        assert np.allclose(s(0.0), cp[0], atol=1e-12)
        assert np.allclose(s(1.0), cp[-1], atol=1e-12)

    def test_partition_of_unity(self):
        knots = sp.clamped_knots(7)
        ts = np.random.default_rng(7).uniform(0, 1, size=50)
        B = sp.bspline_basis(knots, 7, ts)
        assert np.allclose(B.sum(axis=1), 1.0, atol=1e-12)

    def test_fit_collinear(self):
        t = np.linspace(0, 1, 20)
        pts = np.outer(t, [1.0, 2.0, -0.5])
        s, _ = sp.fit_open(pts, Q=6)
        dense = s(np.linspace(0, 1, 200))
        # every point on the segment: distance to the line < 1e-9
        d = dense - np.outer(dense @ np.array([1, 2, -0.5]) / 5.25, [1, 2, -0.5])
        assert np.abs(d).max() < 1e-9

    def test_fit_endpoints_exact(self):
        rng = np.random.default_rng(8)
        pts = np.cumsum(rng.normal(size=(15, 3)), axis=0)
        s, _ = sp.fit_open(pts, Q=6)
        assert np.allclose(s(0.0), pts[0], atol=1e-12)
        assert np.allclose(s(1.0), pts[-1], atol=1e-12)

    def test_fit_helix(self):
        t = np.linspace(0, 2 * np.pi, 50)
        pts = np.column_stack([np.cos(t), np.sin(t), 0.5 * t / (2 * np.pi)])
        s, _ = sp.fit_open(pts, Q=12)
        errs = [np.linalg.norm(s(tt) - p)
                for tt, p in zip(sp.chord_length_params(pts), pts)]
        assert max(errs) < 5e-3

    def test_too_few_points(self):
        with pytest.raises(sp.FitError, match="at least"):
            sp.fit_open(np.zeros((3, 3)), Q=4)


class TestArcLength:
    def test_straight_segment(self):
        pts = np.outer(np.linspace(0, 1, 10), [0.0, 0.0, 5.0])
        s, _ = sp.fit_open(pts, Q=4)
        assert sp.arc_length(s) == pytest.approx(5.0, abs=1e-8)

    def test_quarter_circle(self):
        t = np.linspace(0, np.pi / 2, 80)
        pts = np.column_stack([np.cos(t), np.sin(t), np.zeros_like(t)])
        s, _ = sp.fit_open(pts, Q=16)
        assert sp.arc_length(s) == pytest.approx(np.pi / 2, abs=1e-3)

    def test_additivity(self):
        rng = np.random.default_rng(9)
        pts = np.cumsum(rng.normal(size=(20, 3)), axis=0)
        s, _ = sp.fit_open(pts, Q=8)
        total = sp.arc_length(s, 0.0, 0.9)
        split = sp.arc_length(s, 0.0, 0.37) + sp.arc_length(s, 0.37, 0.9)
        assert abs(total - split) < 1e-8 * max(1.0, total)

    def test_quadrature_convergence(self):
        t = np.linspace(0, 2 * np.pi, 40)
        pts = np.column_stack([np.cos(t), np.sin(t), 0.1 * t])
        s, _ = sp.fit_open(pts, Q=10)
        loose = sp.arc_length(s, rel_tol=1e-4)
        tight = sp.arc_length(s, rel_tol=1e-10)
        assert abs(loose - tight) / tight < 1e-6

    def test_bad_interval(self):
        pts = np.outer(np.linspace(0, 1, 10), [1.0, 0.0, 0.0])
        s, _ = sp.fit_open(pts, Q=4)
        with pytest.raises(ValueError):
            sp.arc_length(s, 0.9, 0.1)
