"""Uniform cubic B-splines for vessel geometry.

Two flavors: closed periodic scalar splines (radius as a function of the
cross-section angle) and clamped open 3D splines (branch centerlines).
Fitting is plain linear least squares; arc length is adaptive
Gauss-Legendre quadrature.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * np.pi


class FitError(ValueError):
    """Fitting contract violated (too few samples, rank deficiency)."""


def _cubic_basis(u):
    """Uniform cubic B-spline blending weights for local parameter u in [0,1).

    Returns weights for the four controls at offsets -1, 0, 1, 2 around the
    current span. Weights sum to 1 (partition of unity).
    """
    u = np.asarray(u, dtype=np.float64)
    u2 = u * u
    u3 = u2 * u
    b0 = (1 - u) ** 3 / 6.0
    b1 = (3 * u3 - 6 * u2 + 4) / 6.0
    b2 = (-3 * u3 + 3 * u2 + 3 * u + 1) / 6.0
    b3 = u3 / 6.0
    return np.stack([b0, b1, b2, b3], axis=-1)


# ------------------------------------------------------------------- periodic

@dataclass(frozen=True)
class PeriodicSpline:
    """Closed uniform cubic B-spline r(theta) over theta in [0, 2*pi)."""

    control_values: np.ndarray

    def __post_init__(self):
        cv = np.asarray(self.control_values, dtype=np.float64)
        if cv.ndim != 1 or cv.size < 4:
            raise ValueError("periodic spline needs >= 4 control values")
        object.__setattr__(self, "control_values", cv)

    def __call__(self, theta):
        return eval_periodic(self, theta)


def eval_periodic(spline, theta):
    """Evaluate a periodic radius spline at angle(s), wrapped mod 2*pi."""
    cv = spline.control_values
    P = cv.size
    theta = np.asarray(theta, dtype=np.float64)
    u_global = (theta % TWO_PI) / TWO_PI * P
    span = np.floor(u_global).astype(np.intp) % P
    w = _cubic_basis(u_global - np.floor(u_global))
    idx = (span[..., None] + np.arange(-1, 3)) % P
    return (w * cv[idx]).sum(axis=-1)


def periodic_design_matrix(thetas, P):
    thetas = np.asarray(thetas, dtype=np.float64)
    u_global = (thetas % TWO_PI) / TWO_PI * P
    span = np.floor(u_global).astype(np.intp) % P
    w = _cubic_basis(u_global - np.floor(u_global))
    A = np.zeros((thetas.size, P))
    rows = np.arange(thetas.size)[:, None]
    cols = (span[:, None] + np.arange(-1, 3)) % P
    np.add.at(A, (rows, cols), w)
    return A


def fit_periodic(samples, P):
    """Least-squares periodic spline through (theta, radius) samples.

    Returns (spline, rms_residual). Raises FitError on too few samples or on
    a rank-deficient design matrix (clustered angles).
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[1] != 2:
        raise FitError("samples must be an (n, 2) array of (theta, radius)")
    if samples.shape[0] < P:
        raise FitError(f"need at least P={P} samples, got {samples.shape[0]}")
    A = periodic_design_matrix(samples[:, 0], P)
    b = samples[:, 1]
    sol, _, rank, sv = np.linalg.lstsq(A, b, rcond=None)
    if rank < P:
        cond = sv[0] / sv[-1] if sv[-1] > 0 else np.inf
        raise FitError(
            f"rank-deficient fit (rank {rank} < {P}, condition {cond:.3g}); "
            "theta samples too clustered")
    rms = float(np.sqrt(np.mean((A @ sol - b) ** 2)))
    return PeriodicSpline(sol), rms


# ----------------------------------------------------------------------- open

@dataclass(frozen=True)
class OpenSpline:
    """Clamped uniform cubic B-spline curve c(t), t in [0, 1]."""

    control_points: np.ndarray
    knots: np.ndarray = field(default=None)

    def __post_init__(self):
        cp = np.asarray(self.control_points, dtype=np.float64)
        if cp.ndim == 1:
            cp = cp[:, None]
        if cp.shape[0] < 4:
            raise ValueError("open cubic spline needs >= 4 control points")
        object.__setattr__(self, "control_points", cp)
        if self.knots is None:
            object.__setattr__(self, "knots", clamped_knots(cp.shape[0]))
        else:
            object.__setattr__(self, "knots",
                               np.asarray(self.knots, dtype=np.float64))

    def __call__(self, t):
        return eval_open(self, t)

    def derivative(self, t):
        return eval_open_derivative(self, t)


def clamped_knots(n_controls, degree=3):
    """Clamped uniform knot vector on [0, 1]."""
    interior = n_controls - degree - 1
    inner = np.linspace(0, 1, interior + 2)[1:-1] if interior > 0 else np.array([])
    return np.concatenate([np.zeros(degree + 1), inner, np.ones(degree + 1)])


def bspline_basis(knots, n_controls, t, degree=3):
    """Cox-de Boor basis functions N_{i,degree}(t) for an array of t.

    Returns an (len(t), n_controls) matrix. The last basis function is set
    to 1 at t = knot end so the curve is evaluable on the closed interval.
    """
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    m = t.size
    N = np.zeros((m, len(knots) - 1))
    # degree 0
    for i in range(len(knots) - 1):
        N[:, i] = (t >= knots[i]) & (t < knots[i + 1])
    end = t >= knots[-1] - 1e-14
    if np.any(end):
        last = np.max(np.nonzero(np.diff(knots) > 0)[0])
        N[end, :] = 0.0
        N[end, last] = 1.0
    for p in range(1, degree + 1):
        Np = np.zeros((m, len(knots) - 1 - p))
        for i in range(len(knots) - 1 - p):
            d1 = knots[i + p] - knots[i]
            d2 = knots[i + p + 1] - knots[i + 1]
            if d1 > 0:
                Np[:, i] += (t - knots[i]) / d1 * N[:, i]
            if d2 > 0:
                Np[:, i] += (knots[i + p + 1] - t) / d2 * N[:, i + 1]
        N = Np
    return N[:, :n_controls]


def eval_open(spline, t):
    cp = spline.control_points
    t = np.asarray(t, dtype=np.float64)
    scalar = t.ndim == 0
    B = bspline_basis(spline.knots, cp.shape[0], np.atleast_1d(t))
    out = B @ cp
    return out[0] if scalar else out


def eval_open_derivative(spline, t):
    """First derivative c'(t) via the degree-2 difference curve."""
    cp = spline.control_points
    knots = spline.knots
    p = 3
    n = cp.shape[0]
    denom = knots[1 + p:n + p] - knots[1:n]
    d = p * (cp[1:] - cp[:-1]) / denom[:, None]
    t = np.asarray(t, dtype=np.float64)
    scalar = t.ndim == 0
    B = bspline_basis(knots[1:-1], n - 1, np.atleast_1d(t), degree=2)
    out = B @ d
    return out[0] if scalar else out


def chord_length_params(points):
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    total = seg.sum()
    if total == 0:
        raise FitError("all points coincide; cannot parameterize")
    return np.concatenate([[0.0], np.cumsum(seg)]) / total


def fit_open(points, Q):
    """Clamped least-squares cubic fit of an ordered 3D point run.

    Endpoints are interpolated exactly (clamped + pinned end controls).
    Returns (OpenSpline, rms_residual).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise FitError("points must be an (n, d) array")
    if points.shape[0] < Q:
        raise FitError(f"need at least Q={Q} points, got {points.shape[0]}")
    if Q < 4:
        raise FitError("cubic fit needs Q >= 4 controls")
    ts = chord_length_params(points)
    knots = clamped_knots(Q)
    B = bspline_basis(knots, Q, ts)
    # pin first/last control to the end points, solve for the interior
    rhs = points - np.outer(B[:, 0], points[0]) - np.outer(B[:, -1], points[-1])
    sol, _, _, _ = np.linalg.lstsq(B[:, 1:-1], rhs, rcond=None)
    cp = np.vstack([points[0], sol, points[-1]])
    spline = OpenSpline(cp, knots)
    rms = float(np.sqrt(np.mean((B @ cp - points) ** 2)))
    return spline, rms


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(16)


def _gl_segment(spline, a, b):
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    ts = mid + half * _GL_NODES
    speed = np.linalg.norm(spline.derivative(ts), axis=-1)
    return half * (speed * _GL_WEIGHTS).sum()


def arc_length(spline, t0=0.0, t1=1.0, rel_tol=1e-8, max_depth=30):
    """Adaptive Gauss-Legendre arc length of an open spline on [t0, t1]."""
    if not (0.0 <= t0 <= t1 <= 1.0):
        raise ValueError(f"need 0 <= t0 <= t1 <= 1, got ({t0}, {t1})")
    if t0 == t1:
        return 0.0

    def recurse(a, b, whole, depth):
        m = 0.5 * (a + b)
        left = _gl_segment(spline, a, m)
        right = _gl_segment(spline, m, b)
        if depth >= max_depth or abs(left + right - whole) <= rel_tol * abs(whole):
            return left + right
        return recurse(a, m, left, depth + 1) + recurse(m, b, right, depth + 1)

    return float(recurse(t0, t1, _gl_segment(spline, t0, t1), 0))
