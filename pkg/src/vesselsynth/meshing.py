"""Surface reconstruction: spline sweeps, swept SDF, marching cubes, OBJ.

Each branch becomes a swept tube: an open centerline spline carrying
rotation-minimizing frames and one periodic radius spline per node. The
union of branch tubes is sampled as an approximate signed distance field
on a regular grid and contoured with marching cubes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from skimage import measure

from . import splines
from .tree import RADII_COUNT

_INVPHI = (np.sqrt(5.0) - 1.0) / 2.0
_SECTION_ANGLES = 2.0 * np.pi * np.arange(RADII_COUNT) / RADII_COUNT


class MeshingError(ValueError):
    """Sweep or grid construction contract violated."""


# ------------------------------------------------------------------- sweeps

@dataclass
class BranchSweep:
    """A branch centerline with dense RMF samples and node cross-sections."""

    centerline: splines.OpenSpline
    node_params: np.ndarray            # (n,) strictly increasing in [0, 1]
    cross_sections: list               # n PeriodicSpline, radius(theta)
    dense_t: np.ndarray                # (M,) frame sample parameters
    tangents: np.ndarray               # (M, 3) unit
    normals: np.ndarray                # (M, 3) unit, rotation-minimizing
    binormals: np.ndarray              # (M, 3) unit
    max_radius: float = field(default=0.0)

    def frame_at(self, t):
        """Orthonormal (tangent, normal, binormal) rows at parameter(s) t.

        The normal is interpolated from the dense rotation-minimizing
        samples and re-orthogonalized against the exact spline tangent.
        """
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        tan = splines.eval_open_derivative(self.centerline, t)
        tan /= np.linalg.norm(tan, axis=1, keepdims=True)
        hi = np.clip(np.searchsorted(self.dense_t, t), 1, self.dense_t.size - 1)
        lo = hi - 1
        span = self.dense_t[hi] - self.dense_t[lo]
        w = np.clip((t - self.dense_t[lo]) / span, 0.0, 1.0)[:, None]
        nrm = (1.0 - w) * self.normals[lo] + w * self.normals[hi]
        nrm -= (nrm * tan).sum(axis=1, keepdims=True) * tan
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        return tan, nrm, np.cross(tan, nrm)

    def radius_at(self, t, theta):
        """Radius of the swept surface at parameter(s) t and angle(s) theta.

        Linear blend of the two bracketing node cross-sections.
        """
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
        ti = self.node_params
        hi = np.clip(np.searchsorted(ti, t), 1, ti.size - 1)
        w = np.clip((t - ti[hi - 1]) / (ti[hi] - ti[hi - 1]), 0.0, 1.0)
        out = np.empty(t.size)
        for j in np.unique(hi):
            m = hi == j
            r_lo = self.cross_sections[j - 1](theta[m])
            r_hi = self.cross_sections[j](theta[m])
            out[m] = (1.0 - w[m]) * r_lo + w[m] * r_hi
        return out


def _initial_normal(tangent):
    # the coordinate axis least aligned with the tangent, orthogonalized
    axis = np.zeros(3)
    axis[np.argmin(np.abs(tangent))] = 1.0
    n = axis - (axis @ tangent) * tangent
    return n / np.linalg.norm(n)


def _double_reflection_frames(points, tangents):
    """Rotation-minimizing normals along a sampled curve (Wang et al. 2008)."""
    normals = np.empty_like(points)
    normals[0] = _initial_normal(tangents[0])
    for i in range(points.shape[0] - 1):
        v1 = points[i + 1] - points[i]
        c1 = v1 @ v1
        if c1 == 0.0:
            normals[i + 1] = normals[i]
            continue
        r_l = normals[i] - (2.0 / c1) * (v1 @ normals[i]) * v1
        t_l = tangents[i] - (2.0 / c1) * (v1 @ tangents[i]) * v1
        v2 = tangents[i + 1] - t_l
        c2 = v2 @ v2
        if c2 == 0.0:
            normals[i + 1] = r_l
        else:
            normals[i + 1] = r_l - (2.0 / c2) * (v2 @ r_l) * v2
        normals[i + 1] /= np.linalg.norm(normals[i + 1])
    return normals


def build_sweep(nodes, dense_factor=4):
    """Fit a branch sweep through an ordered run of nodes.

    Coincident consecutive nodes are collapsed with a warning. Frame
    samples are taken at `dense_factor` times the node density.
    """
    kept = []
    for node in nodes:
        if kept and np.linalg.norm(node.position - kept[-1].position) < 1e-12:
            warnings.warn("collapsing coincident consecutive branch nodes")
            continue
        kept.append(node)
    if len(kept) < 2:
        raise MeshingError("a branch sweep needs >= 2 distinct nodes")
    positions = np.array([n.position for n in kept])
    node_params = splines.chord_length_params(positions)
    fit_points, fit_params = positions, node_params
    if positions.shape[0] < 4:
        # densify the polyline so the clamped cubic fit has enough samples
        fit_params = np.unique(np.concatenate(
            [node_params, np.linspace(0.0, 1.0, 5)]))
        fit_points = np.stack([np.interp(fit_params, node_params, positions[:, k])
                               for k in range(3)], axis=1)
    centerline, _ = splines.fit_open(fit_points, min(fit_points.shape[0], 12))

    sections = []
    for node in kept:
        radii = np.maximum(node.radii, 1e-9)
        samples = np.stack([_SECTION_ANGLES, radii], axis=1)
        spline, _ = splines.fit_periodic(samples, RADII_COUNT)
        sections.append(spline)

    m = dense_factor * (len(kept) - 1) + 1
    dense_t = np.linspace(0.0, 1.0, m)
    dense_p = splines.eval_open(centerline, dense_t)
    tangents = splines.eval_open_derivative(centerline, dense_t)
    tangents /= np.linalg.norm(tangents, axis=1, keepdims=True)
    normals = _double_reflection_frames(dense_p, tangents)
    max_r = float(max(np.max(np.maximum(n.radii, 1e-9)) for n in kept))
    return BranchSweep(centerline, node_params, sections, dense_t,
                       tangents, normals, np.cross(tangents, normals),
                       max_radius=max_r)


# ----------------------------------------------------------------------- SDF

def _golden_refine(centerline, points, lo, hi, iters=45):
    """Vectorized golden-section search for the nearest curve parameter."""

    def dist2(t):
        d = splines.eval_open(centerline, t) - points
        return (d * d).sum(axis=1)

    a, b = lo.copy(), hi.copy()
    for _ in range(iters):
        c = b - _INVPHI * (b - a)
        d = a + _INVPHI * (b - a)
        left = dist2(c) < dist2(d)
        a = np.where(left, a, c)
        b = np.where(left, d, b)
    return 0.5 * (a + b)


def branch_distance(sweep, points, band=np.inf):
    """Approximate signed distance from points to one branch tube.

    Points farther than `band` from the tube (by the dense-polyline bound)
    get a safe positive lower bound instead of a refined value. End caps
    are closed flat with the standard capped-tube composition.
    """
    points = np.asarray(points, dtype=np.float64)
    dense_p = splines.eval_open(sweep.centerline, sweep.dense_t)
    d2 = ((points[:, None, :] - dense_p[None, :, :]) ** 2).sum(axis=2)
    kmin = d2.argmin(axis=1)
    dmin = np.sqrt(d2[np.arange(points.shape[0]), kmin])
    seg = np.linalg.norm(np.diff(dense_p, axis=0), axis=1).max()
    out = dmin - sweep.max_radius - seg     # conservative lower bound
    near = out <= band
    if not near.any():
        return out

    p = points[near]
    lo = sweep.dense_t[np.maximum(kmin[near] - 1, 0)]
    hi = sweep.dense_t[np.minimum(kmin[near] + 1, sweep.dense_t.size - 1)]
    t = _golden_refine(sweep.centerline, p, lo, hi)
    _, nrm, bin_ = sweep.frame_at(t)
    d = p - splines.eval_open(sweep.centerline, t)
    x = (d * nrm).sum(axis=1)
    y = (d * bin_).sum(axis=1)
    rho = np.hypot(x, y)
    r = sweep.radius_at(t, np.arctan2(y, x))
    lateral = rho - r
    # flat end caps: signed distance past each end plane, applied only
    # within the end node segments so a folded branch cannot self-carve
    ax = np.full_like(lateral, -np.inf)
    ends = splines.eval_open(sweep.centerline, np.array([0.0, 1.0]))
    tan_e = splines.eval_open_derivative(sweep.centerline,
                                         np.array([0.0, 1.0]))
    tan_e /= np.linalg.norm(tan_e, axis=1, keepdims=True)
    at0 = t < sweep.node_params[1]
    at1 = t > sweep.node_params[-2]
    ax[at0] = (ends[0] - p[at0]) @ tan_e[0]
    ax[at1] = np.maximum(ax[at1], (p[at1] - ends[1]) @ tan_e[1])
    inside = np.minimum(np.maximum(lateral, ax), 0.0)
    outside = np.hypot(np.maximum(lateral, 0.0), np.maximum(ax, 0.0))
    out[near] = inside + outside
    return out


@dataclass(frozen=True)
class ScalarGrid:
    """Regular grid of field values over an axis-aligned box."""

    values: np.ndarray       # (N, N, N)
    lo: np.ndarray           # (3,)
    hi: np.ndarray           # (3,)

    @property
    def spacing(self):
        shape = np.array(self.values.shape)
        return (self.hi - self.lo) / (shape - 1)


def grid_bounds(sweeps, resolution):
    """Axis-aligned bounds: sweep box inflated by max radius + 2 voxels."""
    points = np.concatenate(
        [splines.eval_open(s.centerline, s.dense_t) for s in sweeps])
    pad = max(s.max_radius for s in sweeps)
    lo = points.min(axis=0) - pad
    hi = points.max(axis=0) + pad
    voxel = (hi - lo) / (resolution - 1)
    return lo - 2 * voxel, hi + 2 * voxel


def sweep_sdf(sweeps, resolution=64, bounds=None, band_voxels=4.0,
              chunk=65536):
    """Sample the union of branch tubes on a regular grid.

    The field is an approximate SDF: exact sign and zero set, with far
    values replaced by positive lower bounds. Union is pointwise min.
    """
    if not sweeps:
        raise MeshingError("need at least one branch sweep")
    if resolution < 2:
        raise MeshingError("grid resolution must be >= 2")
    if bounds is None:
        lo, hi = grid_bounds(sweeps, resolution)
    else:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    axes = [np.linspace(lo[k], hi[k], resolution) for k in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    band = band_voxels * float(((hi - lo) / (resolution - 1)).max())
    values = np.full(pts.shape[0], np.inf)
    for start in range(0, pts.shape[0], chunk):
        block = pts[start:start + chunk]
        acc = np.full(block.shape[0], np.inf)
        for sweep in sweeps:
            acc = np.minimum(acc, branch_distance(sweep, block, band=band))
        values[start:start + chunk] = acc
    return ScalarGrid(values.reshape(resolution, resolution, resolution),
                      lo, hi)


# ------------------------------------------------------------ marching cubes

@dataclass(frozen=True)
class TriMesh:
    """Indexed triangle mesh with outward-oriented faces."""

    vertices: np.ndarray     # (V, 3)
    triangles: np.ndarray    # (F, 3) int

    @property
    def is_empty(self):
        return self.triangles.shape[0] == 0

    def edge_counts(self):
        e = np.concatenate([self.triangles[:, [0, 1]],
                            self.triangles[:, [1, 2]],
                            self.triangles[:, [2, 0]]])
        e = np.sort(e, axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return counts

    def is_watertight(self):
        if self.is_empty:
            return False
        return bool(np.all(self.edge_counts() == 2))

    def euler_characteristic(self):
        n_edges = self.edge_counts().size
        return self.vertices.shape[0] - n_edges + self.triangles.shape[0]

    def areas(self):
        v = self.vertices
        t = self.triangles
        c = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        return 0.5 * np.linalg.norm(c, axis=1)

    def signed_volume(self):
        v = self.vertices
        t = self.triangles
        return float(np.einsum(
            "ij,ij->i", v[t[:, 0]], np.cross(v[t[:, 1]], v[t[:, 2]])).sum() / 6.0)


def marching_cubes(grid, iso=0.0):
    """Contour a scalar grid; empty mesh when the level set is absent.

    Faces are oriented so normals point toward increasing field values
    (outward for a signed distance field).
    """
    values = grid.values
    if not np.all(np.isfinite(values)):
        raise MeshingError("grid contains non-finite values")
    if values.min() > iso or values.max() < iso:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.intp))
    verts, faces, _, _ = measure.marching_cubes(
        values, level=iso, spacing=tuple(grid.spacing),
        gradient_direction="ascent")
    verts = verts + grid.lo
    faces = np.asarray(faces, dtype=np.intp)
    mesh = TriMesh(verts, faces)
    keep = mesh.areas() > 1e-12
    if not keep.all():
        mesh = TriMesh(verts, faces[keep])
    if mesh.signed_volume() < 0:
        mesh = TriMesh(mesh.vertices, mesh.triangles[:, ::-1])
    return mesh


def mesh_tree(tree, resolution=128, bounds=None, band_voxels=4.0):
    """Full reconstruction: branches -> sweeps -> SDF -> triangle mesh."""
    sweeps = []
    for branch in tree.branches():
        if len(branch) >= 2:
            sweeps.append(build_sweep(branch))
    if not sweeps:
        raise MeshingError("tree has no branch with >= 2 distinct nodes")
    grid = sweep_sdf(sweeps, resolution=resolution, bounds=bounds,
                     band_voxels=band_voxels)
    return marching_cubes(grid)


# ------------------------------------------------------------------ OBJ I/O

def export_obj(mesh, path):
    """Write an ASCII OBJ (9 significant digits, 1-based face indices)."""
    try:
        with open(path, "w") as fh:
            for v in mesh.vertices:
                fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
            for t in mesh.triangles:
                fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
    except OSError as exc:
        raise OSError(f"cannot write OBJ to {path}: {exc}") from exc


def load_obj(path):
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                   np.array(faces, dtype=np.intp).reshape(-1, 3))
