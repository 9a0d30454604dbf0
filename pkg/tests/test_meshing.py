"""Tests for sweeps, the swept SDF, marching cubes, and OBJ I/O."""

import numpy as np
import pytest

from vesselsynth import meshing
from vesselsynth.tree import VesselNode


def node(pos, r=1.0):
    return VesselNode(np.asarray(pos, dtype=np.float64), np.full(16, float(r)))


def straight_nodes(length=4.0, n=5, r=1.0):
    return [node([0.0, 0.0, z], r) for z in np.linspace(0.0, length, n)]


def tube_error(mesh, r=1.0, length=4.0):
    """Max |SDF| of mesh vertices under the analytic capped-tube field."""
    v = mesh.vertices
    la = np.hypot(v[:, 0], v[:, 1]) - r
    ax = np.maximum(-v[:, 2], v[:, 2] - length)
    f = (np.minimum(np.maximum(la, ax), 0.0)
         + np.hypot(np.maximum(la, 0.0), np.maximum(ax, 0.0)))
    return np.abs(f).max()


class TestBuildSweep:
    def test_straight_branch_constant_frames(self):
        sweep = meshing.build_sweep(straight_nodes())
        t = np.linspace(0.0, 1.0, 100)
        tan, nrm, _ = sweep.frame_at(t)
        assert np.abs(tan - [0, 0, 1]).max() < 1e-12
        assert np.abs(nrm - [1, 0, 0]).max() < 1e-12

    def test_frame_orthonormality(self):
        rng = np.random.default_rng(0)
        pts = np.cumsum(rng.normal(0.3, 0.2, size=(8, 3)), axis=0)
        sweep = meshing.build_sweep([node(p, 0.2) for p in pts])
        t = np.linspace(0.0, 1.0, 100)
        frames = np.stack(sweep.frame_at(t), axis=1)
        gram = np.einsum("nij,nkj->nik", frames, frames)
        assert np.abs(gram - np.eye(3)).max() < 1e-9

    def test_planar_arc_out_of_plane_locked(self):
        # rotation-minimizing frames on a planar curve never twist about
        # the tangent, so each frame vector keeps a constant component
        # along the plane normal (here z)
        ang = np.linspace(0.0, np.pi / 2, 9)
        pts = np.stack([np.cos(ang), np.sin(ang), np.zeros_like(ang)], axis=1)
        sweep = meshing.build_sweep([node(p, 0.1) for p in pts])
        _, normal, binormal = sweep.frame_at(np.linspace(0.0, 1.0, 50))
        assert np.ptp(normal[:, 2]) < 1e-6
        assert np.ptp(binormal[:, 2]) < 1e-6
        # and exactly one of them is the plane normal itself
        assert max(np.abs(normal[0, 2]), np.abs(binormal[0, 2])) > 1 - 1e-6

    def test_node_params_increasing(self):
        sweep = meshing.build_sweep(straight_nodes(n=7))
        assert sweep.node_params[0] == 0.0 and sweep.node_params[-1] == 1.0
        assert np.all(np.diff(sweep.node_params) > 0)

    def test_coincident_nodes_collapsed(self):
        nodes = straight_nodes(n=4)
        nodes.insert(2, node(nodes[1].position.copy()))
        with pytest.warns(UserWarning, match="coincident"):
            sweep = meshing.build_sweep(nodes)
        assert sweep.node_params.size == 4

    def test_two_coincident_nodes_rejected(self):
        a, b = node([0, 0, 0]), node([0, 0, 0])
        with pytest.warns(UserWarning):
            with pytest.raises(meshing.MeshingError, match=">= 2 distinct"):
                meshing.build_sweep([a, b])

    def test_two_node_branch_is_exact_segment(self):
        sweep = meshing.build_sweep([node([0, 0, 0]), node([0, 0, 2])])
        pts = sweep.centerline(np.linspace(0.0, 1.0, 20))
        assert np.abs(pts[:, :2]).max() < 1e-9

    def test_radius_interpolates_between_nodes(self):
        nodes = [node([0, 0, 0], 1.0), node([0, 0, 2], 3.0)]
        sweep = meshing.build_sweep(nodes)
        mid = sweep.radius_at(0.5, 0.0)
        assert mid == pytest.approx(2.0, abs=1e-9)


class TestBranchDistance:
    def test_analytic_tube_values(self):
        sweep = meshing.build_sweep(straight_nodes())
        pts = np.array([[2.0, 0.0, 2.0],     # outside wall: +1
                        [0.5, 0.0, 2.0],     # inside: -0.5
                        [1.0, 0.0, 2.0],     # surface: 0
                        [0.0, 0.0, 5.0],     # beyond end cap: +1
                        [0.0, 0.0, 3.9]])    # inside near cap: -0.1
        d = meshing.branch_distance(sweep, pts)
        expect = [1.0, -0.5, 0.0, 1.0, -0.1]
        assert np.abs(d - expect).max() < 1e-6

    def test_sign_bands(self):
        sweep = meshing.build_sweep(straight_nodes())
        rng = np.random.default_rng(1)
        z = rng.uniform(0.2, 3.8, size=200)
        ang = rng.uniform(0.0, 2 * np.pi, size=200)
        rho_in = rng.uniform(0.0, 0.9, size=200)
        rho_out = rng.uniform(1.1, 3.0, size=200)
        inner = np.stack([rho_in * np.cos(ang), rho_in * np.sin(ang), z], axis=1)
        outer = np.stack([rho_out * np.cos(ang), rho_out * np.sin(ang), z], axis=1)
        assert (meshing.branch_distance(sweep, inner) < 0).all()
        assert (meshing.branch_distance(sweep, outer) > 0).all()

    def test_far_points_positive_bound(self):
        sweep = meshing.build_sweep(straight_nodes())
        d = meshing.branch_distance(sweep, np.array([[30.0, 0.0, 2.0]]),
                                    band=2.0)
        assert 0.0 < d[0] <= 29.0

    def test_union_matches_per_branch_min(self):
        a = meshing.build_sweep(straight_nodes())
        b = meshing.build_sweep([node([3.0, 0.0, z]) for z in
                                 np.linspace(0.0, 4.0, 5)])
        grid = meshing.sweep_sdf([a, b], resolution=16,
                                 bounds=([-2, -2, -1], [5, 2, 5]))
        pts_axes = [np.linspace(grid.lo[k], grid.hi[k], 16) for k in range(3)]
        pts = np.stack(np.meshgrid(*pts_axes, indexing="ij"),
                       axis=-1).reshape(-1, 3)
        rng = np.random.default_rng(2)
        pick = rng.choice(pts.shape[0], size=1000, replace=False)
        da = meshing.branch_distance(a, pts[pick])
        db = meshing.branch_distance(b, pts[pick])
        got = grid.values.reshape(-1)[pick]
        assert np.abs(got - np.minimum(da, db)).max() < 1e-9


class TestMarchingCubes:
    def sphere_grid(self, n=64, r=0.5):
        ax = np.linspace(-1.0, 1.0, n)
        x, y, z = np.meshgrid(ax, ax, ax, indexing="ij")
        values = np.sqrt(x ** 2 + y ** 2 + z ** 2) - r
        return meshing.ScalarGrid(values, np.full(3, -1.0), np.full(3, 1.0))

    def test_sphere_watertight_euler_two(self):
        mesh = meshing.marching_cubes(self.sphere_grid())
        assert mesh.is_watertight()
        assert mesh.euler_characteristic() == 2

    def test_sphere_vertex_accuracy(self):
        grid = self.sphere_grid()
        mesh = meshing.marching_cubes(grid)
        h = grid.spacing.max()
        err = np.abs(np.linalg.norm(mesh.vertices, axis=1) - 0.5)
        assert err.max() < 2 * h

    def test_outward_orientation(self):
        mesh = meshing.marching_cubes(self.sphere_grid())
        vol = mesh.signed_volume()
        assert vol == pytest.approx(4.0 / 3.0 * np.pi * 0.5 ** 3, rel=0.01)
        assert vol > 0

    def test_all_positive_grid_empty(self):
        ax = np.ones((8, 8, 8))
        grid = meshing.ScalarGrid(ax, np.zeros(3), np.ones(3))
        mesh = meshing.marching_cubes(grid)
        assert mesh.is_empty
        assert not mesh.is_watertight()

    def test_non_finite_grid_rejected(self):
        v = np.ones((4, 4, 4))
        v[0, 0, 0] = np.nan
        with pytest.raises(meshing.MeshingError, match="non-finite"):
            meshing.marching_cubes(
                meshing.ScalarGrid(v, np.zeros(3), np.ones(3)))


class TestPipeline:
    def test_tube_resolution_convergence(self):
        # doubling the grid resolution must shrink the max vertex error
        # against the analytic capped tube by >= 1.8x
        sweep = meshing.build_sweep(straight_nodes())
        bounds = (np.array([-1.6, -1.6, -0.6]), np.array([1.6, 1.6, 4.6]))
        errs = {}
        for n in (64, 128):
            grid = meshing.sweep_sdf([sweep], resolution=n, bounds=bounds)
            errs[n] = tube_error(meshing.marching_cubes(grid))
        assert errs[64] / errs[128] >= 1.8

    def test_mesh_tree_watertight(self):
        from vesselsynth.tree import VesselTree
        root = node([0, 0, 0], 0.4)
        mid = node([0, 0, 1.5], 0.35)
        root.left = mid
        mid.left = node([0.8, 0.2, 2.6], 0.25)
        mid.right = node([-0.8, -0.2, 2.6], 0.25)
        mesh = meshing.mesh_tree(VesselTree(root), resolution=48)
        assert not mesh.is_empty
        assert mesh.is_watertight()

    def test_mesh_tree_rejects_single_node(self):
        from vesselsynth.tree import VesselTree
        with pytest.raises(meshing.MeshingError, match="no branch"):
            meshing.mesh_tree(VesselTree(node([0, 0, 0])), resolution=16)


class TestObj:
    def test_single_triangle_layout(self, tmp_path):
        mesh = meshing.TriMesh(np.eye(3), np.array([[0, 1, 2]]))
        path = tmp_path / "tri.obj"
        meshing.export_obj(mesh, path)
        lines = path.read_text().splitlines()
        assert sum(l.startswith("v ") for l in lines) == 3
        assert sum(l.startswith("f ") for l in lines) == 1
        assert lines[-1] == "f 1 2 3"

    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(3)
        mesh = meshing.TriMesh(rng.normal(size=(10, 3)),
                               rng.integers(0, 10, size=(6, 3)))
        path = tmp_path / "m.obj"
        meshing.export_obj(mesh, path)
        back = meshing.load_obj(path)
        assert back.vertices.shape == mesh.vertices.shape
        assert np.array_equal(back.triangles, mesh.triangles)
        # 9 significant digits
        assert np.abs(back.vertices - mesh.vertices).max() < 1e-7

    def test_write_failure_surfaces_path(self, tmp_path):
        mesh = meshing.TriMesh(np.eye(3), np.array([[0, 1, 2]]))
        bad = tmp_path / "missing" / "m.obj"
        with pytest.raises(OSError, match="missing"):
            meshing.export_obj(mesh, bad)
