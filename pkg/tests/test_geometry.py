import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from s2tpv.errors import ConfigError, GeometryError
from s2tpv.geometry import (
    CameraModel, Grid, RigidTransform, bev_source_coords, camera_mount, hit_views, project_refs,
    sample_ego_refs, vvt, warp_bev,
)
from s2tpv.oracles import project_scalar, vvt_expanded
from s2tpv.tensor import Tensor


def random_pose(rng, planar=False):
    if planar:
        return RigidTransform.planar(*rng.uniform(-20, 20, size=2), rng.uniform(-np.pi, np.pi))
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    rot = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    return RigidTransform(rot, rng.uniform(-10, 10, size=3))


class TestRigidTransform:
    def test_inverse_compose_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            t = random_pose(rng)
            np.testing.assert_allclose(t.compose(t.inverse()).matrix(), np.eye(4), atol=1e-12)

    def test_compose_matches_matrix_product(self):
        rng = np.random.default_rng(1)
        a, b = random_pose(rng), random_pose(rng)
        np.testing.assert_allclose(a.compose(b).matrix(), a.matrix() @ b.matrix(), atol=1e-12)
        p = rng.normal(size=(5, 3))
        np.testing.assert_allclose(a.compose(b).apply(p), a.apply(b.apply(p)), atol=1e-12)

    @pytest.mark.parametrize("rot", [np.diag([1.0, 1.0, -1.0]), np.diag([1.0, 2.0, 1.0])])
    def test_validate_rejects(self, rot):
        with pytest.raises(GeometryError):
            RigidTransform(rot, np.zeros(3)).validate()

    def test_planar_yaw_round_trip(self):
        assert RigidTransform.planar(1.0, 2.0, 0.7).yaw() == pytest.approx(0.7, abs=1e-15)


class TestVirtualView:
    def test_all_identity(self):
        i = RigidTransform.identity()
        v = vvt(i, i, i)
        np.testing.assert_array_equal(v.matrix(), np.eye(4))

    def test_same_pose_reduces_to_camera_inverse(self):
        rng = np.random.default_rng(2)
        cam, pose = random_pose(rng), random_pose(rng)
        np.testing.assert_allclose(vvt(cam, pose, pose).matrix(), cam.inverse().matrix(), atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_matches_expanded_formula(self, seed):
        rng = np.random.default_rng(seed)
        cam, past, cur = random_pose(rng), random_pose(rng), random_pose(rng)
        r, t = vvt_expanded(cam.rotation, cam.translation, past.rotation, past.translation,
                            cur.rotation, cur.translation)
        v = vvt(cam, past, cur)
        assert np.abs(v.rotation - r).max() < 1e-9
        assert np.abs(v.translation - t).max() < 1e-9

    def test_rejects_bad_rotation(self):
        bad = RigidTransform(np.diag([1.0, 1.0, 2.0]), np.zeros(3))
        i = RigidTransform.identity()
        with pytest.raises(GeometryError):
            vvt(bad, i, i)


class TestProjection:
    cam = CameraModel.pinhole(64, 48, 70.0, camera_mount(0.0, 1.5))

    def test_optical_axis_hits_principal_point(self):
        view = self.cam.extrinsic.inverse()
        pix, valid = project_refs(np.array([[10.0, 0.0, 1.5]]), view, self.cam)
        np.testing.assert_allclose(pix[0], [32.0, 24.0], atol=1e-12)
        assert valid[0]

    def test_behind_camera_invalid(self):
        pix, valid = project_refs(np.array([[-5.0, 0.0, 1.5], [0.05, 0.0, 1.5]]),
                                  self.cam.extrinsic.inverse(), self.cam)
        assert not valid.any()
        np.testing.assert_array_equal(pix, -1.0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_matches_scalar_pinhole(self, seed):
        rng = np.random.default_rng(seed)
        view = random_pose(rng)
        pts = rng.uniform(-20, 20, size=(30, 3))
        pix, valid = project_refs(pts, view, self.cam)
        for p, (u, v), ok in zip(pts, pix, valid):
            ref = project_scalar(p, view, self.cam)
            if ref is None:
                assert not ok
                continue
            assert abs(u - ref[0]) < 1e-9 and abs(v - ref[1]) < 1e-9
            assert ok == (0 <= ref[0] < 64 and 0 <= ref[1] < 48)

    def test_hit_views_requires_cameras(self):
        with pytest.raises(ConfigError):
            hit_views(np.zeros((1, 1, 1, 3)), [], [])

    def test_hit_views_six_camera_ring_sees_everything_nearby(self):
        cams = [CameraModel.pinhole(64, 64, 70.0, camera_mount(y, 1.5, 0.5))
                for y in 2 * np.pi * np.arange(6) / 6]
        grid = Grid(8, 8, 2)
        refs = sample_ego_refs("hw", grid, 4)
        hits = hit_views(refs, cams, [c.extrinsic.inverse() for c in cams])
        assert hits.shape == (6, 8, 8)
        assert hits.any(axis=0).all()


class TestGrid:
    def test_centres_map_to_integers_exactly(self):
        g = Grid(32, 32, 4)
        c = g.metric_to_grid(g.voxel_centers())
        idx = np.stack(np.meshgrid(np.arange(32), np.arange(32), np.arange(4), indexing="ij"), -1)
        np.testing.assert_array_equal(c, idx)

    def test_voxel_index_and_bounds(self):
        g = Grid(4, 4, 2, ((0, 4), (0, 4), (0, 2)))
        idx, inside = g.voxel_index(np.array([[0.5, 3.99, 1.0], [4.0, 0.0, 0.0], [-0.01, 1, 1]]))
        np.testing.assert_array_equal(idx[0], [0, 3, 1])
        np.testing.assert_array_equal(inside, [True, False, False])

    def test_degenerate_bounds(self):
        with pytest.raises(GeometryError):
            Grid(2, 2, 2, ((0, 0), (0, 1), (0, 1)))

    @pytest.mark.parametrize("plane,n", [("hw", 4), ("dh", 8), ("wd", 3)])
    def test_pillar_refs_are_sub_cell_centres(self, plane, n):
        g = Grid(6, 5, 3)
        refs = sample_ego_refs(plane, g, n)
        axis = {"hw": 2, "dh": 1, "wd": 0}[plane]
        lo, hi = g.bounds[axis]
        depths = refs[0, 0, :, axis]
        np.testing.assert_allclose(depths, lo + (np.arange(n) + 0.5) * (hi - lo) / n)
        assert np.all(np.diff(depths) > 0)


class TestBevWarp:
    grid = Grid(8, 8, 2)

    def test_zero_motion_is_identity(self):
        rng = np.random.default_rng(3)
        bev = rng.normal(size=(8, 8, 3))
        pose = RigidTransform.planar(3.0, -2.0, 0.4)
        out = warp_bev(Tensor(bev), pose, pose, self.grid).data
        np.testing.assert_allclose(out, bev, atol=1e-12)

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_forward_translation_shifts_rows(self, k):
        bev = np.random.default_rng(4).normal(size=(8, 8, 2))
        pitch = self.grid.pitch[0]
        out = warp_bev(Tensor(bev), RigidTransform.identity(), RigidTransform.planar(k * pitch, 0, 0), self.grid).data
        np.testing.assert_array_equal(out[: 8 - k], bev[k:])
        assert np.all(out[8 - k:] == 0.0)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-6, 6), st.floats(-6, 6), st.floats(-3.2, 3.2))
    def test_warp_matches_vvt_under_translation(self, dx, dy, yaw):
        prev = RigidTransform.planar(1.0, 2.0, yaw)
        cur = RigidTransform.planar(1.0 + dx, 2.0 + dy, yaw)
        src = bev_source_coords(prev, cur, self.grid)
        centres = self.grid.voxel_centers()[:, :, 0]
        via_vvt = self.grid.metric_to_grid(vvt(RigidTransform.identity(), prev, cur).apply(centres))[..., :2]
        assert np.abs(src - via_vvt).max() < 1e-9

    def test_quarter_turn_on_symmetric_field(self):
        g = Grid(8, 8, 2)
        c = g.voxel_centers()[:, :, 0, :2]
        field = np.exp(-np.linalg.norm(c, axis=-1) / 5.0)[..., None] * np.ones(3)
        out = warp_bev(Tensor(field), RigidTransform.identity(), RigidTransform.planar(0, 0, np.pi / 2), g).data
        np.testing.assert_allclose(out, field, atol=1e-9)
