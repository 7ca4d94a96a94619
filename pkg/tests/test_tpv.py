import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from s2tpv.errors import NumericError, WiringError
from s2tpv.geometry import Grid
from s2tpv.oracles import bilinear_scalar, cross_refs_loop
from s2tpv.tensor import Tensor
from s2tpv.tpv import (
    TpvState, aggregate_point, aggregate_voxels, cross_view_refs, cross_view_table, init_queries, query_count,
)


def random_state(rng, H, W, D, C):
    return TpvState.from_arrays(rng.normal(size=(H, W, C)), rng.normal(size=(D, H, C)), rng.normal(size=(W, D, C)))


class TestQueries:
    @pytest.mark.parametrize("H,W,D", [(100, 100, 8), (32, 32, 4), (4, 4, 2), (1, 1, 1), (7, 3, 5)])
    def test_query_count(self, H, W, D):
        q = init_queries(H, W, D, 4, rng_seed=0)
        assert q.count == query_count(H, W, D) == H * W + D * H + W * D

    def test_base_scale_count(self):
        assert query_count(100, 100, 8) == 11600
        assert 100 * 100 * 8 == 80000

    def test_init_is_seeded(self):
        a, b = init_queries(3, 4, 2, 5, 11), init_queries(3, 4, 2, 5, 11)
        np.testing.assert_array_equal(a.q_hw.data, b.q_hw.data)
        assert a.q_dh.shape == (2, 3, 5) and a.q_wd.shape == (4, 2, 5)

    def test_inconsistent_planes(self):
        with pytest.raises(WiringError):
            TpvState.from_arrays(np.zeros((3, 4, 2)), np.zeros((2, 4, 2)), np.zeros((4, 2, 2)))


class TestCrossViewRefs:
    @pytest.mark.parametrize("plane", ["hw", "dh", "wd"])
    def test_matches_loop_construction(self, plane):
        H, W, D, n = 5, 4, 3, 4
        table = cross_view_table(plane, (H, W, D), n)
        A, B = {"hw": (H, W), "dh": (D, H), "wd": (W, D)}[plane]
        for a in range(A):
            for b in range(B):
                ref = cross_refs_loop(plane, a, b, H, W, D, n)
                got = cross_view_refs(plane, (a, b), (H, W, D), n)
                assert list(got) == [t for t, _ in ref]
                for target, pts in ref:
                    np.testing.assert_allclose(got[target], np.array(pts, dtype=float), atol=1e-15)
        assert table[0][0] == plane

    def test_refs_stay_inside_planes(self):
        H, W, D = 6, 5, 4
        dims = {"hw": (H, W), "dh": (D, H), "wd": (W, D)}
        for plane in dims:
            for target, refs in cross_view_table(plane, (H, W, D), 4):
                A, B = dims[target]
                assert refs[..., 0].min() >= 0 and refs[..., 0].max() <= A - 1
                assert refs[..., 1].min() >= 0 and refs[..., 1].max() <= B - 1


class TestAggregation:
    def test_voxels_sum_of_three_planes(self):
        rng = np.random.default_rng(0)
        s = random_state(rng, 3, 4, 2, 5)
        v = aggregate_voxels(s).data
        for h in range(3):
            for w in range(4):
                for d in range(2):
                    ref = s.hw.data[h, w] + s.dh.data[d, h] + s.wd.data[w, d]
                    np.testing.assert_allclose(v[h, w, d], ref, atol=1e-15)

    def test_point_at_centre_equals_voxel(self):
        rng = np.random.default_rng(1)
        grid = Grid(4, 4, 2)
        s = random_state(rng, 4, 4, 2, 3)
        centres = grid.voxel_centers().reshape(-1, 3)
        pts = aggregate_point(s, grid, centres).data
        np.testing.assert_array_equal(pts, aggregate_voxels(s).data.reshape(-1, 3))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_point_matches_scalar_bilinear(self, seed):
        rng = np.random.default_rng(seed)
        grid = Grid(4, 5, 3)
        s = random_state(rng, 4, 5, 3, 2)
        xyz = rng.uniform([-17, -17, -1], [17, 17, 4])
        g = (xyz - grid.lower) / grid.pitch - 0.5
        ref = (bilinear_scalar(s.hw.data, g[0], g[1]) + bilinear_scalar(s.dh.data, g[2], g[0])
               + bilinear_scalar(s.wd.data, g[1], g[2]))
        np.testing.assert_allclose(aggregate_point(s, grid, xyz).data, ref, atol=1e-12)

    def test_non_finite_point(self):
        s = TpvState.zeros(2, 2, 2, 1)
        with pytest.raises(NumericError):
            aggregate_point(s, Grid(2, 2, 2), [np.nan, 0.0, 0.0])

    def test_add_and_map(self):
        s = TpvState.zeros(2, 3, 1, 2)
        t = s.map(lambda x: x + 1.0) + s
        assert np.all(t.hw.data == 1.0) and t.grid_shape == (2, 3, 1) and t.embed_dim == 2
        assert isinstance(t.dh, Tensor)
