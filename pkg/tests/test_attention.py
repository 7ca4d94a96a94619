import numpy as np
import pytest

from s2tpv.attention import (
    CrossViewHybridAttention, DeformAttn, HistoryQueue, SpatialCrossAttention, TemporalCrossViewHybridAttention,
    camera_refs, cvha, deform_attn, deform_attn_3d, plane_ego_refs, push_history, sca, tcvha_step, temporal_fuse,
)
from s2tpv.errors import ConfigError, WiringError
from s2tpv.geometry import CameraModel, Grid, camera_mount
from s2tpv.oracles import cvha_loop, deform_attn_loop, sca_loop, tcvha_loop
from s2tpv.tensor import Tensor
from s2tpv.tpv import TpvState

SEEDS = range(50)
H, W, D, C = 4, 4, 2, 4


def jitter(module, rng, scale=0.5):
    """Give zero-initialised predictors random values so offsets and weights matter."""
    for _, p in module.named_params():
        p.data[...] = rng.normal(0.0, scale, size=p.shape)


def random_state(rng):
    return TpvState.from_arrays(rng.normal(size=(H, W, C)), rng.normal(size=(D, H, C)), rng.normal(size=(W, D, C)))


def arrays(state):
    return {p: state[p].data for p in ("hw", "dh", "wd")}


class TestDeformAttn:
    def test_fresh_block_samples_references_uniformly(self):
        rng = np.random.default_rng(0)
        blk = DeformAttn(4, 2, 2, 3, rng)
        q = Tensor(rng.normal(size=(5, 4)))
        refs = rng.uniform(0, 3, size=(5, 2, 2))
        _, w = deform_attn(q, [("m", refs)], {"m": Tensor(rng.normal(size=(4, 4, 4)))}, blk, return_weights=True)
        np.testing.assert_allclose(w, 1.0 / 6.0)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        blk = DeformAttn(C, 2, 3, 2, rng)
        jitter(blk, rng)
        maps = {"a": rng.normal(size=(4, 4, C)), "b": rng.normal(size=(2, 4, C))}
        q = rng.normal(size=(6, C))
        ra = rng.uniform(-0.5, 3.5, size=(6, 2, 2))
        rb = rng.uniform(-0.5, 3.5, size=(6, 1, 2))
        out, w = deform_attn(Tensor(q), [("a", ra), ("b", rb)], {k: Tensor(v) for k, v in maps.items()}, blk,
                             return_weights=True)
        for i in range(6):
            ref = deform_attn_loop(q[i], [("a", ra[i]), ("b", rb[i])], maps, blk)
            assert np.abs(out.data[i] - ref).max() < 1e-9
        assert np.abs(w.sum(axis=(2, 3)) - 1.0).max() < 1e-6

    def test_reference_count_mismatch(self):
        rng = np.random.default_rng(1)
        blk = DeformAttn(C, 2, 3, 1, rng)
        with pytest.raises(WiringError):
            deform_attn(Tensor(np.zeros((1, C))), [("a", np.zeros((1, 2, 2)))], {"a": Tensor(np.zeros((2, 2, C)))},
                        blk)

    def test_missing_value_map(self):
        rng = np.random.default_rng(2)
        blk = DeformAttn(C, 2, 1, 1, rng)
        with pytest.raises(WiringError):
            deform_attn(Tensor(np.zeros((1, C))), [("x", np.zeros((1, 1, 2)))], {"a": Tensor(np.zeros((2, 2, C)))},
                        blk)

    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            DeformAttn(5, 2, 1, 1, np.random.default_rng(0))


def small_rig(n_cam=3, size=8):
    yaws = 2 * np.pi * np.arange(n_cam) / n_cam
    return [CameraModel.pinhole(size, size, 90.0, camera_mount(y, 1.0, 0.2)) for y in yaws]


class TestSpatialCrossAttention:
    grid = Grid(H, W, D, ((-4, 4), (-4, 4), (-0.5, 2.5)))
    n_ref = {"hw": 2, "dh": 3, "wd": 3}

    def setup_case(self, seed):
        rng = np.random.default_rng(seed)
        cams = small_rig()
        params = SpatialCrossAttention(C, 3, 2, 2, 2, self.n_ref, rng)
        jitter(params, rng, 0.4)
        pyramid = [rng.normal(size=(3, 8, 8, 3)), rng.normal(size=(3, 4, 4, 3))]
        refs = plane_ego_refs(self.grid, self.n_ref)
        views = [c.extrinsic.inverse() for c in cams]
        return rng, cams, params, pyramid, refs, views

    @pytest.mark.parametrize("seed", SEEDS)
    def test_matches_loop_oracle(self, seed):
        rng, cams, params, pyramid, refs, views = self.setup_case(seed)
        state = random_state(rng)
        levels = params.project_pyramid([Tensor(x) for x in pyramid])
        for plane in ("hw", "dh", "wd"):
            pix, valid = camera_refs(refs[plane], cams, views)
            out = sca(state[plane], pix, valid, levels, params.planes[plane]).data
            ref = sca_loop(state[plane].data, pix, valid, pyramid, params, plane)
            assert np.abs(out - ref).max() < 1e-9

    def test_unhit_cells_pass_through_or_zero(self):
        rng, cams, params, pyramid, refs, views = self.setup_case(0)
        state = random_state(rng)
        levels = params.project_pyramid([Tensor(x) for x in pyramid])
        pix, valid = camera_refs(refs["hw"], cams, views)
        valid[:, 0, 0] = False
        out = sca(state.hw, pix, valid, levels, params.planes["hw"]).data
        np.testing.assert_array_equal(out[0, 0], state.hw.data[0, 0])
        out0 = sca(state.hw, pix, valid, levels, params.planes["hw"], passthrough=False).data
        np.testing.assert_array_equal(out0[0, 0], 0.0)

    def test_weights_normalised_over_valid_refs(self):
        rng, cams, params, pyramid, refs, views = self.setup_case(3)
        levels = params.project_pyramid([Tensor(x) for x in pyramid])
        pix, valid = camera_refs(refs["dh"], cams, views)
        pix = pix.reshape(3, -1, 3, 2)
        valid = valid.reshape(3, -1, 3)
        cam, q = np.nonzero(valid.any(-1))
        query = Tensor(rng.normal(size=(len(q), C)))
        _, w = deform_attn_3d(query, pix[cam, q], valid[cam, q], levels, cam, params.planes["dh"],
                              return_weights=True)
        assert np.abs(w.sum(axis=(2, 3, 4)) - 1.0).max() < 1e-6
        invalid = ~valid[cam, q]
        assert np.all(w.transpose(0, 1, 3, 2, 4)[np.broadcast_to(invalid[:, None, :], (len(q), 2, 3))] == 0)


class TestCrossViewHybrid:
    @pytest.mark.parametrize("seed", SEEDS)
    def test_cvha_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        params = CrossViewHybridAttention(C, 2, 2, 2, rng)
        jitter(params, rng, 0.4)
        state = random_state(rng)
        out, weights = cvha(state, params, return_weights=True)
        ref = cvha_loop(arrays(state), params)
        for p in ("hw", "dh", "wd"):
            assert np.abs(out[p].data - ref[p]).max() < 1e-9
            assert np.abs(weights[p].sum(axis=(2, 3)) - 1.0).max() < 1e-6

    @pytest.mark.parametrize("seed", SEEDS)
    def test_tcvha_step_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        params = TemporalCrossViewHybridAttention(C, 2, 2, 2, rng)
        jitter(params, rng, 0.4)
        prev, cur = random_state(rng), random_state(rng)
        out, weights = tcvha_step(prev, cur, params, return_weights=True)
        ref = tcvha_loop(arrays(prev), arrays(cur), params)
        for p in ("hw", "dh", "wd"):
            assert np.abs(out[p].data - ref[p]).max() < 1e-9
            assert np.abs(weights[p].sum(axis=(2, 3)) - 1.0).max() < 1e-6

    def test_temporal_fuse_recursion(self):
        rng = np.random.default_rng(5)
        params = TemporalCrossViewHybridAttention(C, 2, 2, 2, rng)
        jitter(params, rng, 0.3)
        hist = [random_state(rng) for _ in range(3)]
        fused = temporal_fuse(hist, params)
        manual = tcvha_step(hist[0], hist[0], params)
        for s in hist[1:]:
            manual = tcvha_step(manual, s, params)
        np.testing.assert_array_equal(fused.hw.data, manual.hw.data)

    def test_temporal_fuse_empty(self):
        with pytest.raises(ConfigError):
            temporal_fuse([], TemporalCrossViewHybridAttention(C, 2, 1, 1, np.random.default_rng(0)))

    def test_shape_mismatch(self):
        rng = np.random.default_rng(6)
        params = TemporalCrossViewHybridAttention(C, 2, 1, 1, rng)
        other = TpvState.zeros(3, 4, 2, C)
        with pytest.raises(WiringError):
            tcvha_step(random_state(rng), other, params)


class TestHistoryQueue:
    def test_eviction(self):
        q = HistoryQueue(3)
        for i in range(4):
            push_history(q, i)
        assert len(q) == 3 and q.entries() == [1, 2, 3]

    def test_single_push(self):
        q = HistoryQueue(2)
        push_history(q, "a")
        assert q.entries() == ["a"]

    def test_matches_reference_deque(self):
        from collections import deque

        rng = np.random.default_rng(7)
        cap = 5
        q, ref = HistoryQueue(cap), deque(maxlen=cap)
        for v in rng.integers(0, 1000, size=100):
            push_history(q, int(v))
            ref.append(int(v))
            assert q.entries() == list(ref)

    def test_zero_capacity_and_negative(self):
        q = HistoryQueue(0)
        q.push(1)
        assert len(q) == 0
        with pytest.raises(ConfigError):
            HistoryQueue(-1)
