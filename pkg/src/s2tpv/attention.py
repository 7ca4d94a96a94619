"""Deformable attention and the three composite mechanisms built on it.

* ``deform_attn``: plane-to-plane deformable attention (queries sample a few
  offset points around reference locations in keyed 2D value maps).
* ``deform_attn_3d`` / ``sca``: TPV queries sampling multi-camera,
  multi-level image features at projected pillar points, averaged over the
  cameras that see the cell.
* ``cvha``: each plane attends to itself and the two orthogonal planes.
* ``tcvha_step`` / ``temporal_fuse``: the recurrent history fusion where
  queries come from channel-concatenated (previous fused, current spatial)
  planes and sample a history point as well as the current planes.
"""

from __future__ import annotations

from collections import deque
from functools import lru_cache
from typing import Hashable, Sequence

import numpy as np

from .errors import ConfigError, WiringError
from .geometry import PLANES, CameraModel, Grid, RigidTransform, project_refs, sample_ego_refs
from .nn import Linear, Module
from .tensor import (
    Tensor, concat, div, masked_softmax, mul, reshape, sample_maps, segment_sum, softmax, take_rows,
)
from .tpv import TpvState, cross_view_table


class DeformAttn(Module):
    """Projections for one deformable attention block.

    Offsets and attention logits are predicted from the query for every
    (head, level, reference, point).  Offsets are in grid units of the map
    being sampled.  Both predictors start at zero, so a fresh block samples
    exactly at its references with uniform weights.
    """

    def __init__(self, embed_dim: int, n_heads: int, n_refs: int, n_points: int, rng: np.random.Generator,
                 n_levels: int = 1, value_dim: int | None = None, own_value_proj: bool = True):
        if embed_dim % n_heads:
            raise ConfigError(f"embed_dim {embed_dim} not divisible by n_heads {n_heads}")
        self.embed_dim = embed_dim
        self.n_heads = n_heads
        self.n_refs = n_refs
        self.n_points = n_points
        self.n_levels = n_levels
        n_samples = n_heads * n_levels * n_refs * n_points
        self.value_proj = Linear(value_dim or embed_dim, embed_dim, rng) if own_value_proj else None
        self.offset_proj = Linear(embed_dim, 2 * n_samples, rng, init="zeros")
        self.weight_proj = Linear(embed_dim, n_samples, rng, init="zeros")
        self.output_proj = Linear(embed_dim, embed_dim, rng)

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    def project_values(self, value_map: Tensor) -> Tensor:
        """[..., Hm, Wm, Cv] -> [B, Hm, Wm, G, Cg] ready for ``sample_maps``."""
        if self.value_proj is None:
            raise WiringError("this block shares an external value projection")
        v = self.value_proj(value_map)
        return split_heads(v, self.n_heads)


def split_heads(v: Tensor, n_heads: int) -> Tensor:
    shape = v.shape
    lead = (1,) if len(shape) == 3 else shape[:1]
    Hm, Wm, C = shape[-3:]
    return reshape(v, lead + (Hm, Wm, n_heads, C // n_heads))


class ProjectedValues:
    """Lazily projects keyed value maps the first time a key is sampled."""

    def __init__(self, value_maps: dict, params: DeformAttn):
        self.value_maps = value_maps
        self.params = params
        self._cache: dict = {}

    def __getitem__(self, key):
        if key not in self._cache:
            if key not in self.value_maps:
                raise WiringError(f"no value map for reference target {key!r}")
            self._cache[key] = self.params.project_values(self.value_maps[key])
        return self._cache[key]


def deform_attn(query: Tensor, groups: Sequence[tuple[Hashable, np.ndarray]], value_maps,
                params: DeformAttn, return_weights: bool = False):
    """Deformable attention of ``query`` [Nq, C] (or [C]) over keyed value maps.

    groups: (value map key, reference points [Nq, R_g, 2]) in (row, col) grid
    coordinates of that map; the R_g summed over groups must equal
    ``params.n_refs``.  ``value_maps`` is a dict of raw [Hm, Wm, C] maps or a
    :class:`ProjectedValues` to share projections between calls.
    Attention weights are normalised per head over every (reference, point).
    """
    single = query.ndim == 1
    if single:
        query = reshape(query, (1, query.shape[0]))
        groups = [(k, np.asarray(r, dtype=np.float64)[None]) for k, r in groups]
    values = value_maps if isinstance(value_maps, ProjectedValues) else ProjectedValues(value_maps, params)
    Nq, C = query.shape
    G, P, R = params.n_heads, params.n_points, params.n_refs
    if sum(np.asarray(r).shape[1] for _, r in groups) != R:
        raise WiringError(f"reference count does not match n_refs={R}")
    Cg = C // G

    off = reshape(params.offset_proj(query), (Nq, G, R, P, 2))
    attn = softmax(reshape(params.weight_proj(query), (Nq, G, R * P)), axis=-1)
    attn = reshape(attn, (Nq, G, R, P))

    acc = None
    r0 = 0
    for key, refs in groups:
        refs = np.asarray(refs, dtype=np.float64)
        Rg = refs.shape[1]
        loc = off[:, :, r0:r0 + Rg] + refs[:, None, :, None, :]
        s = sample_maps(values[key], reshape(loc, (Nq, G, Rg * P, 2)))
        w = reshape(attn[:, :, r0:r0 + Rg], (Nq, G, Rg * P, 1))
        part = (s * w).sum(axis=2)
        acc = part if acc is None else acc + part
        r0 += Rg
    out = params.output_proj(reshape(acc, (Nq, G * Cg)))
    if single:
        out = reshape(out, (C,))
    if return_weights:
        return out, attn.data
    return out


def pixel_to_level(pix: np.ndarray, level: int) -> np.ndarray:
    """(u, v) pixels -> (row, col) coordinates on pyramid level ``level``."""
    s = float(2 ** level)
    return np.stack([pix[..., 1] / s - 0.5, pix[..., 0] / s - 0.5], axis=-1)


def deform_attn_3d(query: Tensor, pixel_refs: np.ndarray, ref_valid: np.ndarray, level_values: Sequence[Tensor],
                   cam_index: np.ndarray, params: DeformAttn, return_weights: bool = False):
    """Deformable attention into multi-level camera features.

    query [M, C]; pixel_refs [M, R, 2] level-0 pixels (u, v); ref_valid [M, R];
    level_values[l]: projected maps [n_cam, H_l, W_l, G, Cg]; cam_index [M]
    selects the camera each query row samples.  Weights are normalised per
    head jointly over (levels, valid refs, points); invalid refs get zero.
    """
    M, C = query.shape
    G, P, R, L = params.n_heads, params.n_points, params.n_refs, params.n_levels
    if len(level_values) != L:
        raise WiringError(f"expected {L} pyramid levels, got {len(level_values)}")
    if pixel_refs.shape[:2] != (M, R):
        raise WiringError(f"pixel refs {pixel_refs.shape} do not match ({M}, {R})")
    Cg = C // G
    off = reshape(params.offset_proj(query), (M, G, L, R, P, 2))
    mask = np.broadcast_to(ref_valid[:, None, None, :, None], (M, G, L, R, P)).reshape(M, G, L * R * P)
    attn = masked_softmax(reshape(params.weight_proj(query), (M, G, L * R * P)), mask, axis=-1)
    attn = reshape(attn, (M, G, L, R, P))
    acc = None
    for lvl in range(L):
        base = pixel_to_level(pixel_refs, lvl)
        loc = off[:, :, lvl] + base[:, None, :, None, :]
        s = sample_maps(level_values[lvl], reshape(loc, (M, G, R * P, 2)), cam_index)
        w = reshape(attn[:, :, lvl], (M, G, R * P, 1))
        part = (s * w).sum(axis=2)
        acc = part if acc is None else acc + part
    out = params.output_proj(reshape(acc, (M, C)))
    if return_weights:
        return out, attn.data
    return out


class SpatialCrossAttention(Module):
    """One shared value projection of the image features, per-plane samplers."""

    def __init__(self, embed_dim: int, feat_dim: int, n_heads: int, n_points: int, n_levels: int,
                 n_refs: dict[str, int], rng: np.random.Generator):
        self.value_proj = Linear(feat_dim, embed_dim, rng)
        self.planes = {p: DeformAttn(embed_dim, n_heads, n_refs[p], n_points, rng, n_levels=n_levels,
                                     own_value_proj=False) for p in PLANES}
        self.n_heads = n_heads
        self.n_refs = dict(n_refs)

    def project_pyramid(self, pyramid: Sequence[Tensor]) -> list[Tensor]:
        """Per level [n_cam, H_l, W_l, F] -> [n_cam, H_l, W_l, G, Cg]."""
        return [split_heads(self.value_proj(level), self.n_heads) for level in pyramid]


def camera_refs(ego_refs: np.ndarray, cameras: Sequence[CameraModel], views: Sequence[RigidTransform]):
    """Project [..., R, 3] refs into every camera: pixels [n_cam, ..., R, 2], valid [n_cam, ..., R]."""
    pix, valid = zip(*(project_refs(ego_refs, v, c) for c, v in zip(cameras, views)))
    return np.stack(pix), np.stack(valid)


def sca(queries: Tensor, pixel_refs: np.ndarray, ref_valid: np.ndarray, level_values: Sequence[Tensor],
        params: DeformAttn, passthrough: bool = True) -> Tensor:
    """Spatial cross-attention for one plane.

    queries [A, B, C]; pixel_refs [n_cam, A, B, R, 2]; ref_valid [n_cam, A, B, R];
    level_values from :meth:`SpatialCrossAttention.project_pyramid`.
    Each cell averages ``deform_attn_3d`` over its hit cameras.  Cells no camera
    sees return their query when ``passthrough`` is set, else zeros.
    """
    A, B, C = queries.shape
    n_cam = pixel_refs.shape[0]
    Nq = A * B
    R = pixel_refs.shape[3]
    pix = pixel_refs.reshape(n_cam, Nq, R, 2)
    valid = ref_valid.reshape(n_cam, Nq, R)
    hit = valid.any(axis=-1)  # [n_cam, Nq]
    q_idx, cam_idx = np.nonzero(hit.T)
    qflat = reshape(queries, (Nq, C))
    count = hit.sum(axis=0)
    keep = (count == 0).astype(np.float64)[:, None]
    if len(q_idx) == 0:
        out = mul(qflat, keep) if passthrough else Tensor(np.zeros((Nq, C)))
        return reshape(out, (A, B, C))
    per_pair = deform_attn_3d(take_rows(qflat, q_idx), pix[cam_idx, q_idx], valid[cam_idx, q_idx],
                              level_values, cam_idx, params)
    mean = div(segment_sum(per_pair, q_idx, Nq), np.maximum(count, 1).astype(np.float64)[:, None])
    out = mean + mul(qflat, keep) if passthrough else mean
    return reshape(out, (A, B, C))


class CrossViewHybridAttention(Module):
    """Self-attention across the three planes; one block shared by all planes."""

    def __init__(self, embed_dim: int, n_heads: int, n_points: int, n_cross: int, rng: np.random.Generator):
        self.n_cross = n_cross
        self.attn = DeformAttn(embed_dim, n_heads, 1 + 2 * n_cross, n_points, rng)


@lru_cache(maxsize=None)
def _table(plane: str, grid_shape: tuple, n_cross: int):
    return tuple(cross_view_table(plane, grid_shape, n_cross))


def cvha(tpv: TpvState, params: CrossViewHybridAttention, return_weights: bool = False):
    """Every plane cell attends to its own plane and the two orthogonal planes."""
    grid_shape = tpv.grid_shape
    C = tpv.embed_dim
    values = ProjectedValues({p: tpv[p] for p in PLANES}, params.attn)
    outs, weights = {}, {}
    for plane in PLANES:
        q = tpv[plane]
        A, B, _ = q.shape
        res = deform_attn(reshape(q, (A * B, C)), _table(plane, grid_shape, params.n_cross), values, params.attn,
                          return_weights=return_weights)
        if return_weights:
            res, weights[plane] = res
        outs[plane] = reshape(res, (A, B, C))
    out = TpvState(outs["hw"], outs["dh"], outs["wd"])
    return (out, weights) if return_weights else out


class TemporalCrossViewHybridAttention(Module):
    """Fuses (previous fused, current spatial) planes; shared by all planes.

    ``fuse_proj`` maps the channel concatenation [prev | cur] (2C) to the C-dim
    query.  References per query: the aligned history point, the self point,
    and ``n_cross`` points in each of the two other current planes.
    """

    def __init__(self, embed_dim: int, n_heads: int, n_points: int, n_cross: int, rng: np.random.Generator):
        self.n_cross = n_cross
        self.fuse_proj = Linear(2 * embed_dim, embed_dim, rng)
        self.attn = DeformAttn(embed_dim, n_heads, 2 + 2 * n_cross, n_points, rng)


def tcvha_step(prev_fused: TpvState, cur_spatial: TpvState, params: TemporalCrossViewHybridAttention,
               return_weights: bool = False):
    if prev_fused.grid_shape != cur_spatial.grid_shape or prev_fused.embed_dim != cur_spatial.embed_dim:
        raise WiringError("tcvha_step: previous and current states differ in shape")
    grid_shape = cur_spatial.grid_shape
    C = cur_spatial.embed_dim
    maps = {("prev", p): prev_fused[p] for p in PLANES}
    maps.update({("cur", p): cur_spatial[p] for p in PLANES})
    values = ProjectedValues(maps, params.attn)
    outs, weights = {}, {}
    for plane in PLANES:
        A, B, _ = cur_spatial[plane].shape
        q = params.fuse_proj(concat([prev_fused[plane], cur_spatial[plane]], axis=-1))
        table = _table(plane, grid_shape, params.n_cross)
        groups = [(("prev", plane), table[0][1])] + [(("cur", target), refs) for target, refs in table]
        res = deform_attn(reshape(q, (A * B, C)), groups, values, params.attn, return_weights=return_weights)
        if return_weights:
            res, weights[plane] = res
        outs[plane] = reshape(res, (A, B, C))
    out = TpvState(outs["hw"], outs["dh"], outs["wd"])
    return (out, weights) if return_weights else out


def temporal_fuse(history: Sequence[TpvState], params: TemporalCrossViewHybridAttention) -> TpvState:
    """Recurrent fusion over spatial states ordered oldest -> newest.

    The oldest state is fused with itself; each later state is fused with the
    running result.  ``len(history)`` steps are run in total.
    """
    if not history:
        raise ConfigError("temporal_fuse needs at least one state")
    fused = tcvha_step(history[0], history[0], params)
    for state in history[1:]:
        fused = tcvha_step(fused, state, params)
    return fused


class HistoryQueue:
    """Bounded FIFO of past frame entries, oldest first."""

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ConfigError("history capacity must be >= 0")
        self.capacity = capacity
        self._items: deque = deque(maxlen=capacity)

    def push(self, entry) -> None:
        if self.capacity:
            self._items.append(entry)

    def entries(self) -> list:
        return list(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def clear(self) -> None:
        self._items.clear()


def push_history(queue: HistoryQueue, entry) -> None:
    queue.push(entry)


def plane_ego_refs(grid: Grid, n_ref: dict[str, int]) -> dict[str, np.ndarray]:
    return {p: sample_ego_refs(p, grid, n_ref[p]) for p in PLANES}
