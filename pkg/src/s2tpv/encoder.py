"""The N-layer spatiotemporal TPV encoder and its warp-based variant.

Layer wiring (pre-norm residual):

    x <- x + CVHA(norm1(x))
    T_k = SCA(norm2(x), frame k seen through the virtual view of the current ego)
    x <- x + temporal_fuse([T_{t-M} .. T_t])
    x <- x + FFN(norm3(x))

The warp variant replaces the self-attention step with a single TCVHA step
whose history is last call's output BEV plane resampled into the current ego
frame, and lifts only the current frame.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .attention import (
    CrossViewHybridAttention, SpatialCrossAttention, TemporalCrossViewHybridAttention, camera_refs, cvha,
    plane_ego_refs, sca, tcvha_step, temporal_fuse,
)
from .errors import ConfigError, WiringError
from .geometry import PLANES, Grid, RigidTransform, vvt, warp_bev
from .nn import LayerNorm, Linear, Module
from .tensor import Tensor, gelu
from .tpv import TpvQueries, TpvState, query_count

VARIANTS = ("unified", "warp")


@dataclass
class EncoderConfig:
    H: int = 32
    W: int = 32
    D: int = 4
    embed_dim: int = 32
    n_layers: int = 1
    temporal_steps: int = 1
    n_ref: dict = field(default_factory=lambda: {"hw": 4, "dh": 8, "wd": 8})
    n_cross: int = 4
    n_heads: int = 4
    n_points: int = 2
    ffn_hidden: int | None = None
    variant: str = "unified"
    feat_dim: int = 16
    n_levels: int = 2
    bounds: tuple = ((-16.0, 16.0), (-16.0, 16.0), (-0.5, 3.5))

    def __post_init__(self):
        self.n_ref = {p: int(self.n_ref[p]) for p in PLANES}
        self.bounds = tuple(tuple(float(v) for v in ax) for ax in self.bounds)
        self.validate()

    def validate(self) -> "EncoderConfig":
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.temporal_steps < 0:
            raise ConfigError("temporal_steps must be >= 0")
        if min(self.H, self.W, self.D, self.embed_dim, self.n_heads, self.n_points, self.n_levels) < 1:
            raise ConfigError("grid, width, head, point and level counts must be positive")
        if self.embed_dim % self.n_heads:
            raise ConfigError("embed_dim must be divisible by n_heads")
        if min(self.n_ref.values()) < 1 or self.n_cross < 1:
            raise ConfigError("reference counts must be positive")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        return self

    @property
    def hidden(self) -> int:
        return self.ffn_hidden or 2 * self.embed_dim

    @property
    def grid(self) -> Grid:
        return Grid(self.H, self.W, self.D, self.bounds)

    @property
    def query_count(self) -> int:
        return query_count(self.H, self.W, self.D)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bounds"] = [list(b) for b in self.bounds]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown encoder config keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def base(cls, **kw) -> "EncoderConfig":
        """Full-size configuration with C = 256."""
        cfg = dict(H=100, W=100, D=8, embed_dim=256, n_layers=3, n_ref={"hw": 4, "dh": 32, "wd": 32},
                   n_heads=8, n_points=4, n_levels=4, feat_dim=256,
                   bounds=((-51.2, 51.2), (-51.2, 51.2), (-5.0, 3.0)))
        cfg.update(kw)
        return cls(**cfg)

    @classmethod
    def small(cls, **kw) -> "EncoderConfig":
        """Full-size grid with the reduced C = 128 embedding."""
        return cls.base(embed_dim=128, **kw)

    @classmethod
    def desk(cls, **kw) -> "EncoderConfig":
        return cls(**kw)


PRESETS = {"base": EncoderConfig.base, "small": EncoderConfig.small, "desk": EncoderConfig.desk}


class EncoderLayer(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        C = cfg.embed_dim
        self.norm1 = LayerNorm(C)
        self.cvha = CrossViewHybridAttention(C, cfg.n_heads, cfg.n_points, cfg.n_cross, rng)
        self.norm2 = LayerNorm(C)
        self.sca = SpatialCrossAttention(C, cfg.feat_dim, cfg.n_heads, cfg.n_points, cfg.n_levels, cfg.n_ref, rng)
        self.tcvha = TemporalCrossViewHybridAttention(C, cfg.n_heads, cfg.n_points, cfg.n_cross, rng)
        self.norm3 = LayerNorm(C)
        self.ffn1 = Linear(C, cfg.hidden, rng)
        self.ffn2 = Linear(cfg.hidden, C, rng)

    def ffn(self, x: TpvState) -> TpvState:
        return x.map(lambda t: self.ffn2(gelu(self.ffn1(self.norm3(t)))))


class Encoder(Module):
    """Learnable TPV queries plus ``n_layers`` independent layers."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.queries = TpvQueries(cfg.H, cfg.W, cfg.D, cfg.embed_dim, rng)
        self.layers = [EncoderLayer(cfg, rng) for _ in range(cfg.n_layers)]


@dataclass
class FrameInputs:
    """Geometry-resolved inputs of one timestep, relative to the current ego frame."""

    pixel_refs: dict  # plane -> [n_cam, A, B, R, 2]
    ref_valid: dict  # plane -> [n_cam, A, B, R]
    pyramid: list  # level -> Tensor [n_cam, H_l, W_l, F]


def frame_inputs(frame, current_pose: RigidTransform, cfg: EncoderConfig,
                 ego_refs: dict | None = None) -> FrameInputs:
    """Project the pillar references of every plane into ``frame``'s cameras.

    Each camera is re-expressed in the current ego frame through the virtual
    view transform of ``frame``'s ego pose.
    """
    pyr = frame.pyramids
    if pyr is None or len(pyr) != cfg.n_levels:
        raise WiringError(f"frame has {0 if pyr is None else len(pyr)} pyramid levels, expected {cfg.n_levels}")
    n_cam = len(frame.cameras)
    for lvl, level in enumerate(pyr):
        if level.shape[0] != n_cam or level.shape[-1] != cfg.feat_dim:
            raise WiringError(f"pyramid level {lvl} has shape {level.shape}; expected {n_cam} cameras "
                              f"and {cfg.feat_dim} channels")
    ego_refs = ego_refs or plane_ego_refs(cfg.grid, cfg.n_ref)
    views = [vvt(c.extrinsic, frame.ego_pose, current_pose) for c in frame.cameras]
    pix, valid = {}, {}
    for p in PLANES:
        pix[p], valid[p] = camera_refs(ego_refs[p], frame.cameras, views)
    return FrameInputs(pix, valid, [Tensor(np.asarray(level)) for level in pyr])


def spatial_fusion(x: TpvState, inputs: FrameInputs, params: SpatialCrossAttention,
                   passthrough: bool = True) -> TpvState:
    levels = params.project_pyramid(inputs.pyramid)
    out = {p: sca(x[p], inputs.pixel_refs[p], inputs.ref_valid[p], levels, params.planes[p], passthrough)
           for p in PLANES}
    return TpvState(out["hw"], out["dh"], out["wd"])


def pad_history(frames: Sequence, m: int) -> list:
    """Exactly ``m + 1`` frames, oldest first, padding by repeating the oldest."""
    frames = list(frames)
    if not frames:
        raise WiringError("encode needs at least the current frame")
    if len(frames) > m + 1:
        raise WiringError(f"{len(frames)} frames given for {m} history steps")
    return [frames[0]] * (m + 1 - len(frames)) + frames


def encode(encoder: Encoder, frames: Sequence, m: int | None = None) -> TpvState:
    """Encode the current frame (last in ``frames``) with up to ``m`` past frames.

    ``m`` defaults to the configured ``temporal_steps``; it can be changed at
    inference without touching weights.
    """
    cfg = encoder.cfg
    m = cfg.temporal_steps if m is None else m
    if m < 0:
        raise ConfigError("history length must be >= 0")
    frames = pad_history(frames, m)
    current = frames[-1].ego_pose
    refs = plane_ego_refs(cfg.grid, cfg.n_ref)
    inputs = [frame_inputs(f, current, cfg, refs) for f in frames]
    x = encoder.queries.embedded()
    for layer in encoder.layers:
        x = x + cvha(x.map(layer.norm1), layer.cvha)
        xn = x.map(layer.norm2)
        spatial = [spatial_fusion(xn, fi, layer.sca) for fi in inputs]
        x = x + temporal_fuse(spatial, layer.tcvha)
        x = x + layer.ffn(x)
    return x


@dataclass
class BevCache:
    """Output BEV plane of the previous warp-variant call and its ego pose."""

    bev: np.ndarray | None = None
    pose: RigidTransform | None = None

    def clear(self) -> None:
        self.bev, self.pose = None, None


def encode_warp(encoder: Encoder, frame, cache: BevCache | None = None) -> TpvState:
    """Warp-variant encoding of one frame.

    With an empty cache the current BEV plane is its own history.  On return
    the cache holds this call's output BEV plane (detached) and pose.
    """
    cfg = encoder.cfg
    grid = cfg.grid
    inputs = frame_inputs(frame, frame.ego_pose, cfg)
    x = encoder.queries.embedded()
    history = None
    if cache is not None and cache.bev is not None:
        history = warp_bev(Tensor(cache.bev), cache.pose, frame.ego_pose, grid)
    for layer in encoder.layers:
        cur = x.map(layer.norm1)
        prev = TpvState(history if history is not None else cur.hw, cur.dh, cur.wd)
        x = x + tcvha_step(prev, cur, layer.tcvha)
        x = x + spatial_fusion(x.map(layer.norm2), inputs, layer.sca, passthrough=False)
        x = x + layer.ffn(x)
    if cache is not None:
        cache.bev = x.hw.data.copy()
        cache.pose = frame.ego_pose
    return x


def config_with(cfg: EncoderConfig, **kw) -> EncoderConfig:
    return replace(cfg, **kw)
