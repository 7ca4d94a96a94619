"""Two-layer softplus MLP head turning TPV features into class logits."""

from __future__ import annotations

import numpy as np

from .geometry import Grid
from .nn import Linear, Module
from .tensor import Tensor, softplus
from .tpv import TpvState, aggregate_point, aggregate_voxels


class Decoder(Module):
    """linear(C -> C_mid) -> softplus -> linear(C_mid -> n_classes)."""

    def __init__(self, embed_dim: int, n_classes: int, rng: np.random.Generator, hidden: int | None = None):
        self.hidden = hidden or 2 * embed_dim
        self.n_classes = n_classes
        self.linear1 = Linear(embed_dim, self.hidden, rng)
        self.linear2 = Linear(self.hidden, n_classes, rng)

    def __call__(self, feats: Tensor) -> Tensor:
        return self.linear2(softplus(self.linear1(feats)))


def decoder_param_count(embed_dim: int, hidden: int, n_classes: int) -> int:
    return embed_dim * hidden + hidden + hidden * n_classes + n_classes


def decode_voxels(tpv: TpvState, params: Decoder) -> Tensor:
    """Logits [H, W, D, n_classes]."""
    return params(aggregate_voxels(tpv))


def decode_points(tpv: TpvState, grid: Grid, ego_points, params: Decoder) -> Tensor:
    """Logits [N, n_classes] for ego-frame points [N, 3]."""
    pts = np.asarray(ego_points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return Tensor(np.zeros((0, params.n_classes)))
    return params(aggregate_point(tpv, grid, pts))
