"""Tri-perspective view state: the three orthogonal feature planes and their queries."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import NumericError, WiringError
from .geometry import PLANES, Grid
from .nn import Module
from .tensor import Param, Tensor, default_dtype, grid_sample2d, reshape, transpose


@dataclass
class TpvState:
    """Top (hw: [H, W, C]), front (dh: [D, H, C]) and side (wd: [W, D, C]) planes."""

    hw: Tensor
    dh: Tensor
    wd: Tensor

    def __post_init__(self):
        H, W, C = self.hw.shape
        D = self.dh.shape[0]
        if self.dh.shape != (D, H, C) or self.wd.shape != (W, D, C):
            raise WiringError(f"inconsistent plane shapes {self.hw.shape} {self.dh.shape} {self.wd.shape}")

    def __getitem__(self, plane: str) -> Tensor:
        return getattr(self, plane)

    @property
    def embed_dim(self) -> int:
        return self.hw.shape[2]

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        H, W, _ = self.hw.shape
        return H, W, self.dh.shape[0]

    def planes(self) -> list[Tensor]:
        return [self.hw, self.dh, self.wd]

    def map(self, fn: Callable[[Tensor], Tensor]) -> "TpvState":
        return TpvState(fn(self.hw), fn(self.dh), fn(self.wd))

    def zip_map(self, other: "TpvState", fn) -> "TpvState":
        return TpvState(fn(self.hw, other.hw), fn(self.dh, other.dh), fn(self.wd, other.wd))

    def __add__(self, other: "TpvState") -> "TpvState":
        return self.zip_map(other, lambda a, b: a + b)

    def detach(self) -> "TpvState":
        return self.map(lambda t: t.detach())

    @classmethod
    def from_arrays(cls, hw, dh, wd) -> "TpvState":
        return cls(Tensor(np.asarray(hw, dtype=default_dtype())), Tensor(np.asarray(dh, dtype=default_dtype())),
                   Tensor(np.asarray(wd, dtype=default_dtype())))

    @classmethod
    def zeros(cls, H: int, W: int, D: int, C: int) -> "TpvState":
        return cls.from_arrays(np.zeros((H, W, C)), np.zeros((D, H, C)), np.zeros((W, D, C)))


def plane_dims(plane: str, H: int, W: int, D: int) -> tuple[int, int]:
    return {"hw": (H, W), "dh": (D, H), "wd": (W, D)}[plane]


def query_count(H: int, W: int, D: int) -> int:
    return H * W + D * H + W * D


class TpvQueries(Module):
    """Learnable query grids plus additive per-plane positional embeddings."""

    def __init__(self, H: int, W: int, D: int, C: int, rng: np.random.Generator):
        if min(H, W, D, C) < 1:
            raise ValueError("query grid dims must be positive")
        self.H, self.W, self.D, self.C = H, W, D, C
        self.q_hw = Param(rng.normal(0.0, 0.02, size=(H, W, C)))
        self.q_dh = Param(rng.normal(0.0, 0.02, size=(D, H, C)))
        self.q_wd = Param(rng.normal(0.0, 0.02, size=(W, D, C)))
        self.pos_hw = Param(np.zeros((H, W, C)))
        self.pos_dh = Param(np.zeros((D, H, C)))
        self.pos_wd = Param(np.zeros((W, D, C)))

    @property
    def count(self) -> int:
        return self.q_hw.shape[0] * self.q_hw.shape[1] + self.q_dh.shape[0] * self.q_dh.shape[1] \
            + self.q_wd.shape[0] * self.q_wd.shape[1]

    def embedded(self) -> TpvState:
        return TpvState(self.q_hw + self.pos_hw, self.q_dh + self.pos_dh, self.q_wd + self.pos_wd)


def init_queries(H: int, W: int, D: int, C: int, rng_seed: int) -> TpvQueries:
    return TpvQueries(H, W, D, C, np.random.default_rng(rng_seed))


def _spread(n_axis: int, n: int) -> np.ndarray:
    return np.linspace(0.0, n_axis - 1, n)


def cross_view_refs(plane: str, cell: tuple[int, int], grid_shape: tuple[int, int, int],
                    n_cross: int = 4) -> dict[str, np.ndarray]:
    """Reference points of one query: itself plus samples in the two other planes.

    Keys are target planes, values [n, 2] continuous (row, col) coordinates.
    The self entry comes first.
    """
    table = cross_view_table(plane, grid_shape, n_cross)
    A, B = plane_dims(plane, *grid_shape)
    a, b = cell
    return {target: refs[a * B + b] for target, refs in table}


def cross_view_table(plane: str, grid_shape: tuple[int, int, int], n_cross: int = 4) -> list[tuple[str, np.ndarray]]:
    """Vectorised :func:`cross_view_refs` for every cell of ``plane``.

    Returns [(target plane, refs [A*B, n, 2])], self first, then the other
    planes in (hw, dh, wd) order.
    """
    H, W, D = grid_shape
    A, B = plane_dims(plane, H, W, D)
    ia, ib = np.meshgrid(np.arange(A, dtype=np.float64), np.arange(B, dtype=np.float64), indexing="ij")
    ia, ib = ia.reshape(-1, 1), ib.reshape(-1, 1)
    ones = np.ones((1, n_cross))
    out = [(plane, np.stack([ia, ib], axis=-1))]
    if plane == "hw":  # cell (h, w); sweep d
        ds = _spread(D, n_cross)[None, :]
        out.append(("dh", np.stack([ds + 0 * ia, ia * ones], axis=-1)))
        out.append(("wd", np.stack([ib * ones, ds + 0 * ib], axis=-1)))
    elif plane == "dh":  # cell (d, h); sweep w
        ws = _spread(W, n_cross)[None, :]
        out.append(("hw", np.stack([ib * ones, ws + 0 * ib], axis=-1)))
        out.append(("wd", np.stack([ws + 0 * ia, ia * ones], axis=-1)))
    elif plane == "wd":  # cell (w, d); sweep h
        hs = _spread(H, n_cross)[None, :]
        out.append(("hw", np.stack([hs + 0 * ia, ia * ones], axis=-1)))
        out.append(("dh", np.stack([ib * ones, hs + 0 * ib], axis=-1)))
    else:
        raise ValueError(f"unknown plane {plane!r}")
    return out


def point_plane_coords(grid: Grid, xyz: np.ndarray) -> dict[str, np.ndarray]:
    """Continuous coordinates of ego points projected onto each plane."""
    g = grid.metric_to_grid(xyz)
    gh, gw, gd = g[..., 0], g[..., 1], g[..., 2]
    return {
        "hw": np.stack([gh, gw], axis=-1),
        "dh": np.stack([gd, gh], axis=-1),
        "wd": np.stack([gw, gd], axis=-1),
    }


def aggregate_point(tpv: TpvState, grid: Grid, xyz) -> Tensor:
    """Sum of the three plane features sampled at each point's projections.

    xyz: [3] or [N, 3] ego metres.  Returns [C] or [N, C].
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    if not np.isfinite(xyz).all():
        raise NumericError("aggregate_point: non-finite coordinates")
    single = xyz.ndim == 1
    pts = xyz.reshape(-1, 3)
    coords = point_plane_coords(grid, pts)
    out = grid_sample2d(tpv.hw, coords["hw"])
    out = out + grid_sample2d(tpv.dh, coords["dh"])
    out = out + grid_sample2d(tpv.wd, coords["wd"])
    return out.reshape(-1) if single else out


def aggregate_voxels(tpv: TpvState) -> Tensor:
    """Per-voxel features [H, W, D, C] by broadcasting each plane along its normal."""
    H, W, D = tpv.grid_shape
    C = tpv.embed_dim
    hw = reshape(tpv.hw, (H, W, 1, C))
    dh = reshape(transpose(tpv.dh, (1, 0, 2)), (H, 1, D, C))
    wd = reshape(tpv.wd, (1, W, D, C))
    return hw + dh + wd


__all__ = [
    "PLANES", "TpvState", "TpvQueries", "init_queries", "query_count", "cross_view_refs",
    "cross_view_table", "aggregate_point", "aggregate_voxels", "point_plane_coords", "plane_dims",
]
