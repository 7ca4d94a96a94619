"""Encoder + heads bundled as one trainable, checkpointable model."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .decoder import Decoder, decode_points, decode_voxels
from .encoder import BevCache, Encoder, EncoderConfig, encode, encode_warp
from .errors import ConfigError
from .synthetic import N_SEMANTIC
from .tensor import Tensor, load_checkpoint, save_checkpoint
from .tpv import TpvState

TASKS = ("sop", "lidar_seg")


class OccupancyModel:
    """TPV encoder with a voxel head (semantic classes + empty) and a point head.

    In ``sop`` mode the point head is the voxel head.  In ``lidar_seg`` mode the
    point head is a separate decoder over the semantic classes only, sharing
    the encoder trunk.
    """

    def __init__(self, cfg: EncoderConfig, n_semantic: int = N_SEMANTIC, task: str = "sop", seed: int = 0):
        if task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}")
        self.cfg = cfg
        self.n_semantic = n_semantic
        self.task = task
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(cfg, rng)
        self.voxel_head = Decoder(cfg.embed_dim, n_semantic + 1, rng)
        self.point_head = self.voxel_head if task == "sop" else Decoder(cfg.embed_dim, n_semantic, rng)
        for name, p in self.named_params():
            p.name = name

    @property
    def empty(self) -> int:
        return self.n_semantic

    def named_params(self):
        yield from self.encoder.named_params("encoder.")
        yield from self.voxel_head.named_params("voxel_head.")
        if self.point_head is not self.voxel_head:
            yield from self.point_head.named_params("point_head.")

    def params(self):
        return [p for _, p in self.named_params()]

    def param_count(self) -> int:
        return sum(p.size for p in self.params())

    def zero_grad(self) -> None:
        for p in self.params():
            p.grad = None

    # -- forward --------------------------------------------------------------
    def encode(self, frames: Sequence, m: int | None = None, cache: BevCache | None = None) -> TpvState:
        if self.cfg.variant == "warp":
            return encode_warp(self.encoder, frames[-1], cache)
        return encode(self.encoder, frames, m)

    def voxel_logits(self, tpv: TpvState) -> Tensor:
        return decode_voxels(tpv, self.voxel_head)

    def point_logits(self, tpv: TpvState, points: np.ndarray) -> Tensor:
        return decode_points(tpv, self.cfg.grid, points, self.point_head)

    def predict(self, frames: Sequence, m: int | None = None, cache: BevCache | None = None) -> np.ndarray:
        """Voxel class ids [H, W, D]."""
        return self.voxel_logits(self.encode(frames, m, cache)).data.argmax(axis=-1)

    # -- persistence ------------------------------------------------------------
    def meta(self) -> dict:
        return {"format": "s2tpv-model", "version": 1, "encoder": self.cfg.to_dict(),
                "n_semantic": self.n_semantic, "task": self.task, "seed": self.seed}

    def save(self, path) -> None:
        path = Path(path)
        save_checkpoint(path, [(n, p.data) for n, p in self.named_params()])
        path.with_suffix(".json").write_text(json.dumps(self.meta(), indent=1, sort_keys=True) + "\n")

    def load_state(self, state: dict) -> None:
        own = dict(self.named_params())
        missing, extra = set(own) - set(state), set(state) - set(own)
        if missing or extra:
            raise ConfigError(f"checkpoint mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for name, p in own.items():
            if p.shape != state[name].shape:
                raise ConfigError(f"{name}: checkpoint shape {state[name].shape} != {p.shape}")
            p.data[...] = state[name]

    @classmethod
    def load(cls, path) -> "OccupancyModel":
        path = Path(path)
        meta_path = path.with_suffix(".json")
        if not meta_path.exists():
            raise ConfigError(f"missing model description {meta_path}")
        meta = json.loads(meta_path.read_text())
        if meta.get("format") != "s2tpv-model":
            raise ConfigError(f"{meta_path}: not a model description")
        model = cls(EncoderConfig.from_dict(meta["encoder"]), meta["n_semantic"], meta["task"], meta["seed"])
        model.load_state(load_checkpoint(path))
        return model
