"""Losses, the Adam optimiser and the training loop."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, LabelError, NumericError
from .geometry import Grid
from .model import TASKS, OccupancyModel
from .synthetic import SceneDataset, voxelize_labels
from .tensor import Tensor, getitem, log_softmax, softmax, take_rows, tsum

log = logging.getLogger(__name__)


# -- losses -----------------------------------------------------------------------

def _check_targets(targets: np.ndarray, k: int) -> np.ndarray:
    targets = np.asarray(targets).reshape(-1).astype(np.int64)
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise LabelError(f"target ids must lie in [0, {k})")
    return targets


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-probability of the target class.  logits [N, K]."""
    n, k = logits.shape
    targets = _check_targets(targets, k)
    if len(targets) != n:
        raise LabelError(f"{len(targets)} targets for {n} rows")
    if n == 0:
        return Tensor(np.zeros(()))
    picked = getitem(log_softmax(logits, axis=-1), (np.arange(n), targets))
    return tsum(picked) * (-1.0 / n)


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Jaccard extension at a sorted 0/1 ground-truth vector."""
    gt_sorted = np.asarray(gt_sorted, dtype=np.float64)
    gts = gt_sorted.sum()
    inter = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jac = 1.0 - inter / union
    if len(jac) > 1:
        jac[1:] = jac[1:] - jac[:-1]
    return jac


def lovasz_softmax(probs: Tensor, targets) -> Tensor:
    """Lovász-softmax over classes present in ``targets``.  probs [N, K]."""
    n, k = probs.shape
    targets = _check_targets(targets, k)
    if len(targets) != n:
        raise LabelError(f"{len(targets)} targets for {n} rows")
    present = np.unique(targets)
    if n == 0 or len(present) == 0:
        return Tensor(np.zeros(()))
    total = None
    for c in present:
        fg = (targets == c).astype(np.float64)
        pc = getitem(probs, (slice(None), int(c)))
        err = pc * (1.0 - 2.0 * fg) + fg  # |fg - p_c|
        order = np.argsort(-err.data, kind="stable")
        term = tsum(take_rows(err, order) * lovasz_grad(fg[order]))
        total = term if total is None else total + term
    return total * (1.0 / len(present))


def task_loss(voxel_logits: Tensor, voxel_gt, point_logits: Tensor, point_gt, task: str = "sop",
              weights: tuple[float, float] = (1.0, 1.0)) -> Tensor:
    """Equal-weighted sum of the two supervision terms.

    sop: Lovász on voxels + cross-entropy on points;
    lidar_seg: cross-entropy on voxels + Lovász on points.
    """
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}")
    kv = voxel_logits.shape[-1]
    kp = point_logits.shape[-1]
    vl = voxel_logits.reshape(-1, kv)
    vgt = np.asarray(voxel_gt).reshape(-1)
    pl = point_logits.reshape(-1, kp)
    if task == "sop":
        a = lovasz_softmax(softmax(vl, axis=-1), vgt)
        b = cross_entropy(pl, point_gt)
    else:
        a = cross_entropy(vl, vgt)
        b = lovasz_softmax(softmax(pl, axis=-1), point_gt)
    return a * weights[0] + b * weights[1]


# -- optimiser ----------------------------------------------------------------------

class Adam:
    def __init__(self, params, lr: float = 2e-3, betas=(0.9, 0.999), eps: float = 1e-8, clip: float | None = 1.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip = clip
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> float:
        """Apply one update; returns the pre-clip global gradient norm."""
        lr = self.lr if lr is None else lr
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
        scale = 1.0
        if self.clip is not None and norm > self.clip:
            scale = self.clip / norm
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g * scale
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if lr != 0.0:
                with np.errstate(over="ignore", invalid="ignore"):
                    p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
                if not np.isfinite(p.data).all():
                    raise NumericError(f"parameter {p.name or '?'} became non-finite")
        return norm


def cosine_lr(base: float, step: int, total: int, floor: float = 0.0) -> float:
    if total <= 1:
        return base
    return floor + 0.5 * (base - floor) * (1.0 + np.cos(np.pi * step / total))


# -- training loop ------------------------------------------------------------------

@dataclass
class TrainConfig:
    task: str = "sop"
    lr: float = 2e-3
    steps: int = 500
    batch_size: int = 1
    seed: int = 0
    m_train: int = 1
    loss_weights: tuple = (1.0, 1.0)
    timesteps: str = "last"  # "last": always the final frame; "all": uniform over the trajectory
    point_budget: int = 2048  # LiDAR points per sample used for the point loss
    clip: float = 1.0
    cosine: bool = True

    def __post_init__(self):
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        self.validate()

    def validate(self) -> "TrainConfig":
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}")
        if self.m_train < 0:
            raise ConfigError("m_train must be >= 0")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if self.timesteps not in ("last", "all"):
            raise ConfigError("timesteps must be 'last' or 'all'")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(f"unknown training config keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    seconds: float = 0.0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss"])
            for i, v in enumerate(self.losses):
                w.writerow([i, repr(float(v))])


def frame_targets(frame, grid: Grid, n_semantic: int):
    """Voxel labels and in-bounds LiDAR points (ego xyz, class) of one frame."""
    pts = frame.lidar_points
    labels = voxelize_labels(pts, grid, n_semantic).labels
    _, inside = grid.voxel_index(pts[:, :3])
    return labels, pts[inside]


def sample_loss(model: OccupancyModel, frames, grid: Grid, cfg: TrainConfig, rng: np.random.Generator,
                m: int | None = None) -> Tensor:
    labels, pts = frame_targets(frames[-1], grid, model.n_semantic)
    if cfg.point_budget and len(pts) > cfg.point_budget:
        pts = pts[np.sort(rng.choice(len(pts), cfg.point_budget, replace=False))]
    tpv = model.encode(frames, m)
    return task_loss(model.voxel_logits(tpv), labels, model.point_logits(tpv, pts[:, :3]),
                     pts[:, 3].astype(np.int64), cfg.task, cfg.loss_weights)


def train(model: OccupancyModel, dataset: SceneDataset, cfg: TrainConfig, log_every: int = 0) -> TrainResult:
    """Seed-deterministic training; aborts with the step index on a non-finite loss."""
    cfg.validate()
    if model.task != cfg.task:
        raise ConfigError(f"model built for {model.task!r} but training task is {cfg.task!r}")
    if len(dataset) == 0:
        raise ConfigError("empty training dataset")
    rng = np.random.default_rng(cfg.seed)
    grid = model.cfg.grid
    opt = Adam(model.params(), lr=cfg.lr, clip=cfg.clip)
    result = TrainResult()
    start = time.perf_counter()
    for step in range(cfg.steps):
        model.zero_grad()
        total = 0.0
        for _ in range(cfg.batch_size):
            i = int(rng.integers(len(dataset)))
            n_t = len(dataset.specs[i])
            t = n_t - 1 if cfg.timesteps == "last" else int(rng.integers(n_t))
            frames = dataset.history(i, t, cfg.m_train)
            try:
                loss = sample_loss(model, frames, grid, cfg, rng, cfg.m_train) * (1.0 / cfg.batch_size)
            except NumericError as exc:
                raise NumericError(f"non-finite value at training step {step}: {exc}") from exc
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite loss at training step {step}")
            try:
                loss.backward()
            except NumericError as exc:
                raise NumericError(f"non-finite gradient at training step {step}: {exc}") from exc
            total += float(loss.data)
        lr = cosine_lr(cfg.lr, step, cfg.steps) if cfg.cosine else cfg.lr
        try:
            result.grad_norms.append(opt.step(lr))
        except NumericError as exc:
            raise NumericError(f"update at training step {step} failed: {exc}") from exc
        result.losses.append(total)
        if log_every and (step % log_every == 0 or step == cfg.steps - 1):
            log.info("step %d loss %.5f", step, total)
    model.zero_grad()
    result.seconds = time.perf_counter() - start
    return result


def window_means(values, window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    n = len(v) // window
    return v[: n * window].reshape(n, window).mean(axis=1)


def save_config(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
