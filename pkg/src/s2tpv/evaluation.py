"""Confusion matrices, IoU metrics, the temporal-range sweep and file exports."""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionError, RangeError
from .synthetic import CLASS_NAMES, SceneDataset
from .training import frame_targets


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # [K, K], rows = ground truth, cols = prediction

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    @classmethod
    def zeros(cls, k: int) -> "ConfusionMatrix":
        return cls(np.zeros((k, k), dtype=np.int64))


def confusion(pred, gt, n_classes: int, mask=None) -> ConfusionMatrix:
    """Count (gt, pred) pairs over the elements selected by ``mask``."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction shape {pred.shape} != ground truth {gt.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != gt.shape:
            raise DimensionError("mask shape differs from labels")
        pred, gt = pred[mask], gt[mask]
    pred = pred.reshape(-1).astype(np.int64)
    gt = gt.reshape(-1).astype(np.int64)
    if pred.size and (min(pred.min(), gt.min()) < 0 or max(pred.max(), gt.max()) >= n_classes):
        raise RangeError(f"labels outside [0, {n_classes})")
    counts = np.bincount(gt * n_classes + pred, minlength=n_classes * n_classes)
    return ConfusionMatrix(counts.reshape(n_classes, n_classes).astype(np.int64))


def sop_mask(gt, pred, empty: int) -> np.ndarray:
    """Cells scored for occupancy: occupied in the ground truth or in the prediction."""
    return (np.asarray(gt) != empty) | (np.asarray(pred) != empty)


def miou(cm: ConfusionMatrix, included: Sequence[int]):
    """Per-class IoU (NaN where TP+FP+FN = 0) and their mean over the rest."""
    included = list(included)
    if not included:
        raise ValueError("miou needs at least one included class")
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    denom = c.sum(axis=0) + c.sum(axis=1) - tp
    iou = np.full(cm.n_classes, np.nan)
    ok = denom > 0
    iou[ok] = tp[ok] / denom[ok]
    vals = iou[included]
    vals = vals[~np.isnan(vals)]
    return iou, (float(vals.mean()) if len(vals) else float("nan"))


@dataclass
class EvalReport:
    iou: np.ndarray
    miou: float
    confusion: ConfusionMatrix
    gt_counts: np.ndarray  # ground-truth LiDAR points per semantic class
    class_names: tuple = CLASS_NAMES
    meta: dict = field(default_factory=dict)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        names = list(self.class_names) + ["empty"]
        with open(out / "per_class.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class_id", "class", "iou", "gt_points"])
            for k, name in enumerate(self.class_names):
                w.writerow([k, name, _fmt(self.iou[k]), int(self.gt_counts[k])])
        with open(out / "confusion.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["gt\\pred"] + names[: self.confusion.n_classes])
            for k, row in enumerate(self.confusion.counts):
                w.writerow([names[k]] + [int(v) for v in row])
        summary = {"miou": self.miou, "iou": [None if np.isnan(v) else float(v) for v in self.iou],
                   "gt_counts": [int(v) for v in self.gt_counts], **self.meta}
        (out / "report.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")

    @classmethod
    def read(cls, out_dir) -> "EvalReport":
        out = Path(out_dir)
        doc = json.loads((out / "report.json").read_text())
        rows = list(csv.reader(open(out / "confusion.csv")))[1:]
        counts = np.array([[int(v) for v in r[1:]] for r in rows], dtype=np.int64)
        iou = np.array([np.nan if v is None else v for v in doc["iou"]], dtype=np.float64)
        return cls(iou, doc["miou"], ConfusionMatrix(counts), np.array(doc["gt_counts"], dtype=np.int64))


def _fmt(v: float) -> str:
    return "nan" if np.isnan(v) else repr(float(v))


def evaluate(model, dataset: SceneDataset, m: int | None = None, score_empty: bool = False,
             timestep: int | None = None) -> EvalReport:
    """Score voxel predictions at the final (or given) timestep of every scene.

    By default only cells occupied in the ground truth or prediction are
    counted and ``empty`` is left out of the mean; ``score_empty`` scores
    every cell and includes ``empty``.
    """
    m = model.cfg.temporal_steps if m is None else m
    n_sem = model.n_semantic
    k = n_sem + 1
    grid = model.cfg.grid
    cm = ConfusionMatrix.zeros(k)
    gt_counts = np.zeros(n_sem, dtype=np.int64)
    for i in range(len(dataset)):
        t = len(dataset.specs[i]) - 1 if timestep is None else timestep
        frames = dataset.history(i, t, m, strict=True)
        labels, pts = frame_targets(frames[-1], grid, n_sem)
        pred = model.predict(frames, m)
        mask = None if score_empty else sop_mask(labels, pred, n_sem)
        cm = cm + confusion(pred, labels, k, mask)
        gt_counts += np.bincount(pts[:, 3].astype(np.int64), minlength=n_sem)[:n_sem]
    included = list(range(k)) if score_empty else list(range(n_sem))
    iou, mean = miou(cm, included)
    return EvalReport(iou, mean, cm, gt_counts, meta={"m": int(m), "score_empty": bool(score_empty),
                                                      "scenes": len(dataset)})


def ablate_temporal_range(model, dataset: SceneDataset, m_values: Sequence[int], score_empty: bool = False):
    """Re-run inference for every history length in ``m_values`` with fixed weights."""
    for m in m_values:
        for i, spec in enumerate(dataset.specs):
            if m > len(spec) - 1:
                raise RangeError(f"M={m} exceeds the {len(spec) - 1} past frames of scene {i}")
    return [(int(m), evaluate(model, dataset, m, score_empty)) for m in m_values]


def write_ablation_csv(path, rows, class_names=CLASS_NAMES) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["m", "miou"] + [f"iou_{n}" for n in class_names])
        for m, rep in rows:
            w.writerow([m, _fmt(rep.miou)] + [_fmt(rep.iou[k]) for k in range(len(class_names))])


def gain_vs_count(baseline: EvalReport, candidate: EvalReport, class_names=CLASS_NAMES):
    """Rows (class, gt points, log10 points, IoU gain) for classes scored in both reports."""
    rows = []
    for k, name in enumerate(class_names):
        a, b = baseline.iou[k], candidate.iou[k]
        if np.isnan(a) or np.isnan(b):
            continue
        n = int(candidate.gt_counts[k])
        rows.append((name, n, float(np.log10(n)) if n > 0 else float("-inf"), float(b - a)))
    return rows


def write_gain_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "gt_points", "log10_points", "iou_gain"])
        for name, n, lg, gain in rows:
            w.writerow([name, n, repr(lg), repr(gain)])


# -- exports ------------------------------------------------------------------------------

def heatmap_values(plane: np.ndarray) -> np.ndarray:
    """Per-cell channel L2 norm, min-max scaled to 0..255 (uint8)."""
    norms = np.linalg.norm(np.asarray(plane, dtype=np.float64), axis=-1)
    lo, hi = norms.min(), norms.max()
    if hi - lo <= 0:
        return np.zeros(norms.shape, dtype=np.uint8)
    return np.round((norms - lo) / (hi - lo) * 255.0).astype(np.uint8)


def emit_heatmap(plane, path) -> np.ndarray:
    """Write a binary portable graymap (P5) of a [H, W, C] plane; returns the pixels."""
    data = getattr(plane, "data", plane)
    img = heatmap_values(data)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
    return img


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos].decode("ascii"))
    pos += 1
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary graymap")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError("16-bit graymaps are not supported")
    return np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w).copy()


GRID_MAGIC = b"S2TPVGRID"


def write_prediction(path, labels: np.ndarray, n_classes: int) -> None:
    """Binary dump: magic, 3 x uint32 extents, uint32 class count, uint8 ids."""
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise DimensionError("prediction dumps hold [H, W, D] grids")
    if n_classes > 256 or labels.min() < 0 or labels.max() >= n_classes:
        raise RangeError("labels do not fit the declared class count")
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC + struct.pack("<4I", *labels.shape, n_classes))
        fh.write(labels.astype(np.uint8).tobytes())


def read_prediction(path):
    blob = Path(path).read_bytes()
    if blob[: len(GRID_MAGIC)] != GRID_MAGIC:
        raise ValueError(f"{path}: not a prediction dump")
    h, w, d, k = struct.unpack_from("<4I", blob, len(GRID_MAGIC))
    off = len(GRID_MAGIC) + 16
    return np.frombuffer(blob, dtype=np.uint8, count=h * w * d, offset=off).reshape(h, w, d).astype(np.int64), k
