"""Quick oracle and property checks runnable from an installed package.

Each check compares a vectorised implementation against an independent
reference (loop, brute force, or closed form) on a few seeded cases and
returns the worst discrepancy.  The full pytest suite goes much further; this
is the smoke test behind ``s2tpv selftest``.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .attention import (
    CrossViewHybridAttention, DeformAttn, SpatialCrossAttention, TemporalCrossViewHybridAttention, camera_refs, cvha,
    deform_attn, plane_ego_refs, sca, tcvha_step,
)
from .evaluation import confusion, miou
from .geometry import CameraModel, Grid, RigidTransform, camera_mount, project_refs, vvt
from .oracles import (
    cvha_loop, deform_attn_loop, iou_sets, lovasz_softmax_bruteforce, project_scalar, sca_loop, tcvha_loop,
    voxelize_counting,
)
from .synthetic import voxelize_labels
from .tensor import Param, Tensor, grad_check, grid_sample2d, log, softmax
from .tpv import TpvState
from .training import lovasz_softmax


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    seconds: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tolerance)


def _random_pose(rng) -> RigidTransform:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    rot = np.array([[1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                    [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                    [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)]])
    return RigidTransform(rot, rng.normal(size=3) * 3)


def _homogeneous(t: RigidTransform) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3], m[:3, 3] = t.rotation, t.translation
    return m


def check_vvt(n_seeds: int = 20) -> float:
    worst = 0.0
    for seed in range(n_seeds):
        rng = np.random.default_rng(seed)
        cam, past, cur = _random_pose(rng), _random_pose(rng), _random_pose(rng)
        pts = rng.normal(size=(10, 3)) * 5
        got = vvt(cam, past, cur).apply(pts)
        m = np.linalg.inv(_homogeneous(cam)) @ np.linalg.inv(_homogeneous(past)) @ _homogeneous(cur)
        ref = (m @ np.c_[pts, np.ones(len(pts))].T).T[:, :3]
        worst = max(worst, float(np.abs(got - ref).max()))
    return worst


def check_projection(n_seeds: int = 10) -> float:
    worst = 0.0
    for seed in range(n_seeds):
        rng = np.random.default_rng(seed)
        camera = CameraModel.pinhole(64, 48, 70.0, camera_mount(rng.uniform(-np.pi, np.pi), 1.5, 0.5))
        view = camera.extrinsic.inverse()
        pts = rng.uniform([-20, -20, -1], [20, 20, 4], size=(30, 3))
        pix, valid = project_refs(pts, view, camera)
        for p, px, ok in zip(pts, pix, valid):
            ref = project_scalar(p, view, camera)
            ref_ok = ref is not None and 0 <= ref[0] < 64 and 0 <= ref[1] < 48
            if ok != ref_ok:
                return float("inf")
            if ref is not None:
                worst = max(worst, float(np.abs(px - np.asarray(ref)).max()))
    return worst


def _jitter(module, rng, scale=0.4):
    for _, p in module.named_params():
        p.data[...] = rng.normal(0.0, scale, size=p.shape)


def _random_state(rng, H=4, W=4, D=2, C=4):
    return TpvState.from_arrays(rng.normal(size=(H, W, C)), rng.normal(size=(D, H, C)), rng.normal(size=(W, D, C)))


def _planes(state):
    return {p: state[p].data for p in ("hw", "dh", "wd")}


def check_deform_attn(n_seeds: int = 5) -> float:
    worst = 0.0
    for seed in range(n_seeds):
        rng = np.random.default_rng(seed)
        blk = DeformAttn(4, 2, 2, 2, rng)
        _jitter(blk, rng)
        maps = {"a": rng.normal(size=(4, 4, 4))}
        q = rng.normal(size=(5, 4))
        refs = rng.uniform(-0.5, 3.5, size=(5, 2, 2))
        out = deform_attn(Tensor(q), [("a", refs)], {"a": Tensor(maps["a"])}, blk).data
        for i in range(5):
            worst = max(worst, float(np.abs(out[i] - deform_attn_loop(q[i], [("a", refs[i])], maps, blk)).max()))
    return worst


def check_sca(n_seeds: int = 3) -> float:
    grid = Grid(4, 4, 2, ((-4, 4), (-4, 4), (-0.5, 2.5)))
    n_ref = {"hw": 2, "dh": 3, "wd": 3}
    cams = [CameraModel.pinhole(8, 8, 90.0, camera_mount(y, 1.0, 0.2)) for y in (0.0, 2.1, 4.2)]
    views = [c.extrinsic.inverse() for c in cams]
    refs = plane_ego_refs(grid, n_ref)
    worst = 0.0
    for seed in range(n_seeds):
        rng = np.random.default_rng(seed)
        params = SpatialCrossAttention(4, 3, 2, 2, 2, n_ref, rng)
        _jitter(params, rng)
        pyramid = [rng.normal(size=(3, 8, 8, 3)), rng.normal(size=(3, 4, 4, 3))]
        levels = params.project_pyramid([Tensor(x) for x in pyramid])
        state = _random_state(rng)
        for plane in ("hw", "dh", "wd"):
            pix, valid = camera_refs(refs[plane], cams, views)
            out = sca(state[plane], pix, valid, levels, params.planes[plane]).data
            worst = max(worst, float(np.abs(out - sca_loop(state[plane].data, pix, valid, pyramid, params,
                                                                 plane)).max()))
    return worst


def check_cross_view(n_seeds: int = 3) -> float:
    worst = 0.0
    for seed in range(n_seeds):
        rng = np.random.default_rng(seed)
        sp = CrossViewHybridAttention(4, 2, 2, 2, rng)
        tp = TemporalCrossViewHybridAttention(4, 2, 2, 2, rng)
        _jitter(sp, rng)
        _jitter(tp, rng)
        prev, cur = _random_state(rng), _random_state(rng)
        a, ra = cvha(cur, sp), cvha_loop(_planes(cur), sp)
        b, rb = tcvha_step(prev, cur, tp), tcvha_loop(_planes(prev), _planes(cur), tp)
        for p in ("hw", "dh", "wd"):
            worst = max(worst, float(np.abs(a[p].data - ra[p]).max()), float(np.abs(b[p].data - rb[p]).max()))
    return worst


def check_gradients() -> float:
    rng = np.random.default_rng(0)
    plane = Param(rng.normal(size=(4, 5, 3)))
    pts = Param(rng.uniform(0.2, 3.7, size=(6, 2)))
    w = Param(rng.normal(size=(3, 3)))
    f = lambda: log(softmax(grid_sample2d(plane, pts) @ w)).sum()  # noqa: E731
    return grad_check(f, [plane, pts, w], eps=1e-5)


def check_lovasz() -> float:
    rng = np.random.default_rng(0)
    worst = 0.0
    for n in range(1, 5):
        for labels in itertools.product(range(3), repeat=n):
            probs = rng.dirichlet(np.ones(3), size=n)
            got = lovasz_softmax(Tensor(probs), labels).item()
            worst = max(worst, abs(got - lovasz_softmax_bruteforce(probs, labels)))
    return worst


def check_voxelize() -> float:
    rng = np.random.default_rng(0)
    grid = Grid(4, 4, 2, ((0, 4), (0, 4), (0, 2)))
    pts = np.c_[rng.uniform([-0.5, -0.5, -0.5], [4.5, 4.5, 2.5], size=(500, 3)), rng.integers(0, 5, size=500)]
    return float((voxelize_labels(pts, grid).labels != voxelize_counting(pts, grid, 5)).sum())


def check_metrics() -> float:
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(50):
        gt, pred = rng.integers(0, 3, size=(2, 2, 2)), rng.integers(0, 3, size=(2, 2, 2))
        iou, _ = miou(confusion(pred, gt, 3), [0, 1, 2])
        for c in range(3):
            ref = iou_sets(pred, gt, c)
            if (ref is None) != bool(np.isnan(iou[c])):
                return float("inf")
            if ref is not None:
                worst = max(worst, abs(iou[c] - ref))
    return worst


CHECKS: list[tuple[str, Callable[[], float], float]] = [
    ("vvt-vs-homogeneous", check_vvt, 1e-9),
    ("projection-vs-pinhole", check_projection, 1e-9),
    ("deform-attn-vs-loop", check_deform_attn, 1e-9),
    ("sca-vs-loop", check_sca, 1e-9),
    ("cvha-tcvha-vs-loop", check_cross_view, 1e-9),
    ("gradient-check", check_gradients, 1e-4),
    ("lovasz-vs-bruteforce", check_lovasz, 1e-12),
    ("voxelize-vs-counting", check_voxelize, 0.5),
    ("miou-vs-sets", check_metrics, 1e-12),
]


def run_selftest() -> list[CheckResult]:
    results = []
    for name, fn, tol in CHECKS:
        t0 = time.perf_counter()
        err = fn()
        results.append(CheckResult(name, float(err), tol, time.perf_counter() - t0))
    return results
