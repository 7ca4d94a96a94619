"""Slow, loop-based reference implementations used as test oracles.

Each function recomputes a fast vectorised operation from first principles
(explicit loops, scalar arithmetic, expanded formulas) so the two can be
compared numerically.  Nothing here is used on the model's hot path.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from .geometry import CameraModel, RigidTransform


# -- geometry ---------------------------------------------------------------------

def vvt_expanded(r_i, t_i, r_p, t_p, r_c, t_c):
    """R = R_i^-1 R_p^-1 R_c;  t = R_i^-1 R_p^-1 t_c - R_i^-1 R_p^-1 t_p - R_i^-1 t_i."""
    ri_inv = np.linalg.inv(r_i)
    rp_inv = np.linalg.inv(r_p)
    rot = ri_inv @ rp_inv @ r_c
    trans = ri_inv @ rp_inv @ t_c - ri_inv @ rp_inv @ t_p - ri_inv @ t_i
    return rot, trans


def project_scalar(point, view: RigidTransform, camera: CameraModel):
    """Pinhole projection of one ego point with scalar arithmetic; None when behind."""
    x, y, z = (float(v) for v in point)
    r, t = view.rotation, view.translation
    xc = r[0, 0] * x + r[0, 1] * y + r[0, 2] * z + t[0]
    yc = r[1, 0] * x + r[1, 1] * y + r[1, 2] * z + t[1]
    zc = r[2, 0] * x + r[2, 1] * y + r[2, 2] * z + t[2]
    if zc <= 0.1:
        return None
    k = camera.intrinsics
    return (k[0, 0] * xc + k[0, 1] * yc) / zc + k[0, 2], k[1, 1] * yc / zc + k[1, 2]


# -- sampling and attention ----------------------------------------------------------

def bilinear_scalar(img: np.ndarray, r: float, c: float) -> np.ndarray:
    """Zero-padded bilinear sample of [H, W, C] at (row, col)."""
    H, W = img.shape[:2]
    r0, c0 = math.floor(r), math.floor(c)
    out = np.zeros(img.shape[2:])
    for rr, cc in ((r0, c0), (r0, c0 + 1), (r0 + 1, c0), (r0 + 1, c0 + 1)):
        w = (1.0 - abs(r - rr)) * (1.0 - abs(c - cc))
        if 0 <= rr < H and 0 <= cc < W:
            out = out + w * img[rr, cc]
    return out


def _linear(x, lin):
    out = x @ lin.weight.data
    return out if lin.bias is None else out + lin.bias.data


def _softmax_loop(vals, mask=None):
    vals = list(vals)
    mask = [True] * len(vals) if mask is None else list(mask)
    live = [v for v, m in zip(vals, mask) if m]
    if not live:
        return [0.0] * len(vals)
    top = max(live)
    e = [math.exp(v - top) if m else 0.0 for v, m in zip(vals, mask)]
    s = sum(e)
    return [v / s for v in e]


def deform_attn_loop(query: np.ndarray, groups, value_maps: dict, params, value_proj=None):
    """One query vector [C]; groups: [(key, refs [R_g, 2])]; raw [Hm, Wm, Cv] maps."""
    C = query.shape[0]
    G, P = params.n_heads, params.n_points
    Cg = C // G
    refs = [(key, ref) for key, rs in groups for ref in np.asarray(rs)]
    R = len(refs)
    vp = value_proj or params.value_proj
    proj = {key: _linear(np.asarray(m, dtype=np.float64), vp) for key, m in value_maps.items()}
    off = _linear(query, params.offset_proj).reshape(G, R, P, 2)
    logits = _linear(query, params.weight_proj).reshape(G, R * P)
    acc = np.zeros(C)
    for g in range(G):
        w = _softmax_loop(logits[g])
        for ri, (key, ref) in enumerate(refs):
            for p in range(P):
                r = ref[0] + off[g, ri, p, 0]
                c = ref[1] + off[g, ri, p, 1]
                s = bilinear_scalar(proj[key][..., g * Cg:(g + 1) * Cg], r, c)
                acc[g * Cg:(g + 1) * Cg] += w[ri * P + p] * s
    return _linear(acc, params.output_proj)


def deform_attn_3d_loop(query, pixel_refs, ref_valid, pyramid_proj, cam, params):
    """One query, one camera.  pyramid_proj[l]: projected [n_cam, H_l, W_l, C] maps."""
    C = query.shape[0]
    G, P, R, L = params.n_heads, params.n_points, params.n_refs, params.n_levels
    Cg = C // G
    off = _linear(query, params.offset_proj).reshape(G, L, R, P, 2)
    logits = _linear(query, params.weight_proj).reshape(G, L, R, P)
    acc = np.zeros(C)
    for g in range(G):
        flat, mask = [], []
        for lvl, ri, p in itertools.product(range(L), range(R), range(P)):
            flat.append(logits[g, lvl, ri, p])
            mask.append(bool(ref_valid[ri]))
        w = _softmax_loop(flat, mask)
        k = 0
        for lvl, ri, p in itertools.product(range(L), range(R), range(P)):
            s = 2.0 ** lvl
            u, v = pixel_refs[ri]
            r = v / s - 0.5 + off[g, lvl, ri, p, 0]
            c = u / s - 0.5 + off[g, lvl, ri, p, 1]
            img = pyramid_proj[lvl][cam][..., g * Cg:(g + 1) * Cg]
            acc[g * Cg:(g + 1) * Cg] += w[k] * bilinear_scalar(img, r, c)
            k += 1
    return _linear(acc, params.output_proj)


def sca_loop(queries: np.ndarray, pixel_refs, ref_valid, pyramid, sca_params, plane: str, passthrough=True):
    """queries [A, B, C]; raw pyramid levels [n_cam, H_l, W_l, F]."""
    A, B, C = queries.shape
    n_cam = pixel_refs.shape[0]
    proj = [_linear(np.asarray(lv, dtype=np.float64), sca_params.value_proj) for lv in pyramid]
    params = sca_params.planes[plane]
    out = np.zeros((A, B, C))
    for a in range(A):
        for b in range(B):
            hits = [i for i in range(n_cam) if any(ref_valid[i, a, b])]
            if not hits:
                out[a, b] = queries[a, b] if passthrough else 0.0
                continue
            tot = np.zeros(C)
            for i in hits:
                tot += deform_attn_3d_loop(queries[a, b], pixel_refs[i, a, b], ref_valid[i, a, b], proj, i, params)
            out[a, b] = tot / len(hits)
    return out


def _spread(n_axis, n):
    return [k * (n_axis - 1) / (n - 1) if n > 1 else 0.0 for k in range(n)]


def cross_refs_loop(plane: str, a: int, b: int, H: int, W: int, D: int, n_cross: int):
    """[(target plane, [(row, col), ...])] for one cell; self first."""
    if plane == "hw":  # (h, w)
        return [("hw", [(a, b)]), ("dh", [(d, a) for d in _spread(D, n_cross)]),
                ("wd", [(b, d) for d in _spread(D, n_cross)])]
    if plane == "dh":  # (d, h)
        return [("dh", [(a, b)]), ("hw", [(b, w) for w in _spread(W, n_cross)]),
                ("wd", [(w, a) for w in _spread(W, n_cross)])]
    return [("wd", [(a, b)]), ("hw", [(h, a) for h in _spread(H, n_cross)]),
            ("dh", [(b, h) for h in _spread(H, n_cross)])]


def cvha_loop(planes: dict, params):
    """planes: raw arrays keyed hw/dh/wd; returns dict of outputs."""
    H, W, _ = planes["hw"].shape
    D = planes["dh"].shape[0]
    out = {}
    for plane, q in planes.items():
        A, B, C = q.shape
        res = np.zeros_like(q)
        for a in range(A):
            for b in range(B):
                groups = cross_refs_loop(plane, a, b, H, W, D, params.n_cross)
                res[a, b] = deform_attn_loop(q[a, b], groups, planes, params.attn)
        out[plane] = res
    return out


def tcvha_loop(prev: dict, cur: dict, params):
    H, W, _ = cur["hw"].shape
    D = cur["dh"].shape[0]
    maps = {("prev", p): v for p, v in prev.items()}
    maps.update({("cur", p): v for p, v in cur.items()})
    out = {}
    for plane in ("hw", "dh", "wd"):
        A, B, C = cur[plane].shape
        q_all = _linear(np.concatenate([prev[plane], cur[plane]], axis=-1), params.fuse_proj)
        res = np.zeros((A, B, C))
        for a in range(A):
            for b in range(B):
                cross = cross_refs_loop(plane, a, b, H, W, D, params.n_cross)
                groups = [(("prev", plane), [(a, b)])] + [(("cur", t), r) for t, r in cross]
                res[a, b] = deform_attn_loop(q_all[a, b], groups, maps, params.attn)
        out[plane] = res
    return out


# -- losses -------------------------------------------------------------------------------

def cross_entropy_scalar(logits, targets) -> float:
    total = 0.0
    for row, t in zip(np.asarray(logits), targets):
        top = max(row)
        lse = top + math.log(sum(math.exp(v - top) for v in row))
        total += lse - row[t]
    return total / len(targets)


def jaccard_loss_set(mistakes: set, fg: set) -> float:
    union = fg | mistakes
    return len(mistakes) / len(union) if union else 0.0


def lovasz_extension_bruteforce(errors, fg_mask) -> float:
    """integral over theta in [0, 1] of the Jaccard loss of {i : e_i >= theta}."""
    errors = [float(e) for e in errors]
    fg = {i for i, f in enumerate(fg_mask) if f}
    levels = sorted(set(errors) | {0.0}, reverse=True)
    total = 0.0
    for hi, lo in zip(levels, levels[1:] + [None]):
        lo = 0.0 if lo is None else lo
        if hi <= 0:
            continue
        chosen = {i for i, e in enumerate(errors) if e >= hi}
        total += (hi - lo) * jaccard_loss_set(chosen, fg)
    return total


def lovasz_softmax_bruteforce(probs, targets) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    present = sorted(set(int(t) for t in targets))
    if not present:
        return 0.0
    vals = []
    for c in present:
        fg = [int(t) == c for t in targets]
        err = [abs((1.0 if f else 0.0) - probs[i, c]) for i, f in enumerate(fg)]
        vals.append(lovasz_extension_bruteforce(err, fg))
    return sum(vals) / len(vals)


# -- labels and metrics --------------------------------------------------------------------

def voxelize_counting(points, grid, n_semantic: int) -> np.ndarray:
    counts: dict = {}
    lower, pitch = grid.lower, grid.pitch
    for x, y, z, c in np.asarray(points):
        idx = tuple(int(math.floor((v - lo) / p)) for v, lo, p in zip((x, y, z), lower, pitch))
        if all(0 <= i < n for i, n in zip(idx, grid.shape)):
            counts.setdefault(idx, {}).setdefault(int(c), 0)
            counts[idx][int(c)] += 1
    labels = np.full(grid.shape, n_semantic, dtype=np.int64)
    for idx, per in counts.items():
        best = max(per.values())
        labels[idx] = min(c for c, n in per.items() if n == best)
    return labels


def iou_sets(pred, gt, cls: int, mask=None):
    """IoU of one class from explicit index sets; None when both sets are empty."""
    pred, gt = np.asarray(pred).reshape(-1), np.asarray(gt).reshape(-1)
    keep = range(len(gt)) if mask is None else [i for i, m in enumerate(np.asarray(mask).reshape(-1)) if m]
    ps = {i for i in keep if pred[i] == cls}
    gs = {i for i in keep if gt[i] == cls}
    union = ps | gs
    return len(ps & gs) / len(union) if union else None
