"""Small reverse-mode autodiff engine over numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure that pushes the upstream gradient back to them.  The tape is
rebuilt on every forward pass; gradients accumulate additively until
:meth:`Tensor.zero_grad` (or :func:`zero_grads`) is called.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, NumericError

_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Switch the float width used for new tensors (float64 or float32)."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype.type


def default_dtype():
    return _DTYPE


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {what}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None, _op: str = ""):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    # -- basic attributes -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- backprop ---------------------------------------------------------
    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accum(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is None and node.grad is not None:
                _check_finite(node.grad, "backward pass")

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Param(Tensor):
    """A trainable leaf tensor with a checkpoint key."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=_DTYPE), requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DTYPE))


def _result(data: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
    _check_finite(data, op)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, _op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, _op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), back, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _result(out, (x,), lambda g: (g / x.data,), "log")


def square(x: Tensor) -> Tensor:
    return _result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def softplus(x) -> Tensor:
    """ln(1 + e^x), evaluated as max(x, 0) + log1p(e^-|x|) to avoid overflow."""
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))

    def back(g):
        # sigmoid(x), split by sign for stability
        e = np.exp(-np.abs(x.data))
        sig = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (g * sig,)

    return _result(out, (x,), back, "softplus")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU; smooth everywhere, so finite differences behave."""
    u = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def back(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
        d = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
        return (g * d,)

    return _result(out, (x,), back, "gelu")


# -- shape ops --------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _result(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    basic = _is_basic(idx)

    def back(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(out), (x,), back, "getitem")


def _scatter_rows(n_rows: int, index: np.ndarray, vals: np.ndarray) -> np.ndarray:
    """out[index[i]] += vals[i], accumulated in order (bincount beats np.add.at)."""
    if len(index) == 0:
        return np.zeros((n_rows,) + vals.shape[1:], dtype=vals.dtype)
    k = int(np.prod(vals.shape[1:], dtype=np.int64))
    flat = vals.reshape(len(index), k)
    keys = (index[:, None] * k + np.arange(k)).ravel()
    out = np.bincount(keys, weights=flat.ravel(), minlength=n_rows * k)
    return out.reshape((n_rows,) + vals.shape[1:]).astype(vals.dtype, copy=False)


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather along axis 0; repeated indices accumulate in backward."""
    index = np.asarray(index, dtype=np.intp)
    out = x.data[index]

    def back(g):
        return (_scatter_rows(x.shape[0], index, g),)

    return _result(out, (x,), back, "take_rows")


def segment_sum(x: Tensor, segment: np.ndarray, n_segments: int) -> Tensor:
    """Sum rows of ``x`` into ``n_segments`` buckets (inverse of take_rows)."""
    segment = np.asarray(segment, dtype=np.intp)
    out = _scatter_rows(n_segments, segment, x.data)
    return _result(out, (x,), lambda g: (g[segment],), "segment_sum")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def back(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _result(out, tuple(xs), back, "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.stack([x.data for x in xs], axis=axis)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return _result(out, tuple(xs), back, "stack")


# -- reductions ---------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / n)


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0] or b.ndim != 2:
        raise DimensionError(f"matmul shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _result(out, (a, b), back, "matmul")


def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y[..., j] = sum_i x[..., i] W[i, j] + b[j]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim == 0 or weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"affine: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"affine: bias {bias.shape} does not match weight {weight.shape}")
    flat = x.data.reshape(-1, x.shape[-1])
    out = flat @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(x.shape[:-1] + (weight.shape[1],))

    def back(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = flat.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, back, "affine")


# -- normalisation ------------------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), back, "softmax")


def masked_softmax(x: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax where masked-out entries get exactly zero probability.

    Rows whose mask is entirely False come out as all zeros.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    z = np.where(mask, x.data, -np.inf)
    zmax = z.max(axis=axis, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.where(mask, np.exp(np.where(mask, x.data, 0.0) - zmax), 0.0)
    denom = e.sum(axis=axis, keepdims=True)
    out = e / np.where(denom > 0, denom, 1.0)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), back, "masked_softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), back, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = x.shape[-1]

    def back(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / n)
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gain, bias), back, "layer_norm")


# -- bilinear sampling --------------------------------------------------------

def sample_maps(maps: Tensor, points, batch_index: np.ndarray | None = None) -> Tensor:
    """Bilinearly sample grouped feature maps at continuous grid coordinates.

    maps:   [B, Hp, Wp, G, Cg]
    points: [N, G, K, 2] as (row, col); integer coordinates hit grid nodes.
    batch_index: [N] map index per row of ``points`` (defaults to map 0).
    Returns [N, G, K, Cg].  Corners outside the map contribute zero.
    """
    points = as_tensor(points)
    B, Hp, Wp, G, Cg = maps.shape
    N, Gp, K, two = points.shape
    if Gp != G or two != 2:
        raise DimensionError(f"sample_maps: points {points.shape} vs maps {maps.shape}")
    if batch_index is None:
        batch_index = np.zeros(N, dtype=np.intp)
    bi = np.asarray(batch_index, dtype=np.intp)[:, None, None]
    gi = np.arange(G)[None, :, None]

    r = points.data[..., 0]
    c = points.data[..., 1]
    r0 = np.floor(r)
    c0 = np.floor(c)
    fr = r - r0
    fc = c - c0
    r0 = r0.astype(np.intp)
    c0 = c0.astype(np.intp)

    flat = maps.data.reshape(-1, Cg)
    corners = []
    for dr, dc, w, dw_dr, dw_dc in (
        (0, 0, (1 - fr) * (1 - fc), -(1 - fc), -(1 - fr)),
        (0, 1, (1 - fr) * fc, -fc, (1 - fr)),
        (1, 0, fr * (1 - fc), (1 - fc), -fr),
        (1, 1, fr * fc, fc, fr),
    ):
        rr = r0 + dr
        cc = c0 + dc
        valid = (rr >= 0) & (rr < Hp) & (cc >= 0) & (cc < Wp)
        idx = (((bi * Hp + np.clip(rr, 0, Hp - 1)) * Wp + np.clip(cc, 0, Wp - 1)) * G + gi)
        idx = np.broadcast_to(idx, r.shape)
        vals = flat[idx] * valid[..., None]
        corners.append((idx, valid * w, w, dw_dr, dw_dc, vals))

    out = corners[0][2][..., None] * corners[0][5]
    for _, _, w, _, _, vals in corners[1:]:
        out = out + w[..., None] * vals

    def back(g):
        gmaps = None
        if maps.requires_grad:
            # scatter-add through bincount on (node, channel) keys; much faster than np.add.at
            lanes = np.arange(Cg)
            keys = np.concatenate([(cn[0][..., None] * Cg + lanes).ravel() for cn in corners])
            contrib = np.concatenate([(cn[1][..., None] * g).ravel() for cn in corners])
            gmaps = np.bincount(keys, weights=contrib, minlength=flat.size).reshape(maps.shape).astype(g.dtype)
        gpts = None
        if points.requires_grad:
            gr = np.zeros(r.shape, dtype=g.dtype)
            gc = np.zeros(r.shape, dtype=g.dtype)
            for _, _, _, dw_dr, dw_dc, vals in corners:
                gv = (g * vals).sum(axis=-1)
                gr += dw_dr * gv
                gc += dw_dc * gv
            gpts = np.stack([gr, gc], axis=-1)
        return gmaps, gpts

    return _result(out, (maps, points), back, "sample_maps")


def grid_sample2d(plane: Tensor, points) -> Tensor:
    """Sample a [Hp, Wp, C] plane at [N, 2] (row, col) points -> [N, C]."""
    plane = as_tensor(plane)
    points = as_tensor(points)
    Hp, Wp, C = plane.shape
    N = points.shape[0]
    out = sample_maps(plane.reshape(1, Hp, Wp, 1, C), points.reshape(N, 1, 1, 2))
    return out.reshape(N, C)


# -- parameter utilities --------------------------------------------------------

def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6,
               floor: float = 1e-6, max_elems: int | None = None, rng=None) -> float:
    """Worst relative error between tape gradients and central differences.

    ``f`` is re-evaluated from scratch for every perturbation, so it must read
    the parameters' ``data`` arrays at call time.  Relative error per element is
    |analytic - numeric| / max(|analytic|, |numeric|, floor).  With
    ``max_elems`` only a random subset of each parameter's entries is probed.
    """
    zero_grads(params)
    out = f()
    if not np.isfinite(out.data).all():
        raise NumericError("grad_check: objective is not finite")
    out.backward()
    worst = 0.0
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        picks = np.arange(flat.size)
        if max_elems is not None and flat.size > max_elems:
            picks = np.sort(rng.choice(flat.size, size=max_elems, replace=False))
        for i in picks:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError("grad_check: objective is not finite")
            num = (fp - fm) / (2 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    zero_grads(params)
    return worst


# -- checkpoint io ---------------------------------------------------------------

MAGIC = b"S2TPV01"
_DTYPE_CODES = {np.dtype("<f8"): 0, np.dtype("<f4"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_checkpoint(path, named: Sequence[tuple[str, np.ndarray]]) -> None:
    """Write arrays in the S2TPV01 little-endian layout."""
    names = [n for n, _ in named]
    if len(set(names)) != len(names):
        raise ValueError("duplicate parameter names in checkpoint")
    header = bytearray(MAGIC)
    header += struct.pack("<I", len(named))
    bufs = []
    for name, arr in named:
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise ValueError(f"cannot checkpoint dtype {arr.dtype}")
        raw = name.encode("utf-8")
        header += struct.pack("<I", len(raw)) + raw
        header += struct.pack("<BI", _DTYPE_CODES[dt], arr.ndim)
        header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        bufs.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    with open(path, "wb") as fh:
        fh.write(bytes(header))
        for b in bufs:
            fh.write(b)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not an S2TPV01 checkpoint")
    pos = len(MAGIC)
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        code, rank = struct.unpack_from("<BI", blob, pos)
        pos += 5
        shape = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        entries.append((name, _CODE_DTYPES[code], shape))
    out = {}
    for name, dt, shape in entries:
        n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        out[name] = np.frombuffer(blob, dtype=dt, count=n // dt.itemsize, offset=pos).reshape(shape).copy()
        pos += n
    return out
