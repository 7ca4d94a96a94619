"""Parameter containers: a minimal Module plus the layers the model needs."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Param, Tensor, affine, default_dtype, layer_norm


class Module:
    """Walks attributes in definition order to find Params and sub-Modules."""

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Param):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_params(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_params(f"{name}.{i}.")
                    elif isinstance(item, Param):
                        yield f"{name}.{i}", item
            elif isinstance(val, dict):
                for k, item in val.items():
                    if isinstance(item, Module):
                        yield from item.named_params(f"{name}.{k}.")
                    elif isinstance(item, Param):
                        yield f"{name}.{k}", item

    def params(self) -> list[Param]:
        return [p for _, p in self.named_params()]

    def param_count(self) -> int:
        return sum(p.size for p in self.params())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.named_params()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_params())
        if strict:
            missing = set(own) - set(state)
            extra = set(state) - set(own)
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, arr in state.items():
            if name in own:
                p = own[name]
                if p.shape != tuple(arr.shape):
                    raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
                p.data[...] = arr

    def zero_grad(self) -> None:
        for p in self.params():
            p.grad = None


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True, init: str = "xavier"):
        if init == "zeros":
            w = np.zeros((in_dim, out_dim))
        else:
            bound = np.sqrt(6.0 / (in_dim + out_dim))
            w = rng.uniform(-bound, bound, size=(in_dim, out_dim))
        self.weight = Param(w.astype(default_dtype()))
        self.bias = Param(np.zeros(out_dim, dtype=default_dtype())) if bias else None
        self.in_dim = in_dim
        self.out_dim = out_dim

    def __call__(self, x: Tensor) -> Tensor:
        return affine(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Param(np.ones(dim, dtype=default_dtype()))
        self.bias = Param(np.zeros(dim, dtype=default_dtype()))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)
