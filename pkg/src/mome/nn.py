"""Parameter containers and the standard transformer sublayers."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .tensor import Tensor


def kaiming_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def param(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Module:
    """Walks attributes (tensors, modules, lists of modules) in definition order.

    Every public Tensor attribute is a parameter, frozen or not; keep
    buffers under underscore names.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable(self) -> list[Tensor]:
        return [p for p in self.parameters() if p.requires_grad]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} != parameter {p.shape}")
            p.data[...] = arr


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 zero: bool = False):
        w = np.zeros((d_in, d_out)) if zero else kaiming_uniform(rng, d_in, (d_in, d_out))
        self.weight = param(w)
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5):
        self.gain = param(np.ones(width))
        self.bias = param(np.zeros(width))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.bias, self._eps)


class FeedForward(Module):
    """Two-layer GeLU MLP."""

    def __init__(self, width: int, hidden: int, rng: np.random.Generator, zero_out: bool = False):
        self.fc1 = Linear(width, hidden, rng)
        self.fc2 = Linear(hidden, width, rng, zero=zero_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class SelfAttention(Module):
    """Multi-head scaled dot-product attention without positional encoding."""

    def __init__(self, width: int, n_heads: int, rng: np.random.Generator, zero_out: bool = False):
        if width % n_heads:
            raise ConfigError(f"width {width} not divisible by {n_heads} heads", ["heads"])
        self.q = Linear(width, width, rng)
        self.k = Linear(width, width, rng)
        self.v = Linear(width, width, rng)
        self.o = Linear(width, width, rng, zero=zero_out)
        self._heads = n_heads

    def __call__(self, x: Tensor) -> Tensor:
        single = x.ndim == 2
        if single:
            x = ops.reshape(x, (1,) + x.shape)
        B, L, C = x.shape
        h = self._heads
        d = C // h

        def split(t):
            return ops.transpose(ops.reshape(t, (B, L, h, d)), (0, 2, 1, 3))

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
        attn = ops.softmax(scores, axis=-1)
        ctx = ops.reshape(ops.transpose(ops.matmul(attn, v), (0, 2, 1, 3)), (B, L, C))
        out = self.o(ctx)
        return ops.reshape(out, (L, C)) if single else out


def self_attention(x: Tensor, params: SelfAttention, n_heads: int) -> Tensor:
    if x.shape[-1] % n_heads:
        raise ConfigError(f"width {x.shape[-1]} not divisible by {n_heads} heads", ["heads"])
    if params._heads != n_heads:
        raise ConfigError(f"attention built for {params._heads} heads, called with {n_heads}", ["heads"])
    return params(x)
