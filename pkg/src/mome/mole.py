"""Mixture of language experts: top-1 gated bottleneck adapters.

An adapter computes ``s * up(relu(down(x)))``. A block holds K adapters and
an MLP router; every routing unit (a sample, or a token for token-level
routers) runs through exactly one adapter. The hard gate trains with a
straight-through surrogate: the forward value is the selected adapter's
output, and the backward pass treats it as ``y * p_sel / stop_grad(p_sel)``
so the router receives ``<g, y> / p_sel`` on the selected probability.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ops
from .errors import ConfigError, ContractError, DimensionError
from .move import RouterDecision
from .nn import FeedForward, Linear, Module, param
from .tensor import DTYPE, Tensor, as_tensor, record

VARIANTS = ("T", "I", "IT")
BALANCE = ("none", "GS", "LB")

HostBlock = FeedForward


class Adapter(Module):
    def __init__(self, width: int, rank: int, rng: np.random.Generator, s_init: float = 0.0):
        if rank < 1:
            raise ConfigError(f"adapter rank must be >= 1, got {rank}", ["rank"])
        self.down = Linear(width, rank, rng)
        self.up = Linear(rank, width, rng)
        self.s = param(np.array(s_init))
        self._width = width

    @property
    def width(self) -> int:
        return self._width

    def __call__(self, x: Tensor) -> Tensor:
        return ops.mul(self.up(ops.relu(self.down(x))), self.s)


def adapter_forward(x: Tensor, a: Adapter) -> Tensor:
    if x.shape[-1] != a.width:
        raise DimensionError(f"adapter width {a.width} does not match input {x.shape}")
    return a(x)


def route_top1(logits) -> tuple[np.ndarray, np.ndarray]:
    """One-hot argmax over the last axis; ties go to the lowest index."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=DTYPE)
    if z.shape[-1] < 1:
        raise ContractError("route_top1 needs at least one expert")
    idx = np.argmax(z, axis=-1)
    onehot = np.zeros(z.shape)
    np.put_along_axis(onehot, np.expand_dims(idx, -1), 1.0, axis=-1)
    return onehot, idx


def gumbel_noise(shape, rng) -> np.ndarray:
    u = rng.uniform(np.finfo(DTYPE).tiny, 1.0, size=shape)
    return -np.log(-np.log(u))


def gumbel_perturb(logits, temperature: float, rng):
    """``logits / temperature + G`` with standard Gumbel ``G``.

    Argmax of the result is a sample from ``softmax(logits / temperature)``.
    Returns the same kind (Tensor or array) as ``logits``.
    """
    if not temperature > 0:
        raise ConfigError(f"gumbel temperature must be > 0, got {temperature}", ["gumbel_temperature"])
    z = as_tensor(logits) if isinstance(logits, Tensor) else np.asarray(logits, dtype=DTYPE)
    G = gumbel_noise(z.shape, rng)
    if isinstance(z, Tensor):
        return ops.add(ops.scale(z, 1.0 / temperature), Tensor(G))
    return z / temperature + G


def load_balance_loss(selections, probs: Tensor) -> Tensor:
    """``K * sum_k fraction_k * mean_prob_k``; differentiable through ``probs`` only."""
    sel = np.asarray(selections, dtype=DTYPE)
    if sel.ndim != 2 or sel.shape[0] == 0:
        raise ContractError(f"load balance loss needs a non-empty (n, K) batch, got {sel.shape}")
    if probs.shape != sel.shape:
        raise DimensionError(f"selections {sel.shape} vs probabilities {probs.shape}")
    n, K = sel.shape
    fraction = sel.mean(axis=0)
    mass = ops.mean(probs, axis=0)
    return ops.scale(ops.sum(ops.mul(mass, Tensor(fraction))), float(K))


def straight_through(y: Tensor, probs: Tensor, selected: np.ndarray) -> Tensor:
    """Forward ``y``; backward as ``y * p_sel / stop_grad(p_sel)`` per routing row."""
    rows = np.arange(len(selected))
    p_sel = probs.data[rows, selected]

    def backward(g):
        gp = None
        if probs.requires_grad:
            gp = np.zeros_like(probs.data)
            axes = tuple(range(1, y.ndim))
            gp[rows, selected] = (g * y.data).sum(axis=axes) / p_sel
        return g, gp

    return record("straight_through", y.data.copy(), (y, probs), backward)


class GateMLP(Module):
    """Router logits ``W2 gelu(W1 x + b1) + b2``; final layer starts at zero."""

    def __init__(self, d_in: int, n_experts: int, rng: np.random.Generator, hidden: int | None = None):
        hidden = hidden or 4 * d_in
        self.fc1 = Linear(d_in, hidden, rng)
        self.fc2 = Linear(hidden, n_experts, rng, zero=True)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


@dataclass
class MoleRouting:
    level: str  # "instance" or "token"
    logits: np.ndarray  # (n, K) gate logits actually used for selection
    probs: Tensor  # (n, K)
    selected: np.ndarray  # (n,)
    onehot: np.ndarray  # (n, K)
    counts: np.ndarray  # adapter executions per expert in this call

    def decision(self) -> RouterDecision:
        return RouterDecision(Tensor(self.onehot), self.logits, self.selected)


class MoleBlock(Module):
    """K adapters behind a top-1 router.

    Variants: ``I`` routes each sample on its instruction embedding, ``T``
    routes each token on its hidden state, ``IT`` routes on the token state
    concatenated with the instruction embedding. ``IT`` gates per token by
    default; ``it_gate="instance"`` averages the token logits per sample.
    Balance ``GS`` adds Gumbel noise to the logits while training; ``LB``
    only changes the loss, computed by the caller from the returned routing.
    """

    def __init__(self, width: int, d_instruction: int, n_experts: int, rank: int,
                 rng: np.random.Generator, variant: str = "I", balance: str = "none",
                 temperature: float = 1.0, it_gate: str = "token", experts: Sequence[Adapter] | None = None):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown MoLE variant {variant!r}; expected one of {VARIANTS}", ["variant"])
        if balance not in BALANCE:
            raise ConfigError(f"unknown balance {balance!r}; expected one of {BALANCE}", ["balance"])
        if n_experts < 1:
            raise ConfigError("MoLE needs at least one expert", ["experts"])
        if it_gate not in ("token", "instance"):
            raise ConfigError(f"unknown IT gate {it_gate!r}", ["it_gate"])
        if balance == "GS" and not temperature > 0:
            raise ConfigError(f"gumbel temperature must be > 0, got {temperature}", ["gumbel_temperature"])
        if experts is None:
            experts = [Adapter(width, rank, rng) for _ in range(n_experts)]
        self.experts = list(experts)
        d_in = {"I": d_instruction, "T": width, "IT": width + d_instruction}[variant]
        self.router = GateMLP(d_in, n_experts, rng)
        self._width = width
        self._d_instruction = d_instruction
        self._variant = variant
        self._balance = balance
        self._temperature = temperature
        self._it_gate = it_gate

    @property
    def variant(self) -> str:
        return self._variant

    @property
    def balance(self) -> str:
        return self._balance

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def _router_input(self, x: Tensor, I: Tensor | None) -> tuple[Tensor, str]:
        B, T, C = x.shape
        if self._variant in ("I", "IT"):
            if I is None or I.shape != (B, self._d_instruction):
                got = None if I is None else I.shape
                raise ConfigError(f"variant {self._variant} needs instruction embeddings of shape "
                                  f"{(B, self._d_instruction)}, got {got}", ["variant"])
        if self._variant == "I":
            return I, "instance"
        tokens = ops.reshape(x, (B * T, C))
        if self._variant == "T":
            return tokens, "token"
        ins = ops.reshape(ops.expand(ops.reshape(I, (B, 1, self._d_instruction)), (B, T, self._d_instruction)),
                          (B * T, self._d_instruction))
        return ops.concat([tokens, ins], axis=1), ("token" if self._it_gate == "token" else "instance")

    def __call__(self, x: Tensor, I: Tensor | None = None, rng: np.random.Generator | None = None,
                 training: bool = False) -> tuple[Tensor, MoleRouting]:
        if x.ndim != 3 or x.shape[-1] != self._width:
            raise DimensionError(f"MoLE block expects (B, T, {self._width}), got {x.shape}")
        B, T, C = x.shape
        r_in, level = self._router_input(x, I)
        logits = self.router(r_in)
        if self._variant == "IT" and level == "instance":
            logits = ops.mean(ops.reshape(logits, (B, T, self.n_experts)), axis=1)
        if self._balance == "GS" and training:
            if rng is None:
                raise ConfigError("Gumbel balancing needs an rng while training", ["balance"])
            logits = gumbel_perturb(logits, self._temperature, rng)
        probs = ops.softmax(logits, axis=-1)
        onehot, selected = route_top1(logits)

        rows = x if level == "instance" else ops.reshape(x, (B * T, C))
        n = rows.shape[0]
        parts, index, counts = [], [], np.zeros(self.n_experts, dtype=np.int64)
        for k, expert in enumerate(self.experts):
            idx = np.flatnonzero(selected == k)
            if idx.size == 0:
                continue
            sub = rows if idx.size == n else ops.take_rows(rows, idx)
            parts.append(expert(sub))
            index.append(idx)
            counts[k] = idx.size
        combined = parts[0] if len(parts) == 1 and index[0].size == n else ops.scatter_rows(parts, index, n)
        out = straight_through(combined, probs, selected)
        if level == "token":
            out = ops.reshape(out, (B, T, C))
        routing = MoleRouting(level, logits.data.copy(), probs, selected, onehot, counts)
        return out, routing


def mole_forward(x: Tensor, I: Tensor | None, block: MoleBlock, rng=None, training: bool = False) -> Tensor:
    """Apply a block to one ``(T, C)`` sequence or a ``(B, T, C)`` batch."""
    single = x.ndim == 2
    if single:
        x = ops.reshape(x, (1,) + x.shape)
        if I is not None:
            I = ops.reshape(as_tensor(I), (1,) + tuple(as_tensor(I).shape))
    out, _ = block(x, I, rng=rng, training=training)
    return ops.reshape(out, out.shape[1:]) if single else out


def mole_stage2_init(stage1_adapter: Adapter, K: int, rng: np.random.Generator, d_instruction: int,
                     variant: str = "I", balance: str = "none", temperature: float = 1.0,
                     it_gate: str = "token") -> MoleBlock:
    """K exact copies of a trained adapter behind a freshly initialised router."""
    experts = [copy.deepcopy(stage1_adapter) for _ in range(K)]
    rank = stage1_adapter.down.weight.shape[1]
    return MoleBlock(stage1_adapter.width, d_instruction, K, rank, rng, variant, balance, temperature,
                     it_gate, experts=experts)
