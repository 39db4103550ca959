"""Mixture of vision experts.

Each expert's feature map, whatever its H x W, is turned into an L x C
token sequence by the adaptive deformable transformation (ADT): an adaptive
average pool seeds the queries, then M deformable layers refine them by
sampling the original map. An instruction-conditioned soft router mixes the
per-expert sequences.

Coordinates are normalised ``(x, y)`` in ``[0, 1]^2`` and map to pixel space
as ``x * (W - 1)``, ``y * (H - 1)``; taps that fall outside the grid read
zero.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .nn import FeedForward, LayerNorm, Linear, Module, SelfAttention, param
from .tensor import DTYPE, Tensor, as_tensor, record


@dataclass
class AdtConfig:
    pool_h: int = 3
    pool_w: int = 3
    layers: int = 6
    heads: int = 8
    points: int = 4
    width: int = 64

    @property
    def L(self) -> int:
        return self.pool_h * self.pool_w

    def validate(self) -> None:
        if self.pool_h < 1 or self.pool_w < 1:
            raise ConfigError(f"pooled grid must be at least 1x1, got {self.pool_h}x{self.pool_w}",
                              ["pool_h", "pool_w"])
        if self.layers < 0 or self.heads < 1 or self.points < 1:
            raise ConfigError("layers >= 0, heads >= 1 and points >= 1 required", ["layers", "heads", "points"])
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by {self.heads} heads", ["width", "heads"])


@dataclass
class FeatureMap:
    expert_id: int
    grid: Tensor | np.ndarray

    def __post_init__(self):
        g = self.grid.data if isinstance(self.grid, Tensor) else np.asarray(self.grid)
        if g.ndim != 3 or g.shape[0] < 1 or g.shape[1] < 1:
            raise DimensionError(f"feature map must be H x W x C with H, W >= 1, got {g.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.grid.shape)


@dataclass
class RouterDecision:
    weights: Tensor
    logits: np.ndarray
    selected: np.ndarray | None = None


@dataclass
class MoveOutput:
    fused: Tensor
    weights: RouterDecision
    per_expert: list[Tensor] = field(default_factory=list)


# ---------------------------------------------------------------- pooling

def pool_bins(size: int, out: int) -> list[tuple[int, int]]:
    return [((i * size) // out, -((-(i + 1) * size) // out)) for i in range(out)]


def bin_indicator(H: int, W: int, out_h: int, out_w: int) -> tuple[np.ndarray, np.ndarray]:
    """``(out_h*out_w, H*W)`` 0/1 bin membership and the cell count of every bin."""
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"pool target must be >= 1x1, got {out_h}x{out_w}", ["pool_h", "pool_w"])
    M = np.zeros((out_h * out_w, H * W))
    for i, (r0, r1) in enumerate(pool_bins(H, out_h)):
        for j, (c0, c1) in enumerate(pool_bins(W, out_w)):
            rows = np.arange(r0, r1)[:, None] * W + np.arange(c0, c1)
            M[i * out_w + j, rows.reshape(-1)] = 1.0
    return M, M.sum(axis=1)


def pooling_matrix(H: int, W: int, out_h: int, out_w: int) -> np.ndarray:
    """``(out_h*out_w, H*W)`` matrix averaging each adaptive bin."""
    M, n = bin_indicator(H, W, out_h, out_w)
    return M / n[:, None]


def bin_mean(value: Tensor, member: np.ndarray, counts: np.ndarray) -> Tensor:
    """``(member @ value) / counts`` per row: bin sums first, one division after."""
    out = (member @ value.data) / counts[:, None]
    return record("bin_mean", out, (value,), lambda g: (member.T @ (g / counts[:, None]),))


def adaptive_avg_pool2d(f: FeatureMap | Tensor, out_h: int, out_w: int) -> Tensor:
    grid = as_tensor(f.grid if isinstance(f, FeatureMap) else f)
    H, W, C = grid.shape
    M, n = bin_indicator(H, W, out_h, out_w)
    pooled = bin_mean(ops.reshape(grid, (H * W, C)), M, n)
    return ops.reshape(pooled, (out_h, out_w, C))


class FeatureBatch:
    """Several maps of one expert flattened into a single ``(T, C_e)`` value array."""

    def __init__(self, maps: Sequence[FeatureMap]):
        if not maps:
            raise DimensionError("feature batch needs at least one map")
        ids = {m.expert_id for m in maps}
        if len(ids) != 1:
            raise DimensionError(f"feature batch mixes experts {sorted(ids)}")
        chans = {m.grid.shape[2] for m in maps}
        if len(chans) != 1:
            raise DimensionError(f"expert channel width must be fixed, got {sorted(chans)}")
        self.expert_id = ids.pop()
        self.channels = chans.pop()
        self.heights = np.array([m.grid.shape[0] for m in maps], dtype=np.intp)
        self.widths = np.array([m.grid.shape[1] for m in maps], dtype=np.intp)
        sizes = self.heights * self.widths
        self.starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.intp)
        self.total = int(sizes.sum())
        grids = [m.grid for m in maps]
        if any(isinstance(g, Tensor) and g.requires_grad for g in grids):
            flat = [ops.reshape(as_tensor(g), (g.shape[0] * g.shape[1], self.channels)) for g in grids]
            self.value = ops.concat(flat, axis=0) if len(flat) > 1 else flat[0]
        else:
            arrs = [(g.data if isinstance(g, Tensor) else np.asarray(g, dtype=DTYPE)).reshape(-1, self.channels)
                    for g in grids]
            self.value = Tensor(np.concatenate(arrs, axis=0), copy=False)
        self._pool = {}

    def __len__(self) -> int:
        return len(self.heights)

    def pool_matrix(self, out_h: int, out_w: int) -> tuple[np.ndarray, np.ndarray]:
        """Block bin-membership matrix ``(B*L, T)`` over the flat value array, and bin counts."""
        key = (out_h, out_w)
        if key not in self._pool:
            L = out_h * out_w
            M = np.zeros((len(self) * L, self.total))
            n = np.zeros(len(self) * L)
            for b, (H, W, s) in enumerate(zip(self.heights, self.widths, self.starts)):
                Mb, nb = bin_indicator(int(H), int(W), out_h, out_w)
                M[b * L:(b + 1) * L, s:s + H * W] = Mb
                n[b * L:(b + 1) * L] = nb
            self._pool[key] = (M, n)
        return self._pool[key]

    def pooled(self, out_h: int, out_w: int) -> Tensor:
        """``(B, out_h*out_w, C_e)`` pooled query seeds."""
        out = bin_mean(self.value, *self.pool_matrix(out_h, out_w))
        return ops.reshape(out, (len(self), out_h * out_w, self.channels))


# ---------------------------------------------------------------- sampling

@dataclass
class SampleLayout:
    heights: np.ndarray
    widths: np.ndarray
    starts: np.ndarray
    owner: np.ndarray  # query row -> index of the map it samples


_TAPS = ((0, 0), (0, 1), (1, 0), (1, 1))  # (dy, dx)


def deform_sample(value: Tensor, points: Tensor, weights: Tensor, layout: SampleLayout) -> Tensor:
    """Weighted multi-point bilinear sampling, one head per channel slice.

    value ``(T, N_h*C_h)``; points ``(Q, N_h, N_p, 2)``; weights
    ``(Q, N_h, N_p)``. Returns ``(Q, N_h*C_h)`` where head j of query i is
    ``sum_k weights[i,j,k] * bilinear(value_j, points[i,j,k])``.
    """
    Q, Nh, Np, two = points.shape
    if two != 2 or weights.shape != (Q, Nh, Np):
        raise DimensionError(f"deform_sample: points {points.shape} vs weights {weights.shape}")
    T, C = value.shape
    if C % Nh:
        raise ConfigError(f"value width {C} not divisible by {Nh} heads", ["heads"])
    Ch = C // Nh
    H = layout.heights[layout.owner].astype(DTYPE)[:, None, None]
    W = layout.widths[layout.owner].astype(DTYPE)[:, None, None]
    Wi = layout.widths[layout.owner][:, None, None]
    start = layout.starts[layout.owner][:, None, None]
    px = points.data[..., 0] * (W - 1.0)
    py = points.data[..., 1] * (H - 1.0)
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    v3 = value.data.reshape(T, Nh, Ch)
    head = np.arange(Nh)[None, :, None]

    idx, coef, valid_l, taps = [], [], [], []
    for dy, dx in _TAPS:
        xi = x0 + dx
        yi = y0 + dy
        valid = (xi >= 0) & (xi <= W - 1) & (yi >= 0) & (yi <= H - 1)  # False for NaN
        xs = np.clip(np.where(valid, xi, 0), 0, W - 1).astype(np.intp)
        ys = np.clip(np.where(valid, yi, 0), 0, H - 1).astype(np.intp)
        ix = start + ys * Wi + xs
        wx = fx if dx else 1.0 - fx
        wy = fy if dy else 1.0 - fy
        idx.append(ix)
        valid_l.append(valid)
        coef.append(np.where(valid, wx * wy, 0.0))
        taps.append(np.where(valid[..., None], v3[ix, head], 0.0))  # (Q, Nh, Np, Ch)
    sampled = sum(c[..., None] * t for c, t in zip(coef, taps))
    out = (weights.data[..., None] * sampled).sum(axis=2).reshape(Q, C)

    def backward(g):
        gh = g.reshape(Q, Nh, Ch)
        g_w = (gh[:, :, None, :] * sampled).sum(axis=-1) if weights.requires_grad else None
        g_s = weights.data[..., None] * gh[:, :, None, :]
        g_value = None
        if value.requires_grad:
            flat = np.zeros(T * Nh * Ch)
            chan = np.arange(Ch)
            for ix, c in zip(idx, coef):
                pos = ((ix * Nh + head)[..., None] * Ch + chan).reshape(-1)
                flat += np.bincount(pos, weights=(c[..., None] * g_s).reshape(-1), minlength=T * Nh * Ch)
            g_value = flat.reshape(T, C)
        g_points = None
        if points.requires_grad:
            dsx = np.zeros_like(sampled)
            dsy = np.zeros_like(sampled)
            for (dy, dx), valid, t in zip(_TAPS, valid_l, taps):
                wy = fy if dy else 1.0 - fy
                wx = fx if dx else 1.0 - fx
                sx = (1.0 if dx else -1.0) * wy
                sy = (1.0 if dy else -1.0) * wx
                dsx += np.where(valid, sx, 0.0)[..., None] * t
                dsy += np.where(valid, sy, 0.0)[..., None] * t
            g_points = np.stack([(g_s * dsx).sum(-1) * (W - 1.0), (g_s * dsy).sum(-1) * (H - 1.0)], axis=-1)
        return g_value, g_points, g_w

    return record("deform_sample", out, (value, points, weights), backward)


def bilinear_sample(value: Tensor | np.ndarray, p) -> Tensor:
    """Bilinear read of an ``H x W x C`` map at normalised point ``p = (x, y)``."""
    value = as_tensor(value)
    H, W, C = value.shape
    pts = p if isinstance(p, Tensor) else Tensor(np.asarray(p, dtype=DTYPE))
    layout = SampleLayout(np.array([H]), np.array([W]), np.array([0]), np.array([0]))
    out = deform_sample(ops.reshape(value, (H * W, C)), ops.reshape(pts, (1, 1, 1, 2)),
                        Tensor(np.ones((1, 1, 1))), layout)
    return ops.reshape(out, (C,))


# ---------------------------------------------------------------- deformable attention

def reference_grid(pool_h: int, pool_w: int) -> np.ndarray:
    """Cell centres of the pooled grid, row-major, as ``(x, y)``."""
    ys = (np.arange(pool_h) + 0.5) / pool_h
    xs = (np.arange(pool_w) + 0.5) / pool_w
    return np.array([(x, y) for y in ys for x in xs])


def _tile_reference(R: Tensor, n_batch: int, heads: int, points: int) -> Tensor:
    L = R.shape[0]
    tiled = ops.expand(ops.reshape(R, (1, L, 1, 2)), (n_batch, L, heads * points, 2))
    return ops.reshape(tiled, (n_batch * L, heads, points, 2))


def gen_sampling_points(q: Tensor, R: Tensor, proj_p: Linear, heads: int, points: int) -> Tensor:
    """``p[i, j, k] = offset(q_i)[j, k] + R_i`` for query rows ``(B*L, C)`` or ``(L, C)``.

    Not clamped; the sampler zero-pads out-of-range taps.
    """
    Q = q.shape[0]
    L = R.shape[0]
    if Q % L:
        raise DimensionError(f"{Q} query rows are not a multiple of {L} reference points")
    offsets = ops.reshape(proj_p(q), (Q, heads, points, 2))
    return ops.add(offsets, _tile_reference(R, Q // L, heads, points))


def gen_attention_weights(q: Tensor, proj_w: Linear, heads: int, points: int) -> Tensor:
    """Per-head softmax over the sampled points."""
    logits = ops.reshape(proj_w(q), (q.shape[0], heads, points))
    return ops.softmax(logits, axis=-1)


class DeformableCrossAttention(Module):
    def __init__(self, in_channels: int, cfg: AdtConfig, rng: np.random.Generator,
                 value_bias: bool = True, zero_out: bool = False):
        cfg.validate()
        C, Nh, Np = cfg.width, cfg.heads, cfg.points
        self.proj_p = Linear(C, Nh * Np * 2, rng, zero=True)
        self.proj_w = Linear(C, Nh * Np, rng, zero=True)
        self.proj_v = Linear(in_channels, C, rng, bias=value_bias)
        self.proj_o = Linear(C, C, rng, zero=zero_out)
        self.reference = param(reference_grid(cfg.pool_h, cfg.pool_w))
        self._cfg = cfg

    def sampling_points(self, q2: Tensor) -> Tensor:
        return gen_sampling_points(q2, self.reference, self.proj_p, self._cfg.heads, self._cfg.points)

    def __call__(self, q: Tensor, fb: FeatureBatch) -> Tensor:
        B, L, C = q.shape
        if B != len(fb):
            raise DimensionError(f"{B} query sets for {len(fb)} feature maps")
        cfg = self._cfg
        q2 = ops.reshape(q, (B * L, C))
        pts = self.sampling_points(q2)
        w = gen_attention_weights(q2, self.proj_w, cfg.heads, cfg.points)
        value = self.proj_v(fb.value)
        layout = SampleLayout(fb.heights, fb.widths, fb.starts, np.repeat(np.arange(B), L))
        o = deform_sample(value, pts, w, layout)
        return ops.reshape(self.proj_o(o), (B, L, C))

    def clamp_reference(self) -> None:
        np.clip(self.reference.data, 0.0, 1.0, out=self.reference.data)


def deformable_cross_attention(q: Tensor, f: FeatureMap, params: DeformableCrossAttention) -> Tensor:
    """Single-sample form: ``q`` is ``(L, C)``."""
    out = params(ops.reshape(q, (1,) + q.shape), FeatureBatch([f]))
    return ops.reshape(out, q.shape)


class DeformableLayer(Module):
    """Pre-norm residual: self-attention, deformable cross-attention, GeLU FFN (hidden 4C)."""

    def __init__(self, in_channels: int, cfg: AdtConfig, rng: np.random.Generator,
                 value_bias: bool = True, zero_out: bool = False):
        C = cfg.width
        self.ln1 = LayerNorm(C)
        self.attn = SelfAttention(C, cfg.heads, rng, zero_out=zero_out)
        self.ln2 = LayerNorm(C)
        self.cross = DeformableCrossAttention(in_channels, cfg, rng, value_bias, zero_out=zero_out)
        self.ln3 = LayerNorm(C)
        self.ffn = FeedForward(C, 4 * C, rng, zero_out=zero_out)

    def __call__(self, q: Tensor, fb: FeatureBatch) -> Tensor:
        q = ops.add(q, self.attn(self.ln1(q)))
        q = ops.add(q, self.cross(self.ln2(q), fb))
        return ops.add(q, self.ffn(self.ln3(q)))


def deformable_layer(q: Tensor, f: FeatureMap, params: DeformableLayer) -> Tensor:
    out = params(ops.reshape(q, (1,) + q.shape), FeatureBatch([f]))
    return ops.reshape(out, q.shape)


class ADT(Module):
    """Adaptive pooling seed, input projection to width C, then M deformable layers."""

    def __init__(self, in_channels: int, cfg: AdtConfig, rng: np.random.Generator,
                 value_bias: bool = True, zero_out: bool = False):
        cfg.validate()
        self.proj_in = Linear(in_channels, cfg.width, rng)
        self.layers = [DeformableLayer(in_channels, cfg, rng, value_bias, zero_out) for _ in range(cfg.layers)]
        self._cfg = cfg
        self._in = in_channels

    def __call__(self, fb: FeatureBatch) -> Tensor:
        if fb.channels != self._in:
            raise DimensionError(f"ADT expects {self._in} channels, got {fb.channels}")
        q = self.proj_in(fb.pooled(self._cfg.pool_h, self._cfg.pool_w))
        for layer in self.layers:
            q = layer(q, fb)
        return q

    def clamp_reference(self) -> None:
        for layer in self.layers:
            layer.cross.clamp_reference()


def adt_forward(f: FeatureMap, cfg: AdtConfig, params: ADT) -> Tensor:
    """``(L, C)`` unified-length sequence for one feature map."""
    out = params(FeatureBatch([f]))
    return ops.reshape(out, (cfg.L, cfg.width))


# ---------------------------------------------------------------- routing

def soft_router(I: Tensor, W1: Tensor, b1: Tensor, W2: Tensor, b2: Tensor) -> RouterDecision:
    """``softmax(W2 gelu(W1 I + b1) + b2)`` for ``I`` of shape ``(d_I,)`` or ``(B, d_I)``."""
    I = as_tensor(I)
    logits = ops.linear(ops.gelu(ops.linear(I, W1, b1)), W2, b2)
    return RouterDecision(ops.softmax(logits, axis=-1), logits.data.copy())


class SoftRouter(Module):
    """Two-layer MLP router. The last layer starts at zero, so an untrained
    router weights every expert equally (the same function as addition)."""

    def __init__(self, d_instruction: int, n_experts: int, rng: np.random.Generator, hidden: int | None = None):
        hidden = hidden or 4 * d_instruction
        self.fc1 = Linear(d_instruction, hidden, rng)
        self.fc2 = Linear(hidden, n_experts, rng, zero=True)

    def __call__(self, I: Tensor) -> RouterDecision:
        return soft_router(I, self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias)


def move_aggregate(seqs: Sequence[Tensor], g: RouterDecision | Tensor) -> MoveOutput:
    decision = g if isinstance(g, RouterDecision) else RouterDecision(as_tensor(g), as_tensor(g).data.copy())
    fused = ops.weighted_sum(decision.weights, seqs)
    return MoveOutput(fused, decision, list(seqs))


@dataclass
class Importance:
    values: np.ndarray
    degenerate: np.ndarray | bool


def expert_importance(g: RouterDecision | Tensor | np.ndarray, seqs: Sequence[Tensor | np.ndarray],
                      mode: str = "frobenius") -> Importance:
    """Normalised magnitude of each expert's router-weighted sequence.

    ``mode="frobenius"`` uses the norm of the whole weighted sequence,
    ``mode="token_mean"`` the norm of its mean token. Rows whose magnitudes
    are all zero come back uniform with ``degenerate`` set.
    """
    w = g.weights.data if isinstance(g, RouterDecision) else (g.data if isinstance(g, Tensor) else np.asarray(g))
    arrs = [s.data if isinstance(s, Tensor) else np.asarray(s) for s in seqs]
    batched = w.ndim == 2
    if not batched:
        w = w[None]
        arrs = [a[None] for a in arrs]
    if w.shape[1] != len(arrs):
        raise DimensionError(f"{w.shape[1]} weights for {len(arrs)} sequences")
    if mode == "frobenius":
        norms = np.stack([np.sqrt((a * a).sum(axis=(1, 2))) for a in arrs], axis=1)
    elif mode == "token_mean":
        norms = np.stack([np.linalg.norm(a.mean(axis=1), axis=-1) for a in arrs], axis=1)
    else:
        raise ConfigError(f"unknown importance mode {mode!r}", ["importance_mode"])
    mag = np.abs(w) * norms
    tot = mag.sum(axis=1, keepdims=True)
    degenerate = tot[:, 0] == 0
    if degenerate.any():
        warnings.warn("expert importance undefined for all-zero magnitudes; returning uniform", RuntimeWarning)
    values = np.where(degenerate[:, None], 1.0 / w.shape[1], mag / np.where(tot == 0, 1.0, tot))
    if not batched:
        return Importance(values[0], bool(degenerate[0]))
    return Importance(values, degenerate)


class MoVE(Module):
    """Per-expert ADT (or pooling only) plus soft-router or uniform aggregation.

    ``experts`` restricts the model to a subset of encoders; with a single
    expert the aggregation weight is the constant 1.
    """

    def __init__(self, expert_channels: Sequence[int], cfg: AdtConfig, d_instruction: int,
                 rng: np.random.Generator, transform: str = "adt", aggregation: str = "router",
                 experts: Sequence[int] | None = None, router_hidden: int | None = None,
                 value_bias: bool = True):
        if transform not in ("adt", "avgpool"):
            raise ConfigError(f"unknown transform {transform!r}", ["transform"])
        if aggregation not in ("router", "addition"):
            raise ConfigError(f"unknown aggregation {aggregation!r}", ["aggregation"])
        self._active = list(range(len(expert_channels))) if experts is None else list(experts)
        adt_cfg = cfg if transform == "adt" else AdtConfig(cfg.pool_h, cfg.pool_w, 0, cfg.heads, cfg.points, cfg.width)
        self.adts = [ADT(expert_channels[e], adt_cfg, rng, value_bias) for e in self._active]
        n = len(self._active)
        self.router = SoftRouter(d_instruction, n, rng, router_hidden) if aggregation == "router" and n > 1 else None
        self._cfg = cfg

    @property
    def active(self) -> list[int]:
        return list(self._active)

    def __call__(self, batches: Sequence[FeatureBatch], I: Tensor) -> MoveOutput:
        seqs = [adt(batches[e]) for adt, e in zip(self.adts, self._active)]
        B = seqs[0].shape[0]
        if self.router is not None:
            decision = self.router(I)
        else:
            n = len(seqs)
            w = np.full((B, n), 1.0 / n)
            decision = RouterDecision(Tensor(w), np.zeros((B, n)))
        return move_aggregate(seqs, decision)

    def clamp_reference(self) -> None:
        for adt in self.adts:
            adt.clamp_reference()
