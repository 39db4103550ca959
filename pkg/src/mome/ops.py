"""Differentiable tensor operations.

Binary elementwise ops require equal shapes; the only broadcast allowed is
a python scalar or a rank-0 tensor against anything. Ops that need a bias
or a per-feature parameter (``linear``, ``layer_norm``) handle it
internally, and ``expand`` is the one explicit broadcasting primitive.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import DimensionError
from .tensor import DTYPE, Tensor, as_tensor, record

GELU_K = math.sqrt(2.0 / math.pi)
GELU_C = 0.044715


def _unbroadcast_scalar(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")

    def backward(g):
        return _unbroadcast_scalar(g, a.shape), _unbroadcast_scalar(g, b.shape)

    return record("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")

    def backward(g):
        return _unbroadcast_scalar(g, a.shape), _unbroadcast_scalar(-g, b.shape)

    return record("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")

    def backward(g):
        return _unbroadcast_scalar(g * b.data, a.shape), _unbroadcast_scalar(g * a.data, b.shape)

    return record("mul", a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return record("scale", a.data * c, (a,), lambda g: (g * c,))


def add_n(xs: Sequence[Tensor]) -> Tensor:
    """Sum of equally shaped tensors as a single tape node."""
    xs = list(xs)
    for x in xs[1:]:
        if x.shape != xs[0].shape:
            raise DimensionError(f"add_n: shape mismatch {xs[0].shape} vs {x.shape}")
    out = xs[0].data.copy()
    for x in xs[1:]:
        out += x.data
    return record("add_n", out, xs, lambda g: [g] * len(xs))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return record("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return record("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def gelu(x: Tensor) -> Tensor:
    """GeLU, tanh approximation, with its exact derivative."""
    v = x.data
    inner = GELU_K * (v + GELU_C * v**3)
    t = np.tanh(inner)
    y = 0.5 * v * (1.0 + t)

    def backward(g):
        d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * v * v)
        return (g * d,)

    return record("gelu", y, (x,), backward)


def square(x: Tensor) -> Tensor:
    return record("square", x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch by name: add, mul, sub, gelu, relu, sigmoid, tanh, scale."""
    unary = {"gelu": gelu, "relu": relu, "sigmoid": sigmoid, "tanh": tanh}
    binary = {"add": add, "mul": mul, "sub": sub}
    if op in unary:
        return unary[op](as_tensor(a))
    if op in binary:
        return binary[op](a, b)
    if op == "scale":
        return scale(as_tensor(a), b)
    raise ValueError(f"unknown elementwise op {op!r}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; rank > 2 operands must share identical leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return record("matmul", a.data @ b.data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` contracting the last axis of ``x``."""
    if x.shape[-1] != weight.shape[0] or weight.ndim != 2:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return record("linear", out.reshape(lead + (weight.shape[1],)), parents, backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record("softmax", y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then affine."""
    C = x.shape[-1]
    if gain.shape != (C,) or bias.shape != (C,):
        raise DimensionError(f"layer_norm: params {gain.shape}/{bias.shape} do not match width {C}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        lead_axes = tuple(range(x.ndim - 1))
        gg = g.sum(axis=lead_axes) if lead_axes else g
        gxh = g * gain.data
        gx = inv * (gxh - gxh.mean(axis=-1, keepdims=True) - xhat * (gxh * xhat).mean(axis=-1, keepdims=True))
        ggain = (g * xhat).sum(axis=lead_axes) if lead_axes else g * xhat
        return gx, ggain, gg

    return record("layer_norm", out, (x, gain, bias), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = x.data.reshape(shape)
    return record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return record("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                  lambda g: (g.transpose(inverse),))


def expand(x: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast of ``x`` to ``shape``; backward sums."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise DimensionError(f"expand: cannot broadcast {x.shape} to {shape}") from exc
    pad = len(shape) - x.ndim

    def backward(g):
        g = g.sum(axis=tuple(range(pad))) if pad else g
        axes = tuple(i for i, s in enumerate(x.shape) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return record("expand", out, (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    ax = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(x.shape[i] != xs[0].shape[i] for i in range(x.ndim) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {xs[0].shape} and {x.shape} on axis {axis}")
    sizes = [x.shape[ax] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return np.split(g, cuts, axis=ax)

    return record("concat", np.concatenate([x.data for x in xs], axis=ax), xs, backward)


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """``x[index]`` along the first axis."""
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return record("take_rows", x.data[index], (x,), backward)


def scatter_rows(parts: Sequence[Tensor], indices: Sequence[np.ndarray], n_rows: int) -> Tensor:
    """Inverse of ``take_rows``: place each part at its row indices, zero elsewhere.

    Indices across parts must be disjoint.
    """
    parts = list(parts)
    indices = [np.asarray(i, dtype=np.intp) for i in indices]
    tail = parts[0].shape[1:]
    out = np.zeros((n_rows,) + tail, dtype=DTYPE)
    for p, idx in zip(parts, indices):
        if p.shape != (len(idx),) + tail:
            raise DimensionError(f"scatter_rows: part {p.shape} does not match {len(idx)} rows of {tail}")
        out[idx] = p.data

    def backward(g):
        return [g[idx] for idx in indices]

    return record("scatter_rows", out, parts, backward)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = x.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return record("sum", np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis), 1.0 / n)


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error against a constant target."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=DTYPE)
    if target.shape != pred.shape:
        raise DimensionError(f"mse: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target
    n = diff.size
    return record("mse", np.asarray((diff * diff).sum() / n), (pred,), lambda g: (g * 2.0 * diff / n,))


def weighted_sum(weights: Tensor, seqs: Sequence[Tensor]) -> Tensor:
    """``sum_i weights[..., i] * seqs[i]``.

    ``weights`` is ``(N,)`` for single sequences or ``(B, N)`` for batches
    whose leading axis is ``B``.
    """
    seqs = list(seqs)
    n = len(seqs)
    if weights.shape[-1] != n:
        raise DimensionError(f"weighted_sum: {weights.shape[-1]} weights for {n} sequences")
    shape = seqs[0].shape
    for s in seqs[1:]:
        if s.shape != shape:
            raise DimensionError(f"weighted_sum: sequence shape mismatch {shape} vs {s.shape}")
    batched = weights.ndim == 2
    if batched and weights.shape[0] != shape[0]:
        raise DimensionError(f"weighted_sum: batch of {weights.shape[0]} weights vs sequences {shape}")
    extra = (1,) * (len(shape) - 1)

    def w_of(i):
        return weights.data[:, i].reshape((-1,) + extra) if batched else weights.data[i]

    out = np.zeros(shape, dtype=DTYPE)
    for i, s in enumerate(seqs):
        out += w_of(i) * s.data

    def backward(g):
        axes = tuple(range(1, len(shape))) if batched else None
        gw = np.stack([(g * s.data).sum(axis=axes) for s in seqs], axis=-1)
        return [gw] + [g * w_of(i) if s.requires_grad else None for i, s in enumerate(seqs)]

    return record("weighted_sum", out, [weights] + seqs, backward)


def select(x: Tensor, axis: int, index: int) -> Tensor:
    """``x`` at position ``index`` of ``axis``, dropping that axis."""
    ax = axis % x.ndim
    out = np.take(x.data, index, axis=ax)

    def backward(g):
        gx = np.zeros_like(x.data)
        sl = [slice(None)] * x.ndim
        sl[ax] = index
        gx[tuple(sl)] = g
        return (gx,)

    return record("select", np.ascontiguousarray(out), (x,), backward)
