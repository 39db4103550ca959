"""Central finite-difference gradient oracle."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError
from .tensor import Tape, Tensor


def _scalar(out) -> float:
    if not isinstance(out, Tensor) or out.data.size != 1:
        shape = getattr(out, "shape", type(out).__name__)
        raise ContractError(f"grad_check needs a scalar-valued function, got {shape}")
    return float(out.data.reshape(()))


def grad_check(f: Callable[[], Tensor] | Callable[[Tensor], Tensor],
               x: Tensor | Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` is called with ``x`` when ``x`` is a single tensor, with no
    arguments when ``x`` is a sequence (the tensors are then typically
    module parameters closed over by ``f``). The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    single = isinstance(x, Tensor)
    xs = [x] if single else list(x)

    def call():
        return f(x) if single else f()

    saved = [t.requires_grad for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    try:
        with Tape() as tape:
            out = call()
        _scalar(out)
        grads = tape.backward(out, write=False)
        worst = 0.0
        for t in xs:
            analytic = grads.get(id(t), np.zeros_like(t.data))
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = _scalar(call())
                flat[i] = orig - h
                down = _scalar(call())
                flat[i] = orig
                numeric = (up - down) / (2.0 * h)
                a = analytic.reshape(-1)[i]
                worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
        return worst
    finally:
        for t, flag in zip(xs, saved):
            t.requires_grad = flag
