"""Dense float64 tensors and the reverse-mode gradient tape.

A :class:`Tape` is a context manager. While one is active on the current
thread, every differentiable op whose inputs require gradients appends a
node to it; :meth:`Tape.backward` then walks those nodes in exact reverse
order. Tapes are thread-confined, so independent batch shards can be
evaluated on separate threads and their gradients summed afterwards.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, TapeError

MAX_RANK = 4
DTYPE = np.float64

_local = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Row-major float64 array with optional gradient participation.

    Scalars are rank 0; everything else is rank 1 to 4.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, copy: bool = True):
        arr = np.array(data, dtype=DTYPE, copy=copy) if copy else np.asarray(data, dtype=DTYPE)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"tensor rank {arr.ndim} exceeds {MAX_RANK} (shape {arr.shape})")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
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
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f"{self.name}: " if self.name else ""
        return f"Tensor({label}shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # Operator sugar; implementations live in ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a python scalar")
        return ops.scale(self, 1.0 / float(other))

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        return ops.transpose(self, axes or None)

    def sum(self, axis=None):
        from . import ops
        return ops.sum(self, axis)

    def mean(self, axis=None):
        from . import ops
        return ops.mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    name: str
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of executed ops.

    ``backward`` may be called once per recording; call :meth:`reset` to
    reuse the tape.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.visited: list[int] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape exited out of order")
        stack.pop()

    def reset(self) -> None:
        self.nodes.clear()
        self.visited.clear()
        self._consumed = False

    def record(self, name, out, parents, backward) -> None:
        if self._consumed:
            raise TapeError("cannot record onto a tape that already ran backward; call reset()")
        self.nodes.append(Node(name, out, tuple(parents), backward))

    def backward(self, loss: Tensor, grad=None, write: bool = True) -> dict[int, np.ndarray]:
        """Propagate gradients from ``loss`` to every leaf on this tape.

        Returns a mapping ``id(leaf) -> gradient``. With ``write`` the leaf
        gradients are also accumulated into ``leaf.grad``.
        """
        if self._consumed:
            raise TapeError("backward already called on this tape; call reset() first")
        if grad is None:
            if loss.data.size != 1:
                raise ContractError(f"backward needs a scalar loss or an explicit grad, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        grad = np.asarray(grad, dtype=DTYPE)
        if grad.shape != loss.shape:
            raise DimensionError(f"seed grad shape {grad.shape} != loss shape {loss.shape}")
        self._consumed = True

        produced = {id(n.out) for n in self.nodes}
        grads: dict[int, np.ndarray] = {id(loss): grad}
        leaves: dict[int, Tensor] = {}
        for pos in range(len(self.nodes) - 1, -1, -1):
            node = self.nodes[pos]
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            self.visited.append(pos)
            parent_grads = node.backward(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if key not in produced:
                    leaves[key] = parent
        result = {k: grads[k] for k in leaves if k in grads}
        if id(loss) not in produced and loss.requires_grad:
            result[id(loss)] = grad
            leaves[id(loss)] = loss
        if write:
            for key, g in result.items():
                leaf = leaves[key]
                leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        return result


def record(name: str, out_data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``out_data`` in a Tensor and log it on the active tape if needed."""
    tape = active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=needs, copy=False)
    if needs:
        tape.record(name, out, parents, backward)
    return out
