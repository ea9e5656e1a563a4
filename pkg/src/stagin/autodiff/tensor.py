"""Dense tensors that record how they were computed, and reverse-mode backward."""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from ..errors import NotScalar

_ids = itertools.count()


class Tensor:
    """A numpy array plus the information needed to differentiate through it.

    ``parents`` are the input tensors of the primitive that produced this one
    and ``backward_fn`` maps the output adjoint to one adjoint per parent
    (``None`` where the parent needs none).  Leaves have neither.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "node_id", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, parents: Sequence["Tensor"] = (),
                 backward_fn: Optional[Callable] = None, op: str = "leaf", name: str = ""):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.node_id = next(_ids)
        self.name = name

    # -- array-ish conveniences
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

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag}, requires_grad={self.requires_grad})"

    # -- operators (delegate to primitives)
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
        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        if not np.isscalar(other):
            raise TypeError("division is only defined by a Python scalar")
        return ops.scale(self, 1.0 / float(other))

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __rmatmul__(self, other):
        from . import ops
        return ops.matmul(other, self)

    @property
    def T(self):
        from . import ops
        return ops.transpose(self)

    def backward(self) -> None:
        """Populate ``.grad`` of every leaf that requires a gradient.

        Gradients are overwritten, not accumulated, on each call.
        """
        adjoints = _reverse_sweep(self)
        for node in adjoints.leaves:
            node.grad = adjoints.values.get(node.node_id, np.zeros_like(node.data))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Adjoints:
    __slots__ = ("values", "leaves")

    def __init__(self):
        self.values: dict[int, np.ndarray] = {}
        self.leaves: list[Tensor] = []


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` through grad-requiring edges, inputs first."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in visited:
            continue
        visited.add(node.node_id)
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and parent.node_id not in visited:
                stack.append((parent, False))
    return order


def _reverse_sweep(loss: Tensor) -> _Adjoints:
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    out = _Adjoints()
    if not loss.requires_grad:
        return out
    order = topological_order(loss)
    values = out.values
    values[loss.node_id] = np.ones_like(loss.data)
    for node in reversed(order):
        g = values.get(node.node_id)
        if node.backward_fn is None:
            out.leaves.append(node)
            continue
        # interior adjoints are released as soon as they have been pushed down
        del values[node.node_id]
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.data.shape:
                pg = np.broadcast_to(pg, parent.data.shape)
            prev = values.get(parent.node_id)
            values[parent.node_id] = pg.copy() if prev is None else prev + pg
    return out


def grad(loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to ``wrt``.

    Tensors that do not influence the loss get zero gradients.
    """
    wrt = list(wrt)
    adjoints = _reverse_sweep(loss)
    return [adjoints.values.get(t.node_id, np.zeros_like(t.data)) for t in wrt]
