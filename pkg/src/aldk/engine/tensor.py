"""Tensor values and the reverse-mode tape.

Every op result that depends on a gradient-requiring input keeps references
to its parents and a backward rule.  Backward rules are written with the same
differentiable ops, so passing ``create_graph=True`` records the gradient
computation itself and it can be differentiated again.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32
_dtype_stack = [DTYPE]


def compute_dtype():
    """Element type of newly created tensors (float32 unless overridden)."""
    return _dtype_stack[-1]


@contextmanager
def precision(dtype):
    """Temporarily compute in ``dtype``; used by the finite-difference checker."""
    _dtype_stack.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _dtype_stack.pop()


class EngineError(ValueError):
    """Raised for invalid shapes, non-scalar roots and unsupported graphs."""


class Tensor:
    """Dense array (float32 by default) plus the graph bookkeeping needed for gradients."""

    __slots__ = ("data", "requires_grad", "parents", "op", "_backward", "twice_differentiable", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=compute_dtype(), order="C")
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.op = "leaf"
        self._backward: Callable | None = None
        self.twice_differentiable = True

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
            raise EngineError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # Operator sugar; implementations live in ops.py.
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
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


class Parameter(Tensor):
    """A named trainable leaf with a gradient slot of identical shape."""

    __slots__ = ("name", "grad")

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data, parents: Sequence[Tensor], op: str, backward: Callable,
              twice_differentiable: bool = True) -> Tensor:
    """Wrap an op result; attach graph edges only if some parent needs grads.

    ``backward(g, inputs, out, needs)`` returns one gradient (or None) per
    parent; ``needs[i]`` is False when parent i's gradient will be dropped.
    ``inputs`` and ``out`` are either the live nodes or detached copies,
    depending on whether the caller is recording a graph.
    """
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.op = op
        out._backward = backward
        out.twice_differentiable = twice_differentiable
    return out


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order  # parents before children


def _relevant(order: list[Tensor], targets: Iterable[Tensor]) -> set[int]:
    """Ids of nodes with at least one target among their ancestors (or self)."""
    keep = {id(t) for t in targets}
    for node in order:
        if any(id(p) in keep for p in node.parents):
            keep.add(id(node))
    return keep


def grad(root: Tensor, targets: Sequence[Tensor], create_graph: bool = False) -> list[Tensor | None]:
    """Gradients of scalar ``root`` with respect to each target.

    Only nodes lying between a target and the root are visited.  With
    ``create_graph`` every rule must be twice differentiable; the first
    violation is reported by op name.
    """
    if root.size != 1:
        raise EngineError(f"gradient root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return [None for _ in targets]
    order = _toposort(root)
    keep = _relevant(order, targets)
    if create_graph:
        for node in order:
            if id(node) in keep and node.parents and not node.twice_differentiable:
                raise EngineError(f"op '{node.op}' has no differentiable backward")

    grads: dict[int, Tensor] = {id(root): Tensor(np.ones_like(root.data))}
    from . import ops

    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or not node.parents or id(node) not in keep:
            continue
        if create_graph:
            inputs, out = node.parents, node
        else:
            inputs = tuple(p.detach() for p in node.parents)
            out = node.detach()
            g = g.detach()
        needs = tuple(p.requires_grad and id(p) in keep for p in node.parents)
        parent_grads = node._backward(g, inputs, out, needs)
        for i, (p, pg) in enumerate(zip(node.parents, parent_grads)):
            if pg is None or not needs[i]:
                continue
            if pg.shape != p.shape:
                raise EngineError(f"op '{node.op}' produced grad {pg.shape} for input {p.shape}")
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else ops.add(prev, pg)
    return [grads.get(id(t)) for t in targets]


def backward(root: Tensor, params: Iterable[Parameter]) -> None:
    """Write d(root)/d(param) into each parameter's grad slot.

    Parameters that do not influence ``root`` get a zero gradient; any other
    leaves in the graph are left alone.
    """
    params = list(params)
    gs = grad(root, params, create_graph=False)
    for p, g in zip(params, gs):
        p.grad = np.zeros_like(p.data) if g is None else g.data.copy()


def input_gradient(root: Tensor, wrt: Tensor) -> Tensor:
    """d(root)/d(wrt) as a recorded tensor that can be differentiated again."""
    (g,) = grad(root, [wrt], create_graph=True)
    if g is None:
        return Tensor(np.zeros_like(wrt.data))
    return g
