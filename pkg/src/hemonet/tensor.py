"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array and, when it is the result of an
operation from :mod:`hemonet.ops`, remembers its parents plus a closure
that pushes gradients back to them.  Calling :func:`backward` on a scalar
result topologically sorts the graph and runs the closures in reverse.

Graph construction, forward and backward are single-threaded per graph;
independent graphs can live on independent threads because nothing here
is shared or global.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class NumericalError(RuntimeError):
    """Raised when a computation produced or received non-finite values."""


class Tensor:
    """A dense n-dimensional array that can take part in autodiff.

    ``grad`` is allocated lazily during backward and always matches the
    shape and dtype of ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_grad_fn")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: Optional[str] = None,
        _parents: Sequence["Tensor"] = (),
        _grad_fn: Optional[Callable[[np.ndarray], None]] = None,
    ):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = tuple(_parents)
        self._grad_fn = _grad_fn

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def constant(data, dtype=None) -> "Tensor":
        arr = np.asarray(data, dtype=dtype)
        return Tensor(arr)

    @staticmethod
    def parameter(data, name: str, dtype=None) -> "Tensor":
        arr = np.array(data, dtype=dtype)
        return Tensor(arr, requires_grad=True, name=name)

    # -- introspection ---------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # -- scalar-friendly operator sugar (thin wrappers over hemonet.ops) -------

    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.mul(self, -1.0)

    def __sub__(self, other):
        from . import ops

        if isinstance(other, (int, float)):
            return ops.add(self, -other)
        return ops.add(self, ops.mul(as_tensor(other), -1.0))

    def __rsub__(self, other):
        from . import ops

        neg = ops.mul(self, -1.0)
        if isinstance(other, (int, float)):
            return ops.add(neg, other)
        return ops.add(as_tensor(other), neg)


def as_tensor(value, dtype=None) -> Tensor:
    """Wrap plain arrays/scalars as constant tensors; pass tensors through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def accumulate_grad(t: Tensor, piece: np.ndarray) -> None:
    """Add a gradient contribution to ``t`` (lazily allocating the buffer)."""
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += piece


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
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Optional[dict[str, Tensor]] = None) -> dict[str, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Accumulates ``.grad`` on every reachable tensor with ``requires_grad``
    and returns a gradient map for ``params`` (zeros for parameters the
    loss does not touch).

    Raises ``ValueError`` for a non-scalar root.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        # Nothing differentiable feeds the loss; every queried grad is zero.
        return {name: np.zeros_like(p.data) for name, p in (params or {}).items()}

    loss.grad = np.ones_like(loss.data)
    for node in reversed(_toposort(loss)):
        if node._grad_fn is not None and node.grad is not None:
            node._grad_fn(node.grad)

    if params is None:
        return {}
    out = {}
    for name, p in params.items():
        out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return out


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
