"""Dense float64 tensors with reverse-mode gradient support.

A Tensor wraps a contiguous row-major float64 array. Tensors produced by the
operations in :mod:`vqeeg.numerics.ops` remember their parents and a
vector-Jacobian-product closure; calling :func:`backward` on a scalar result
accumulates gradients into every reachable node, in particular into
Parameters, which keep a persistent zero-initialized gradient buffer.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import DimensionError, GradientError

VjpFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """Value plus (optional) backward wiring.

    Leaf tensors built from user data reject NaN/Inf; gradient buffers and
    op outputs skip that validation (op inputs were already checked).
    """

    __slots__ = ("data", "grad", "_parents", "_vjp")

    def __init__(self, data, _parents: tuple = (), _vjp: VjpFn | None = None,
                 validate: bool = True):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if validate and not _parents and not np.all(np.isfinite(arr)):
            raise ValueError("tensor holds non-finite values")
        self.data = arr
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(())[()])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def __len__(self) -> int:
        return self.data.shape[0]


class Parameter(Tensor):
    """Named trainable tensor with a persistent gradient buffer."""

    __slots__ = ("name", "trainable")

    def __init__(self, name: str, data, trainable: bool = True):
        super().__init__(data)
        self.name = name
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(value) -> Tensor:
    """Wrap scalars/arrays as constant Tensors; pass Tensors through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(node) into node.grad for every reachable node.

    root must be scalar. Parameters accumulate into their persistent buffer;
    call zero_grad between independent backward passes.
    """
    if root.size != 1:
        raise DimensionError(f"backward needs a scalar root, got shape {root.shape}")
    order = _toposort(root)
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        for parent, grad in zip(node._parents, node._vjp(node.grad)):
            if grad is None:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += grad


def check_finite_grad(param: Parameter) -> None:
    if not np.all(np.isfinite(param.grad)):
        raise GradientError(f"non-finite gradient in parameter {param.name!r}")
