"""Dense tensors with a recorded graph for reverse-mode differentiation."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Optional, Sequence

import numpy as np

_GRAD_ENABLED = True


class GraphError(RuntimeError):
    """Raised on misuse of the recorded graph (double backward, non-scalar loss)."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@dataclass(eq=False)
class GraphNode:
    """One recorded forward operation.

    ``backward_fn`` maps the gradient w.r.t. the output to a tuple of
    gradients w.r.t. ``inputs`` (``None`` for inputs that need none).
    """

    op: str
    inputs: tuple["Tensor", ...]
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    ctx: dict[str, Any] = field(default_factory=dict)
    consumed: bool = False

    def __call__(self, grad_out: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return self.backward_fn(grad_out)


class Tensor:
    """A numpy array plus the node that produced it."""

    __array_priority__ = 100.0

    def __init__(self, data: Any, requires_grad: bool = False, node: Optional[GraphNode] = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if any(d < 1 for d in arr.shape):
            raise ValueError(f"all dimension sizes must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.node = node
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.node.op}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        from shakedrop import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from shakedrop import ops
        return ops.add(self, ops.neg(as_tensor(other)))

    def __rsub__(self, other):
        from shakedrop import ops
        return ops.add(as_tensor(other), ops.neg(self))

    def __mul__(self, other):
        from shakedrop import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from shakedrop import ops
        return ops.neg(self)

    def sum(self) -> "Tensor":
        from shakedrop import ops
        return ops.sum_all(self)

    def mean(self) -> "Tensor":
        from shakedrop import ops
        return ops.mean_all(self)

    def reshape(self, *shape: int) -> "Tensor":
        from shakedrop import ops
        return ops.reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """Trainable leaf tensor; its gradient accumulator starts at zero."""

    def __init__(self, data: Any, trainable: bool = True, dtype: Any = np.float64):
        super().__init__(np.array(data, dtype=dtype, copy=True), requires_grad=trainable)
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def astype(self, dtype: Any) -> None:
        """Convert the value in place; the gradient is reset."""
        self.data = self.data.astype(dtype)
        self.zero_grad()

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape})"


def as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor],
           backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
           **ctx: Any) -> Tensor:
    """Wrap ``out_data`` in a Tensor, registering a node when any input needs a gradient."""
    out_data = np.asarray(out_data).astype(np.result_type(*[t.dtype for t in inputs]), copy=False)
    needs = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    if not needs:
        return Tensor(out_data)
    node = GraphNode(op, tuple(inputs), backward_fn, dict(ctx))
    return Tensor(out_data, requires_grad=True, node=node)


def _topological_nodes(root: GraphNode) -> list[GraphNode]:
    order: list[GraphNode] = []
    seen: set[int] = set()
    stack: list[tuple[GraphNode, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for t in node.inputs:
            if t.node is not None and id(t.node) not in seen:
                stack.append((t.node, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf that requires a gradient."""
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    order = _topological_nodes(loss.node)
    if any(n.consumed for n in order):
        raise GraphError("backward called twice on the same graph; run a new forward first")

    grads: dict[int, np.ndarray] = {id(loss.node): seed}
    for node in reversed(order):
        g_out = grads.pop(id(node), None)
        node.consumed = True
        if g_out is None:
            continue
        in_grads = node(g_out)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            g = np.asarray(g).astype(t.dtype, copy=False)
            if t.node is not None:
                key = id(t.node)
                grads[key] = grads[key] + g if key in grads else g
            else:
                t.grad = g.copy() if t.grad is None else t.grad + g
        node.ctx.clear()
