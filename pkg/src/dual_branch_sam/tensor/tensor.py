"""
Dense tensor type and the tape that records it.

Every differentiable operation appends one node to the active tape of the
calling thread. Because inputs always exist before the operation that consumes
them, append order is a topological order and ``backward`` is a single reverse
walk over the tape.
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from dual_branch_sam.exceptions import ContractError, DimensionError

logger = logging.getLogger(__name__)

GradFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


@dataclass(eq=False)
class Node:
    """One recorded operation: its tag, its input tensors and the closure that
    maps the output gradient to one gradient (or None) per input."""

    index: int
    op: str
    inputs: Tuple["Tensor", ...]
    grad_fn: GradFn


class Tape:
    """
    Append-only autodiff graph.

    Use as a context manager to make it the active tape of the current thread::

        with Tape():
            loss = model(x).sum()
            backward(loss)
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, op: str, inputs: Sequence["Tensor"], grad_fn: GradFn) -> Node:
        node = Node(len(self.nodes), op, tuple(inputs), grad_fn)
        self.nodes.append(node)
        return node

    def reset(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _local_state().tapes.append(self)
        return self

    def __exit__(self, exc_type, exc_value, traceback):
        _local_state().tapes.pop()


class _State(threading.local):
    def __init__(self):
        self.tapes = [Tape()]
        self.grad_enabled = True


_state = _State()


def _local_state() -> _State:
    return _state


def current_tape() -> Tape:
    """The tape new operations are recorded on in this thread."""
    return _state.tapes[-1]


def grad_enabled() -> bool:
    return _state.grad_enabled


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording in the current thread (evaluation, optimizer updates)."""
    previous = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """
    Dense row-major n-dimensional array with an optional gradient slot.

    Parameters
    ----------
    data : array_like
        Values. Non-floating input is promoted to float64.
    requires_grad : bool, optional
        Whether backward should deliver a gradient to this tensor.
    name : str, optional
        Label used in diagnostics and checkpoints.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        array = np.asarray(data, dtype=dtype)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        self.data: np.ndarray = array
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None
        self._tape: Optional[Tape] = None

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def node_id(self) -> Optional[int]:
        return None if self._node is None else self._node.index

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def _accumulate(self, grad: np.ndarray):
        if grad.shape != self.data.shape:
            raise DimensionError(
                f"gradient of shape {grad.shape} does not match tensor {self.name or ''} of shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad += grad

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(value: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    """Wrap constants; tensors pass through untouched."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def record(op: str, data: np.ndarray, inputs: Sequence[Tensor], grad_fn: GradFn) -> Tensor:
    """
    Wrap ``data`` as the output of ``op`` and put it on the active tape when
    any input needs a gradient.

    Parameters
    ----------
    op : str
        Operation tag, kept on the node for diagnostics.
    data : np.ndarray
        Forward result.
    inputs : sequence of Tensor
        Operands, in the order ``grad_fn`` returns their gradients.
    grad_fn : callable
        Maps the output gradient to a sequence of input gradients.

    Returns
    -------
    Tensor
    """
    needs_grad = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs_grad)
    if needs_grad:
        tape = current_tape()
        out._node = tape.record(op, inputs, grad_fn)
        out._tape = tape
    return out


def backward(loss: Tensor):
    """
    Reverse-mode accumulation from a scalar loss.

    Gradients are added to ``.grad`` of every reachable leaf with
    ``requires_grad`` set; calling twice without ``zero_grad`` accumulates.
    Tensors with ``requires_grad`` false are never written.

    Raises
    ------
    ContractError
        If ``loss`` holds more than one element.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss._node is None:
        if loss.requires_grad:
            loss._accumulate(seed)
        return

    pending: dict[Node, np.ndarray] = {loss._node: seed}
    for node in reversed(loss._tape.nodes[: loss._node.index + 1]):
        grad = pending.pop(node, None)
        if grad is None:
            continue
        for tensor, input_grad in zip(node.inputs, node.grad_fn(grad)):
            if input_grad is None or not tensor.requires_grad:
                continue
            if tensor._node is None:
                tensor._accumulate(input_grad)
            elif tensor._node in pending:
                pending[tensor._node] = pending[tensor._node] + input_grad
            else:
                pending[tensor._node] = input_grad


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, extent in enumerate(shape) if extent == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    return record(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    return record(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    return record(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return record(
        "div",
        out,
        (a, b),
        lambda g: (unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return record("neg", -a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    return record(
        "pow",
        a.data**exponent,
        (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1),),
    )


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def _pair(a: ArrayLike, b: ArrayLike) -> Tuple[Tensor, Tensor]:
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    return as_tensor(a, like), as_tensor(b, like)


# -- reductions and shape plumbing -----------------------------------------


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return record("sum", np.asarray(out), (a,), grad_fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return tensor_sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return record("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def getitem(a: Tensor, index) -> Tensor:
    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return record("getitem", a.data[index], (a,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return record(
        "concat",
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes, leading axes broadcast.

    Raises
    ------
    DimensionError
        If the inner extents disagree; the message names both shapes.
    """
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def grad_fn(g):
        grad_a = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        grad_b = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return grad_a, grad_b

    return record("matmul", a.data @ b.data, (a, b), grad_fn)
