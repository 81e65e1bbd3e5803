"""Dense tensors and the dynamic tape used for reverse-mode differentiation."""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import GraphError

_state = threading.local()


def get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def set_default_dtype(dtype) -> None:
    _state.dtype = np.dtype(dtype)


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the scalar precision used for new tensors."""
    previous = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    """A dense n-d array that may take part in a recorded tape.

    ``data`` is a numpy array (row-major). ``grad`` is filled by
    :func:`backward` for leaf tensors with ``requires_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = np.array(data, dtype=dtype or get_default_dtype())
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t._node = None
        t.name = None
        return t

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

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self.shape)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar; implementations live in ops
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

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis=None):
        from . import ops
        return ops.sum(self, axis)

    @property
    def T(self):
        from . import ops
        return ops.transpose(self)


def _not_scalar(shape):
    raise ValueError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=get_default_dtype()))


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: Sequence[Tensor], backward: Callable):
        self.out = out
        self.parents = tuple(parents)
        self.backward = backward


class Tape:
    """Records differentiable operations executed while it is active.

    Usage::

        with Tape() as tape:
            loss = model(x)
        tape.backward(loss)
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise GraphError("tape stack corrupted: exiting a tape that is not innermost")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes.clear()
        self.consumed = False

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def _tape_stack() -> list[Tape]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_record() -> Iterator[None]:
    """Suspend recording (e.g. for parameter updates inside a live tape)."""
    stack = _tape_stack()
    saved = stack[:]
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


def record(out_data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result; register it on the active tape when gradients are needed.

    ``backward_fn(grad_out)`` must return one gradient (or None) per parent.
    """
    out = Tensor._wrap(out_data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        node = _Node(out, parents, backward_fn)
        out._node = node
        tape.nodes.append(node)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise GraphError("backward already ran on this tape; call tape.reset() and re-record")
    if loss._node is None or not tape.nodes or not _on_tape(loss, tape):
        raise GraphError("loss is detached: it was not produced by an operation on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        parent_grads = node.backward(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._node is None:
                if parent.grad is None:
                    parent.grad = np.array(pg, dtype=parent.data.dtype).reshape(parent.shape)
                else:
                    parent.grad += pg
            else:
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    tape.consumed = True


def _on_tape(t: Tensor, tape: Tape) -> bool:
    node = t._node
    # the loss is almost always the last node recorded
    if tape.nodes[-1] is node:
        return True
    return any(n is node for n in tape.nodes)
