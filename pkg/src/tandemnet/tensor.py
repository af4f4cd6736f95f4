"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable op in :mod:`tandemnet.ops` records one node on the
active :class:`Tape`. ``Tensor.backward`` replays the tape in reverse,
accumulating gradients into ``.grad`` of every tensor that requires one.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import NumericError

_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Set the floating dtype used for newly created tensors (float64 or float32)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """A numpy array plus an optional gradient buffer.

    Tensors are treated as immutable once produced by an op. Parameters are the
    exception: optimizers update ``data`` in place between tape recordings.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype.kind == "f" else _DEFAULT_DTYPE
        self.data = np.asarray(arr, dtype=dtype, order="C")  # keeps 0-d scalars 0-d
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = np.zeros_like(self.data) if requires_grad else None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self, grad=None) -> None:
        current_tape().backward(self, grad)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # Operator sugar; the implementations live in ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, _lift(other, self))

    def __rsub__(self, other):
        from . import ops
        return ops.sub(_lift(other, self), self)

    def __mul__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.index(self, index)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full((), value, dtype=like.dtype))


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


class _Node:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output: Tensor, inputs: Sequence[Tensor], backward_fn):
        self.output = output
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed ops.

    ``backward`` walks the record newest-first, so each node is visited once
    and only after every consumer of its output has contributed.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> None:
        self.nodes.append(_Node(output, inputs, backward_fn))

    def clear(self) -> None:
        self.nodes.clear()

    def backward(self, root: Tensor, grad=None, retain: bool = False) -> None:
        if grad is None:
            if root.size != 1:
                raise ValueError("backward() on a non-scalar tensor needs an explicit grad")
            grad = np.ones_like(root.data)
        grad = np.asarray(grad, dtype=root.dtype).reshape(root.shape)

        # Gradients of intermediates live here; leaves accumulate into .grad.
        pending: dict[int, np.ndarray] = {id(root): grad}
        produced = {id(node.output) for node in self.nodes}
        if id(root) not in produced and root.requires_grad:
            _accumulate(root, grad)

        for node in reversed(self.nodes):
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            if node.output.requires_grad:
                _accumulate(node.output, g)
            input_grads = node.backward_fn(g)
            for tensor, tg in zip(node.inputs, input_grads):
                if tg is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in produced:
                    if key in pending:
                        pending[key] = pending[key] + tg
                    else:
                        pending[key] = tg
                else:
                    _accumulate(tensor, tg)
        if not retain:
            self.clear()


def _accumulate(tensor: Tensor, g: np.ndarray) -> None:
    if not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite gradient reaching tensor {tensor.name or tensor.shape}")
    if tensor.grad is None or tensor.grad.shape != tensor.shape:
        tensor.grad = np.array(g, dtype=tensor.dtype, copy=True)
    else:
        tensor.grad += g


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.enabled = True


_state = _State()


def current_tape() -> Tape:
    return _state.tape


def grad_enabled() -> bool:
    return _state.enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording them."""
    previous = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


@contextlib.contextmanager
def fresh_tape() -> Iterator[Tape]:
    """Temporarily install an empty tape, restoring the previous one afterwards."""
    previous = _state.tape
    _state.tape = Tape()
    try:
        yield _state.tape
    finally:
        _state.tape.clear()
        _state.tape = previous


def record(output: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Attach ``backward_fn`` to ``output`` if any input needs a gradient."""
    if _state.enabled and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        output.grad = None
        _state.tape.record(output, inputs, backward_fn)
    return output
