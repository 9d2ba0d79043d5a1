#!/usr/bin/env python3
"""
Dense tensors with a reverse-mode differentiation tape

Every op records a node (op name, inputs, backward closure over the saved
activations) on the active tape when any input requires a gradient. Nodes are
appended in execution order, so the tape is topologically sorted by
construction and backward is a single reverse sweep.

One tape per forward pass. Use ``with Tape():`` to scope a pass explicitly
(required when several passes run concurrently in threads); otherwise a tape
is created lazily in the current context and released by ``backward``.
"""

import logging
from contextlib import contextmanager
from contextvars import ContextVar
from typing import Callable, ContextManager, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

import config
from exceptions import NonFiniteError, ShapeError, TapeError

logger = logging.getLogger(__name__)

Scalar = Union[int, float]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_default_dtype: ContextVar[np.dtype] = ContextVar('default_dtype', default=np.dtype(config.PRECISION))
_active_tape: ContextVar[Optional['Tape']] = ContextVar('active_tape', default=None)
_grad_enabled: ContextVar[bool] = ContextVar('grad_enabled', default=True)
_check_finite: ContextVar[bool] = ContextVar('check_finite', default=config.CHECK_FINITE)


def default_dtype() -> np.dtype:
    """Element type for newly created tensors in the current context"""
    return _default_dtype.get()


@contextmanager
def precision(dtype: Union[str, np.dtype]) -> Iterator[None]:
    """Switch the element type of newly created tensors"""
    token = _default_dtype.set(np.dtype(dtype))
    try:
        yield
    finally:
        _default_dtype.reset(token)


def float64_mode() -> ContextManager[None]:
    """64-bit elements, used by the gradient-check suites"""
    return precision(np.float64)


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate ops without recording them"""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


@contextmanager
def finite_checks(enabled: bool = True) -> Iterator[None]:
    """Scan every op output for NaN/Inf and raise NonFiniteError"""
    token = _check_finite.set(enabled)
    try:
        yield
    finally:
        _check_finite.reset(token)


class Node:
    """One recorded op"""
    __slots__ = ('op', 'inputs', 'output', 'backward_fn', 'tape')

    def __init__(self, op: str, inputs: Tuple['Tensor', ...], output: 'Tensor',
                 backward_fn: BackwardFn, tape: 'Tape'):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.tape = tape


class Tape:
    """Ordered record of ops for one forward pass"""

    def __init__(self):
        self.nodes: List[Node] = []
        self.released = False
        self._token = None

    def __enter__(self) -> 'Tape':
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        if self.released:
            raise TapeError("Cannot record on a released tape")
        self.nodes.append(node)

    def release(self) -> None:
        """Drop saved activations; the tape cannot be replayed afterwards"""
        for node in self.nodes:
            node.inputs = ()
            node.backward_fn = None
        self.nodes.clear()
        self.released = True
        if _active_tape.get() is self and self._token is None:
            _active_tape.set(None)

    def run_backward(self, loss: 'Tensor') -> Dict[int, Tuple['Tensor', np.ndarray]]:
        """
        Reverse sweep from a scalar loss

        Returns:
            Mapping id(tensor) -> (tensor, gradient) for every tensor that is a
            leaf of this tape (parameters and inputs created outside it)
        """
        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: Dict[int, Tensor] = {}

        for node in reversed(self.nodes):
            grad_out = grads.pop(id(node.output), None)
            if grad_out is None:
                continue
            input_grads = node.backward_fn(grad_out)
            for tensor, grad in zip(node.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                grads[key] = grads[key] + grad if key in grads else grad
                if tensor.node is None or tensor.node.tape is not self:
                    leaves[key] = tensor

        return {key: (tensor, grads[key]) for key, tensor in leaves.items()}


def _current_tape() -> Tape:
    tape = _active_tape.get()
    if tape is None or tape.released:
        tape = Tape()
        _active_tape.set(tape)
    return tape


class Tensor:
    """n-dimensional array participating in the differentiation tape"""
    __slots__ = ('data', 'requires_grad', 'grad', 'node', 'name', '__weakref__')

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        self.data = np.array(data, dtype=dtype or default_dtype(), copy=True)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool = False) -> 'Tensor':
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out.node = None
        out.name = None
        return out

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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> 'Tensor':
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other):
        return elementwise('add', self, other)

    def __radd__(self, other):
        return elementwise('add', self, other)

    def __sub__(self, other):
        return elementwise('sub', self, other)

    def __rsub__(self, other):
        return elementwise('add', elementwise('scale', self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return elementwise('scale', self, other)
        return elementwise('mul', self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return elementwise('scale', self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> 'Tensor':
        return transpose(self)

    def sum(self) -> 'Tensor':
        return reduce_sum(self)

    def mean(self) -> 'Tensor':
        return mean(self)


TensorLike = Union[Tensor, np.ndarray, Scalar]


def as_tensor(value: TensorLike) -> Tensor:
    """Wrap arrays and scalars as constant tensors"""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def record_op(data: np.ndarray, inputs: Sequence[Tensor], op: str, backward_fn: BackwardFn) -> Tensor:
    """
    Create the output tensor of an op and record it on the active tape

    Args:
        data: Forward result
        inputs: Tensors the op read
        op: Op name used in diagnostics
        backward_fn: Maps the output gradient to one gradient (or None) per input

    Returns:
        Output tensor; requires_grad when any input does
    """
    if _check_finite.get() and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")

    requires_grad = _grad_enabled.get() and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires_grad)
    if requires_grad:
        tape = _current_tape()
        node = Node(op, tuple(inputs), out, backward_fn, tape)
        tape.record(node)
        out.node = node
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch", a.shape, b.shape)


def elementwise(op: str, a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    """
    Elementwise add / sub / mul, or scale by a scalar

    b may be a Python scalar for every op; tensor operands must share a shape.
    """
    if op not in ('add', 'sub', 'mul', 'scale'):
        raise ValueError(f"Unknown elementwise op '{op}'")
    a = as_tensor(a)

    if op == 'scale' or not isinstance(b, (Tensor, np.ndarray)):
        if isinstance(b, Tensor):
            raise ValueError("scale takes a scalar factor")
        c = float(b)
        if op in ('scale', 'mul'):
            return record_op(a.data * a.data.dtype.type(c), (a,), op, lambda g: (g * c,))
        sign = 1.0 if op == 'add' else -1.0
        return record_op(a.data + a.data.dtype.type(sign * c), (a,), op, lambda g: (g,))

    b = as_tensor(b)
    _check_same_shape(op, a, b)
    if op == 'add':
        return record_op(a.data + b.data, (a, b), op, lambda g: (g, g))
    if op == 'sub':
        return record_op(a.data - b.data, (a, b), op, lambda g: (g, -g))
    a_data, b_data = a.data, b.data
    return record_op(a_data * b_data, (a, b), op, lambda g: (g * b_data, g * a_data))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of m×n and n×p tensors"""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul: inner dimensions differ", a.shape, b.shape)
    a_data, b_data = a.data, b.data

    def backward(g):
        return g @ b_data.T, a_data.T @ g

    return record_op(a_data @ b_data, (a, b), 'matmul', backward)


def reduce_sum(a: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor"""
    shape, dtype = a.shape, a.dtype
    return record_op(np.asarray(a.data.sum(), dtype=dtype), (a,), 'sum',
                     lambda g: (np.full(shape, g, dtype=dtype),))


def mean(a: Tensor) -> Tensor:
    """Mean of all elements as a scalar tensor"""
    shape, dtype, n = a.shape, a.dtype, a.size
    return record_op(np.asarray(a.data.mean(), dtype=dtype), (a,), 'mean',
                     lambda g: (np.full(shape, g / n, dtype=dtype),))


def mse(a: Tensor, b: TensorLike) -> Tensor:
    """Mean of squared elementwise differences"""
    b = as_tensor(b)
    _check_same_shape('mse', a, b)
    diff = a.data - b.data
    n = diff.size

    def backward(g):
        grad_a = (2.0 / n) * g * diff
        return grad_a, -grad_a

    return record_op(np.asarray(np.mean(diff * diff), dtype=diff.dtype), (a, b), 'mse', backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Reshape without copying"""
    original = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {original} as {tuple(shape)}") from e
    return record_op(data, (a,), 'reshape', lambda g: (g.reshape(original),))


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes (reverse them by default)"""
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return record_op(np.transpose(a.data, axes), (a,), 'transpose', lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along an existing axis"""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    reference = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(reference) or any(
                d1 != d2 for i, (d1, d2) in enumerate(zip(reference, t.shape)) if i != axis % t.ndim):
            raise ShapeError("concat: shapes differ off the concat axis", reference, t.shape)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, 'concat', backward)


def _finish_backward(tape: Tape, loss: Tensor) -> Dict[int, Tuple[Tensor, np.ndarray]]:
    if loss.size != 1:
        raise ShapeError("backward needs a scalar loss", loss.shape)
    if loss.node is None:
        if loss.requires_grad:
            return {id(loss): (loss, np.ones_like(loss.data))}
        return {}
    if tape.released:
        raise TapeError("Loss is not on a live tape (was backward already called?)")
    result = tape.run_backward(loss)
    tape.release()
    return result


def _loss_tape(loss: Tensor) -> Optional[Tape]:
    if loss.size != 1:
        raise ShapeError("backward needs a scalar loss", loss.shape)
    return loss.node.tape if loss.node is not None else None


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> None:
    """
    Accumulate ∂loss/∂leaf into ``.grad`` of every requires_grad leaf

    Args:
        loss: Scalar tensor produced on a live tape
        params: Optional parameters that should get a zero gradient when the
            loss does not depend on them

    Raises:
        ShapeError: loss is not scalar
        TapeError: the loss's tape was already released
    """
    tape = _loss_tape(loss)
    found = _finish_backward(tape, loss) if tape is not None else _finish_backward(Tape(), loss)
    for tensor, grad in found.values():
        tensor.grad = grad if tensor.grad is None else tensor.grad + grad
    for param in params or ():
        if param.requires_grad and param.grad is None:
            param.grad = np.zeros_like(param.data)


def gradients(loss: Tensor, params: Sequence[Tensor]) -> List[np.ndarray]:
    """
    ∂loss/∂param for each param, without touching ``.grad``

    Safe to call from worker threads as long as each thread owns its tape.
    """
    tape = _loss_tape(loss)
    found = _finish_backward(tape, loss) if tape is not None else _finish_backward(Tape(), loss)
    return [found[id(p)][1] if id(p) in found else np.zeros_like(p.data) for p in params]


def check_finite(tensor: Tensor, what: str, sample_id: Optional[str] = None) -> Tensor:
    """Raise NonFiniteError unless every element is finite"""
    if not np.all(np.isfinite(tensor.data)):
        raise NonFiniteError(f"{what} is not finite", sample_id)
    return tensor
