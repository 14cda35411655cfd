"""
Autodiff Core

Dense float64 tensors with reverse-mode differentiation. Every operation is a
``Function`` with a forward rule over numpy arrays and a backward rule that
maps the output gradient to one gradient per operand. Results remember the
function, operands and saved context, which makes the recorded trace both
differentiable and replayable.
"""

import logging
import threading
from contextlib import contextmanager
from typing import (
    Callable,
    Dict,
    Iterator,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np

from .errors import DomainError, ShapeMismatchError

logger = logging.getLogger(__name__)

DTYPE = np.float64

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]

_recording = threading.local()


def is_grad_enabled() -> bool:
    """Return whether operations on this thread are being recorded."""
    return getattr(_recording, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable trace recording on the current thread."""
    previous = is_grad_enabled()
    _recording.enabled = False
    try:
        yield
    finally:
        _recording.enabled = previous


class Context:
    """Scratch space a forward rule fills for its backward rule."""

    def __init__(self) -> None:
        self.saved: Tuple[np.ndarray, ...] = ()

    def save_for_backward(self, *arrays: np.ndarray) -> None:
        self.saved = arrays


class Node:
    """One recorded operation: function, operands, context and options."""

    __slots__ = ("function", "parents", "ctx", "options")

    def __init__(
        self,
        function: type,
        parents: Tuple["Tensor", ...],
        ctx: Context,
        options: Dict,
    ) -> None:
        self.function = function
        self.parents = parents
        self.ctx = ctx
        self.options = options


class Tensor:
    """Immutable dense float64 array that may take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(
        self,
        values: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        _copy: bool = True,
    ) -> None:
        if isinstance(values, Tensor):
            values = values.data
        array = np.array(values, dtype=DTYPE) if _copy else np.asarray(values, DTYPE)
        array.setflags(write=False)
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None

    # Array-like properties

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError("item", self.shape, ())
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """Return a writable copy of the values."""
        return np.array(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, _copy=False)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # Parameter update entry points

    def assign_(self, values: ArrayLike) -> None:
        """Replace the values of a leaf tensor (parameter updates only)."""
        array = np.array(values.data if isinstance(values, Tensor) else values, DTYPE)
        if array.shape != self.shape:
            raise ShapeMismatchError("assign", self.shape, array.shape)
        array.setflags(write=False)
        self.data = array

    def zero_grad(self) -> None:
        self.grad = None

    def _set_data(self, array: np.ndarray) -> None:
        array = np.asarray(array, DTYPE)
        array.setflags(write=False)
        self.data = array

    # Differentiation

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every reachable leaf."""
        if self.data.size != 1:
            raise ShapeMismatchError("backward (scalar required)", self.shape, ())
        order = topological_order(self)
        grads: Dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}

        for tensor in reversed(order):
            grad = grads.pop(id(tensor), None)
            if grad is None or not tensor.requires_grad:
                continue
            node = tensor._node
            if node is None:
                tensor.grad = grad if tensor.grad is None else tensor.grad + grad
                continue
            parent_grads = node.function.backward(node.ctx, grad)
            for parent, parent_grad in zip(node.parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + parent_grad
                else:
                    grads[key] = parent_grad

    # Operator overloads

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __rmatmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(other, self)

    # Method forms of the functional API

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def softmax(self, axis: int = -1) -> "Tensor":
        return softmax(self, axis=axis)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def var(self, axis=None, keepdims: bool = False) -> "Tensor":
        return var(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value: ArrayLike) -> Tensor:
    """Wrap constants; tensors pass through unchanged."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False)


def parameter(values: ArrayLike, name: Optional[str] = None) -> Tensor:
    """Create a leaf tensor that receives gradients."""
    return Tensor(values, requires_grad=True, name=name)


def topological_order(root: Tensor) -> List[Tensor]:
    """Return every tensor reachable from ``root``, operands before results."""
    order: List[Tensor] = []
    seen = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in seen:
            continue
        seen.add(id(tensor))
        stack.append((tensor, True))
        if tensor._node is not None:
            for parent in tensor._node.parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
    return order


class Function:
    """Base class for differentiable primitives."""

    name = "function"

    @staticmethod
    def forward(ctx: Context, *inputs: np.ndarray, **options) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *operands: ArrayLike, **options) -> Tensor:
        tensors = tuple(as_tensor(operand) for operand in operands)
        ctx = Context()
        data = cls.forward(ctx, *(t.data for t in tensors), **options)
        recording = is_grad_enabled()
        out = Tensor(
            data,
            requires_grad=recording and any(t.requires_grad for t in tensors),
            _copy=False,
        )
        if recording:
            out._node = Node(cls, tensors, ctx, options)
        return out


def _broadcast_shape(operation: str, a: np.ndarray, b: np.ndarray) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(operation, a.shape, b.shape) from None


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, extent in enumerate(shape) if extent == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _expand_reduced(
    grad: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool
) -> np.ndarray:
    """Broadcast the gradient of a reduction back over the reduced axes."""
    if axis is not None and not keepdims:
        grad = np.expand_dims(grad, axis)
    return np.broadcast_to(grad, shape)


def _reduced_count(shape: Tuple[int, ...], axis) -> int:
    if axis is None:
        return int(np.prod(shape)) if shape else 1
    axes = axis if isinstance(axis, tuple) else (axis,)
    return int(np.prod([shape[a] for a in axes]))


# Elementwise binary operations


class Add(Function):
    name = "add"

    @staticmethod
    def forward(ctx, a, b):
        _broadcast_shape("add", a, b)
        ctx.shapes = (a.shape, b.shape)
        return a + b

    @staticmethod
    def backward(ctx, grad):
        left, right = ctx.shapes
        return _unbroadcast(grad, left), _unbroadcast(grad, right)


class Sub(Function):
    name = "sub"

    @staticmethod
    def forward(ctx, a, b):
        _broadcast_shape("sub", a, b)
        ctx.shapes = (a.shape, b.shape)
        return a - b

    @staticmethod
    def backward(ctx, grad):
        left, right = ctx.shapes
        return _unbroadcast(grad, left), _unbroadcast(-grad, right)


class Mul(Function):
    name = "mul"

    @staticmethod
    def forward(ctx, a, b):
        _broadcast_shape("mul", a, b)
        ctx.save_for_backward(a, b)
        return a * b

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx.saved
        return _unbroadcast(grad * b, a.shape), _unbroadcast(grad * a, b.shape)


class Div(Function):
    name = "div"

    @staticmethod
    def forward(ctx, a, b):
        _broadcast_shape("div", a, b)
        if np.any(b == 0):
            raise DomainError("div: division by zero")
        ctx.save_for_backward(a, b)
        return a / b

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx.saved
        return (
            _unbroadcast(grad / b, a.shape),
            _unbroadcast(-grad * a / (b * b), b.shape),
        )


class Neg(Function):
    name = "neg"

    @staticmethod
    def forward(ctx, a):
        return -a

    @staticmethod
    def backward(ctx, grad):
        return (-grad,)


class MatMul(Function):
    name = "matmul"

    @staticmethod
    def forward(ctx, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeMismatchError("matmul", a.shape, b.shape)
        ctx.save_for_backward(a, b)
        return a @ b

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx.saved
        return grad @ b.T, a.T @ grad


# Elementwise unary operations


class Exp(Function):
    name = "exp"

    @staticmethod
    def forward(ctx, a):
        with np.errstate(over="ignore"):
            out = np.exp(a)
        if not np.all(np.isfinite(out)):
            raise DomainError(f"exp: overflow for input max {float(np.max(a)):.4g}")
        ctx.save_for_backward(out)
        return out

    @staticmethod
    def backward(ctx, grad):
        (out,) = ctx.saved
        return (grad * out,)


class Log(Function):
    name = "log"

    @staticmethod
    def forward(ctx, a):
        if np.any(a <= 0):
            raise DomainError(f"log: non-positive argument (min {float(np.min(a)):.4g})")
        ctx.save_for_backward(a)
        return np.log(a)

    @staticmethod
    def backward(ctx, grad):
        (a,) = ctx.saved
        return (grad / a,)


class Sqrt(Function):
    name = "sqrt"

    @staticmethod
    def forward(ctx, a):
        if np.any(a <= 0):
            raise DomainError(f"sqrt: non-positive argument (min {float(np.min(a)):.4g})")
        out = np.sqrt(a)
        ctx.save_for_backward(out)
        return out

    @staticmethod
    def backward(ctx, grad):
        (out,) = ctx.saved
        return (grad * 0.5 / out,)


class Sigmoid(Function):
    name = "sigmoid"

    @staticmethod
    def forward(ctx, a):
        decay = np.exp(-np.abs(a))
        out = np.where(a >= 0, 1.0 / (1.0 + decay), decay / (1.0 + decay))
        ctx.save_for_backward(out)
        return out

    @staticmethod
    def backward(ctx, grad):
        (out,) = ctx.saved
        return (grad * out * (1.0 - out),)


class Tanh(Function):
    name = "tanh"

    @staticmethod
    def forward(ctx, a):
        out = np.tanh(a)
        ctx.save_for_backward(out)
        return out

    @staticmethod
    def backward(ctx, grad):
        (out,) = ctx.saved
        return (grad * (1.0 - out * out),)


class Maximum(Function):
    """max(a, floor) with a constant floor; relu is the floor=0 case."""

    name = "maximum"

    @staticmethod
    def forward(ctx, a, floor=0.0):
        ctx.save_for_backward(a)
        ctx.floor = floor
        return np.maximum(a, floor)

    @staticmethod
    def backward(ctx, grad):
        (a,) = ctx.saved
        return (grad * (a > ctx.floor),)


class Abs(Function):
    name = "abs"

    @staticmethod
    def forward(ctx, a):
        ctx.save_for_backward(a)
        return np.abs(a)

    @staticmethod
    def backward(ctx, grad):
        (a,) = ctx.saved
        return (grad * np.sign(a),)


class Softmax(Function):
    name = "softmax"

    @staticmethod
    def forward(ctx, a, axis=-1):
        shifted = a - np.max(a, axis=axis, keepdims=True)
        weights = np.exp(shifted)
        out = weights / np.sum(weights, axis=axis, keepdims=True)
        ctx.save_for_backward(out)
        ctx.axis = axis
        return out

    @staticmethod
    def backward(ctx, grad):
        (out,) = ctx.saved
        inner = np.sum(grad * out, axis=ctx.axis, keepdims=True)
        return (out * (grad - inner),)


# Reductions and shape operations


class Sum(Function):
    name = "sum"

    @staticmethod
    def forward(ctx, a, axis=None, keepdims=False):
        ctx.shape, ctx.axis, ctx.keepdims = a.shape, axis, keepdims
        return np.asarray(np.sum(a, axis=axis, keepdims=keepdims))

    @staticmethod
    def backward(ctx, grad):
        return (_expand_reduced(grad, ctx.shape, ctx.axis, ctx.keepdims),)


class Mean(Function):
    name = "mean"

    @staticmethod
    def forward(ctx, a, axis=None, keepdims=False):
        ctx.shape, ctx.axis, ctx.keepdims = a.shape, axis, keepdims
        ctx.count = _reduced_count(a.shape, axis)
        return np.asarray(np.mean(a, axis=axis, keepdims=keepdims))

    @staticmethod
    def backward(ctx, grad):
        expanded = _expand_reduced(grad, ctx.shape, ctx.axis, ctx.keepdims)
        return (expanded / ctx.count,)


class Var(Function):
    """Population variance (divides by N)."""

    name = "var"

    @staticmethod
    def forward(ctx, a, axis=None, keepdims=False):
        centered = a - np.mean(a, axis=axis, keepdims=True)
        ctx.save_for_backward(centered)
        ctx.shape, ctx.axis, ctx.keepdims = a.shape, axis, keepdims
        ctx.count = _reduced_count(a.shape, axis)
        return np.asarray(np.mean(centered * centered, axis=axis, keepdims=keepdims))

    @staticmethod
    def backward(ctx, grad):
        (centered,) = ctx.saved
        expanded = _expand_reduced(grad, ctx.shape, ctx.axis, ctx.keepdims)
        return (expanded * 2.0 * centered / ctx.count,)


class Reshape(Function):
    name = "reshape"

    @staticmethod
    def forward(ctx, a, shape=()):
        ctx.shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError:
            raise ShapeMismatchError("reshape", a.shape, shape) from None

    @staticmethod
    def backward(ctx, grad):
        return (grad.reshape(ctx.shape),)


class Transpose(Function):
    name = "transpose"

    @staticmethod
    def forward(ctx, a):
        if a.ndim != 2:
            raise ShapeMismatchError("transpose", a.shape, a.shape[::-1])
        return a.T

    @staticmethod
    def backward(ctx, grad):
        return (grad.T,)


class BroadcastTo(Function):
    name = "broadcast_to"

    @staticmethod
    def forward(ctx, a, shape=()):
        ctx.shape = a.shape
        try:
            return np.array(np.broadcast_to(a, shape))
        except ValueError:
            raise ShapeMismatchError("broadcast_to", a.shape, shape) from None

    @staticmethod
    def backward(ctx, grad):
        return (_unbroadcast(grad, ctx.shape),)


# Functional API


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Add.apply(a, b)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Sub.apply(a, b)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Mul.apply(a, b)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Div.apply(a, b)


def neg(a: ArrayLike) -> Tensor:
    return Neg.apply(a)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    return MatMul.apply(a, b)


def exp(a: ArrayLike) -> Tensor:
    return Exp.apply(a)


def log(a: ArrayLike) -> Tensor:
    return Log.apply(a)


def sqrt(a: ArrayLike) -> Tensor:
    return Sqrt.apply(a)


def sigmoid(a: ArrayLike) -> Tensor:
    return Sigmoid.apply(a)


def tanh(a: ArrayLike) -> Tensor:
    return Tanh.apply(a)


def relu(a: ArrayLike) -> Tensor:
    return Maximum.apply(a, floor=0.0)


def maximum(a: ArrayLike, floor: float) -> Tensor:
    """Elementwise max against a constant."""
    return Maximum.apply(a, floor=float(floor))


def abs_(a: ArrayLike) -> Tensor:
    return Abs.apply(a)


def softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    return Softmax.apply(a, axis=axis)


def sum_(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    return Mean.apply(a, axis=axis, keepdims=keepdims)


def var(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    return Var.apply(a, axis=axis, keepdims=keepdims)


def l1_norm(a: ArrayLike, axis=None) -> Tensor:
    return sum_(abs_(a), axis=axis)


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def transpose(a: ArrayLike) -> Tensor:
    return Transpose.apply(a)


def broadcast_to(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    return BroadcastTo.apply(a, shape=tuple(shape))


class ComputationRecord:
    """Topologically ordered trace of the operations that produced a tensor."""

    def __init__(self, root: Tensor) -> None:
        self.root = root
        self.nodes: List[Tensor] = [
            tensor for tensor in topological_order(root) if tensor._node is not None
        ]

    def __len__(self) -> int:
        return len(self.nodes)

    def operations(self) -> List[str]:
        return [tensor._node.function.name for tensor in self.nodes]

    def replay(self) -> np.ndarray:
        """Recompute every recorded value from the current leaf values."""
        for tensor in self.nodes:
            node = tensor._node
            ctx = Context()
            data = node.function.forward(
                ctx, *(parent.data for parent in node.parents), **node.options
            )
            node.ctx = ctx
            tensor._set_data(data)
        return np.array(self.root.data)


Expression = Union[Tensor, Callable[[], Tensor]]


def named_inputs(inputs: Union[Mapping[str, Tensor], Sequence[Tensor]]) -> Dict[str, Tensor]:
    if isinstance(inputs, Mapping):
        return dict(inputs)
    return {tensor.name or f"param_{i}": tensor for i, tensor in enumerate(inputs)}


def evaluate_with_gradients(
    expression: Expression,
    inputs: Union[Mapping[str, Tensor], Sequence[Tensor]],
) -> Tuple[float, Dict[str, np.ndarray]]:
    """
    Evaluate a scalar expression and its gradient for every input parameter.

    Args:
        expression: Scalar tensor, or a callable building one from the inputs
        inputs: Parameters keyed by name (or a sequence of named tensors)

    Returns:
        Tuple of (scalar value, gradient per parameter name); parameters that
        do not influence the expression get a zero gradient
    """
    params = named_inputs(inputs)
    for name, tensor in params.items():
        if not np.all(np.isfinite(tensor.data)):
            raise DomainError(f"Input '{name}' contains non-finite values")
        tensor.zero_grad()

    root = expression() if callable(expression) else expression
    if root.size != 1:
        raise ShapeMismatchError("evaluate_with_gradients (scalar required)", root.shape, ())
    root.backward()

    gradients = {
        name: (
            np.array(tensor.grad)
            if tensor.grad is not None
            else np.zeros_like(tensor.data)
        )
        for name, tensor in params.items()
        if tensor.requires_grad
    }
    return root.item(), gradients
