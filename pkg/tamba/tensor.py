"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records a node on a dynamic tape when at least one input requires a
gradient. ``Tensor.backward`` replays that tape in reverse topological order and sums the
contributions that reach each leaf. Matrix products report their cost to any active
``FlopCounter``; elementwise work is not charged.
"""

from __future__ import annotations

import threading
from collections import Counter
from contextlib import contextmanager
from typing import (
    Any,
    Dict,
    Iterator,
    List,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np

from tamba.config import Profile
from tamba.errors import ContractError, DimensionError, NumericError, OracleError

GELU_SCALE = float(np.sqrt(2.0 / np.pi))
GELU_CUBIC = 0.044715
MASK_VALUE = -1e30

Axis = Optional[Union[int, Tuple[int, ...]]]


class _TapeState(threading.local):
    def __init__(self) -> None:
        super().__init__()
        self.grad_enabled = True
        self.check_finite = True
        self.counters: List[FlopCounter] = []
        self.stopped: Optional[StoppedValues] = None


_state = _TapeState()


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording for the current thread."""
    previous = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@contextmanager
def use_profile(profile: Union[Profile, str]) -> Iterator[None]:
    """Switch NaN/Inf checking on (debug) or off (benchmark) for the current thread."""
    previous = _state.check_finite
    _state.check_finite = Profile(profile) is Profile.DEBUG
    try:
        yield
    finally:
        _state.check_finite = previous


def set_profile(profile: Union[Profile, str]) -> None:
    _state.check_finite = Profile(profile) is Profile.DEBUG


def is_grad_enabled() -> bool:
    return _state.grad_enabled


class FlopCounter:
    """Accumulates FLOPs charged by matrix products while active.

    Counters nest; every active counter on the current thread sees every charge.
    """

    def __init__(self) -> None:
        self.total = 0
        self.by_tag: Counter = Counter()

    def __enter__(self) -> "FlopCounter":
        _state.counters.append(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        _state.counters.remove(self)

    @property
    def giga(self) -> float:
        return self.total / 1e9


class StoppedValues:
    """Outputs of ``stop_gradient`` captured on one pass and fed back on later passes.

    Inside ``record()`` every ``stop_gradient`` output is kept in call order. Inside
    ``replay()`` the same calls return those arrays instead of their live input, so a
    perturbed pass holds the cut paths at the values the recorded pass saw.
    """

    def __init__(self) -> None:
        self.values: List[np.ndarray] = []
        self._cursor = 0
        self._replaying = False

    @contextmanager
    def _active(self, replaying: bool) -> Iterator["StoppedValues"]:
        previous = _state.stopped
        _state.stopped = self
        self._replaying, self._cursor = replaying, 0
        try:
            yield self
        finally:
            _state.stopped = previous

    @contextmanager
    def record(self) -> Iterator["StoppedValues"]:
        self.values = []
        with self._active(False):
            yield self

    @contextmanager
    def replay(self) -> Iterator["StoppedValues"]:
        with self._active(True):
            yield self
        if self._cursor != len(self.values):
            raise OracleError(
                f"replay used {self._cursor} of {len(self.values)} recorded stop_gradient values"
            )

    def take(self, value: np.ndarray) -> np.ndarray:
        if not self._replaying:
            self.values.append(value.copy())
            return value.copy()
        if self._cursor >= len(self.values):
            raise OracleError("replay reached more stop_gradient calls than were recorded")
        frozen = self.values[self._cursor]
        self._cursor += 1
        if frozen.shape != value.shape:
            raise DimensionError("replayed stop_gradient value", frozen.shape, value.shape)
        return frozen.copy()


def charge_flops(flops: int, tag: str) -> None:
    for counter in _state.counters:
        counter.total += int(flops)
        counter.by_tag[tag] += int(flops)


class Tensor:
    """A dense row-major float64 array that can take part in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")
    # Keeps numpy from broadcasting a Tensor into an object array on the right of an operator.
    __array_ufunc__ = None

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ) -> None:
        self.data: np.ndarray = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Function] = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        tensor = cls.__new__(cls)
        tensor.data = data if data.dtype == np.float64 else data.astype(np.float64)
        tensor.requires_grad = requires_grad
        tensor.grad = None
        tensor.name = None
        tensor._node = None
        return tensor

    @classmethod
    def zeros(cls, *shape: int, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(shape), requires_grad=requires_grad)

    @classmethod
    def ones(cls, *shape: int, requires_grad: bool = False) -> "Tensor":
        return cls(np.ones(shape), requires_grad=requires_grad)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic

    def __add__(self, other: Any) -> "Tensor":
        return Add.apply(self, other)

    def __radd__(self, other: Any) -> "Tensor":
        return Add.apply(other, self)

    def __sub__(self, other: Any) -> "Tensor":
        return Sub.apply(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        return Sub.apply(other, self)

    def __mul__(self, other: Any) -> "Tensor":
        return Mul.apply(self, other)

    def __rmul__(self, other: Any) -> "Tensor":
        return Mul.apply(other, self)

    def __truediv__(self, other: Any) -> "Tensor":
        return Div.apply(self, other)

    def __rtruediv__(self, other: Any) -> "Tensor":
        return Div.apply(other, self)

    def __neg__(self) -> "Tensor":
        return Neg.apply(self)

    def __pow__(self, exponent: float) -> "Tensor":
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other: Any) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        return GetItem.apply(self, index=index)

    # reductions and shape

    def sum(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def max(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        return Max.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=tuple(shape))

    def transpose(self, *axes: int) -> "Tensor":
        return Transpose.apply(self, axes=tuple(axes) if axes else None)

    def swapaxes(self, first: int, second: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[first], axes[second] = axes[second], axes[first]
        return Transpose.apply(self, axes=tuple(axes))

    def unsqueeze(self, axis: int) -> "Tensor":
        shape = list(self.shape)
        position = axis if axis >= 0 else len(shape) + axis + 1
        shape.insert(position, 1)
        return self.reshape(tuple(shape))

    # elementwise

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self) -> "Tensor":
        return Log.apply(self)

    def abs(self) -> "Tensor":
        return Abs.apply(self)

    def sigmoid(self) -> "Tensor":
        return Sigmoid.apply(self)

    def tanh(self) -> "Tensor":
        return Tanh.apply(self)

    def backward(self) -> None:
        """Populate ``.grad`` on every leaf that requires a gradient.

        Raises
        ------
        ContractError
            If this tensor is not a scalar or is not connected to any leaf that requires a
            gradient.
        """
        grads = _backpropagate(self)
        for leaf, value in grads.items():
            leaf.grad = value.copy() if leaf.grad is None else leaf.grad + value


TensorLike = Union[Tensor, np.ndarray, float, int, Sequence[float]]


def as_tensor(value: TensorLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.array(value, dtype=np.float64), False)


class Function:
    """One recorded operation: ``forward`` on arrays, ``backward`` from the output gradient."""

    tag = "op"

    def __init__(self) -> None:
        self.inputs: Tuple[Tensor, ...] = ()

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: TensorLike, **kwargs: Any) -> Tensor:
        tensors = tuple(as_tensor(value) for value in inputs)
        function = cls()
        output = function.forward(*(tensor.data for tensor in tensors), **kwargs)
        if _state.check_finite and not np.all(np.isfinite(output)):
            raise NumericError(f"Non-finite value produced by '{cls.tag}'")
        requires_grad = _state.grad_enabled and any(tensor.requires_grad for tensor in tensors)
        result = Tensor._wrap(np.asarray(output), requires_grad)
        if requires_grad:
            function.inputs = tensors
            result._node = function
        return result


class GraphNode(NamedTuple):
    tag: str
    function: Function
    inputs: Tuple[Tensor, ...]
    output: Tensor


class Graph:
    """The recorded operations behind one output, in topological order."""

    def __init__(self, nodes: List[GraphNode], leaves: List[Tensor]) -> None:
        self.nodes = nodes
        self.leaves = leaves

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def from_output(cls, output: Tensor) -> "Graph":
        nodes: List[GraphNode] = []
        leaves: List[Tensor] = []
        visited = set()
        # Iterative post-order walk; recursive walks overflow on long scans.
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                node = tensor._node
                assert node is not None
                nodes.append(GraphNode(node.tag, node, node.inputs, tensor))
                continue
            if id(tensor) in visited:
                continue
            visited.add(id(tensor))
            if tensor._node is None:
                if tensor.requires_grad:
                    leaves.append(tensor)
                continue
            stack.append((tensor, True))
            for parent in reversed(tensor._node.inputs):
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(nodes, leaves)


def _backpropagate(loss: Tensor) -> Dict[Tensor, np.ndarray]:
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any tensor that requires grad")
    graph = Graph.from_output(loss)
    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        upstream = pending.pop(id(node.output), None)
        if upstream is None:
            continue
        for tensor, contribution in zip(node.inputs, node.function.backward(upstream)):
            if contribution is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            pending[key] = contribution if key not in pending else pending[key] + contribution
    result: Dict[Tensor, np.ndarray] = {}
    for leaf in graph.leaves:
        value = pending.get(id(leaf))
        result[leaf] = np.zeros_like(leaf.data) if value is None else np.array(value)
    if id(loss) in pending and loss.is_leaf:
        result[loss] = pending[id(loss)]
    return result


def grad(loss: Tensor, inputs: Sequence[Tensor]) -> List[np.ndarray]:
    """Gradients of ``loss`` with respect to ``inputs`` without touching ``.grad``.

    Inputs that the loss does not depend on receive zeros.
    """
    grads = _backpropagate(loss)
    return [grads.get(tensor, np.zeros_like(tensor.data)) for tensor in inputs]


def _unbroadcast(grad_value: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad_value.shape == shape:
        return grad_value
    while grad_value.ndim > len(shape):
        grad_value = grad_value.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad_value.shape[axis] != 1:
            grad_value = grad_value.sum(axis=axis, keepdims=True)
    return grad_value


class Add(Function):
    tag = "add"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:  # type: ignore[override]
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    tag = "sub"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:  # type: ignore[override]
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    tag = "mul"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:  # type: ignore[override]
        self.a, self.b = a, b
        return a * b

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return _unbroadcast(grad * self.b, self.a.shape), _unbroadcast(grad * self.a, self.b.shape)


class Div(Function):
    tag = "div"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:  # type: ignore[override]
        self.a, self.b = a, b
        return a / b

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (
            _unbroadcast(grad / self.b, self.a.shape),
            _unbroadcast(-grad * self.a / (self.b * self.b), self.b.shape),
        )


class Neg(Function):
    tag = "neg"

    def forward(self, a: np.ndarray) -> np.ndarray:  # type: ignore[override]
        return -a

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (-grad,)


class Pow(Function):
    tag = "pow"

    def forward(self, a: np.ndarray, exponent: float = 1.0) -> np.ndarray:  # type: ignore[override]
        self.a, self.exponent = a, exponent
        return np.power(a, exponent)

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (grad * self.exponent * np.power(self.a, self.exponent - 1.0),)


class Exp(Function):
    tag = "exp"

    def forward(self, a: np.ndarray) -> np.ndarray:  # type: ignore[override]
        self.out = np.exp(a)
        return self.out

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (grad * self.out,)


class Log(Function):
    tag = "log"

    def forward(self, a: np.ndarray) -> np.ndarray:  # type: ignore[override]
        self.a = a
        return np.log(a)

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (grad / self.a,)


class Abs(Function):
    tag = "abs"

    def forward(self, a: np.ndarray) -> np.ndarray:  # type: ignore[override]
        self.sign = np.sign(a)
        return np.abs(a)

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (grad * self.sign,)


class Sigmoid(Function):
    tag = "sigmoid"

    def forward(self, a: np.ndarray) -> np.ndarray:  # type: ignore[override]
        self.out = _stable_sigmoid(a)
        return self.out

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (grad * self.out * (1.0 - self.out),)


class Tanh(Function):
    tag = "tanh"

    def forward(self, a: np.ndarray) -> np.ndarray:  # type: ignore[override]
        self.out = np.tanh(a)
        return self.out

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (grad * (1.0 - self.out * self.out),)


class Softplus(Function):
    tag = "softplus"

    def forward(self, a: np.ndarray) -> np.ndarray:  # type: ignore[override]
        self.a = a
        return np.log1p(np.exp(-np.abs(a))) + np.maximum(a, 0.0)

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (grad * _stable_sigmoid(self.a),)


class Gelu(Function):
    tag = "gelu"

    def forward(self, a: np.ndarray) -> np.ndarray:  # type: ignore[override]
        self.a = a
        self.inner = np.tanh(GELU_SCALE * (a + GELU_CUBIC * a**3))
        return 0.5 * a * (1.0 + self.inner)

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        a, inner = self.a, self.inner
        slope = GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * a * a)
        derivative = 0.5 * (1.0 + inner) + 0.5 * a * (1.0 - inner * inner) * slope
        return (grad * derivative,)


class MatMul(Function):
    tag = "matmul"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:  # type: ignore[override]
        self.a, self.b = a, b
        out = np.matmul(a, b)
        charge_flops(2 * out.size * a.shape[-1], self.tag)
        return out

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        grad_a = np.matmul(grad, np.swapaxes(self.b, -1, -2))
        grad_b = np.matmul(np.swapaxes(self.a, -1, -2), grad)
        return _unbroadcast(grad_a, self.a.shape), _unbroadcast(grad_b, self.b.shape)


class Sum(Function):
    tag = "sum"

    def forward(  # type: ignore[override]
        self, a: np.ndarray, axis: Axis = None, keepdims: bool = False
    ) -> np.ndarray:
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.sum(a, axis=axis, keepdims=keepdims)

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Function):
    tag = "mean"

    def forward(  # type: ignore[override]
        self, a: np.ndarray, axis: Axis = None, keepdims: bool = False
    ) -> np.ndarray:
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        if axis is None:
            self.count = a.size
        else:
            self.count = int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
        return np.mean(a, axis=axis, keepdims=keepdims)

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad / self.count, self.shape).copy(),)


class Max(Function):
    """Maximum over an axis; tied entries share the incoming gradient equally."""

    tag = "max"

    def forward(  # type: ignore[override]
        self, a: np.ndarray, axis: Axis = None, keepdims: bool = False
    ) -> np.ndarray:
        self.axis, self.keepdims = axis, keepdims
        peak = np.max(a, axis=axis, keepdims=True)
        hits = (a == peak).astype(np.float64)
        self.weights = hits / np.sum(hits, axis=axis, keepdims=True)
        return peak if keepdims else np.max(a, axis=axis)

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (grad * self.weights,)


class Pad(Function):
    tag = "pad"

    def forward(  # type: ignore[override]
        self, a: np.ndarray, widths: Tuple[Tuple[int, int], ...] = (), value: float = 0.0
    ) -> np.ndarray:
        self.window = tuple(slice(lo, lo + size) for (lo, _), size in zip(widths, a.shape))
        return np.pad(a, widths, mode="constant", constant_values=value)

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (grad[self.window].copy(),)


class Reshape(Function):
    tag = "reshape"

    def forward(  # type: ignore[override]
        self, a: np.ndarray, shape: Tuple[int, ...] = ()
    ) -> np.ndarray:
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (grad.reshape(self.shape),)


class Transpose(Function):
    tag = "transpose"

    def forward(  # type: ignore[override]
        self, a: np.ndarray, axes: Optional[Tuple[int, ...]] = None
    ) -> np.ndarray:
        self.axes = axes
        return np.transpose(a, axes)

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        if self.axes is None:
            return (np.transpose(grad),)
        return (np.transpose(grad, np.argsort(self.axes)),)


class GetItem(Function):
    tag = "getitem"

    def forward(self, a: np.ndarray, index: Any = None) -> np.ndarray:  # type: ignore[override]
        self.shape, self.index = a.shape, index
        return np.array(a[index])

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        full = np.zeros(self.shape)
        np.add.at(full, self.index, grad)
        return (full,)


class Concat(Function):
    tag = "concat"

    def forward(self, *arrays: np.ndarray, axis: int = 0) -> np.ndarray:  # type: ignore[override]
        self.axis = axis
        self.sizes = [array.shape[axis] for array in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        bounds = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, bounds, axis=self.axis))


class Stack(Function):
    tag = "stack"

    def forward(self, *arrays: np.ndarray, axis: int = 0) -> np.ndarray:  # type: ignore[override]
        self.axis = axis
        return np.stack(arrays, axis=axis)

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return tuple(np.moveaxis(grad, self.axis, 0))


class Softmax(Function):
    tag = "softmax"

    def forward(self, a: np.ndarray, axis: int = -1) -> np.ndarray:  # type: ignore[override]
        self.axis = axis
        shifted = a - np.max(a, axis=axis, keepdims=True)
        exps = np.exp(shifted)
        self.out = exps / np.sum(exps, axis=axis, keepdims=True)
        return self.out

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        inner = np.sum(grad * self.out, axis=self.axis, keepdims=True)
        return (self.out * (grad - inner),)


class LogSumExp(Function):
    tag = "logsumexp"

    def forward(  # type: ignore[override]
        self, a: np.ndarray, axis: int = -1, keepdims: bool = False
    ) -> np.ndarray:
        self.axis, self.keepdims = axis, keepdims
        peak = np.max(a, axis=axis, keepdims=True)
        exps = np.exp(a - peak)
        total = np.sum(exps, axis=axis, keepdims=True)
        self.weights = exps / total
        out = np.log(total) + peak
        return out if keepdims else np.squeeze(out, axis=axis)

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (grad * self.weights,)


class StopGradient(Function):
    tag = "stop_gradient"

    def forward(self, a: np.ndarray) -> np.ndarray:  # type: ignore[override]
        if _state.stopped is not None:
            return _state.stopped.take(a)
        return a.copy()

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (None,)


class LinearRecurrence(Function):
    """States of ``h[t+1] = a[t] * h[t] + x[t]`` for a diagonal transition.

    Inputs ``a`` and ``x`` have shape (..., L, n) and ``h0`` has shape (..., n); the output
    stacks ``h[0] .. h[L]`` into (..., L + 1, n).
    """

    tag = "linear_recurrence"

    def forward(  # type: ignore[override]
        self, a: np.ndarray, x: np.ndarray, h0: np.ndarray
    ) -> np.ndarray:
        length = a.shape[-2]
        states = np.empty(a.shape[:-2] + (length + 1, a.shape[-1]))
        states[..., 0, :] = h0
        for step in range(length):
            states[..., step + 1, :] = a[..., step, :] * states[..., step, :] + x[..., step, :]
            if _state.check_finite and not np.all(np.isfinite(states[..., step + 1, :])):
                raise NumericError("Non-finite state in selective scan", step=step)
        self.a, self.states = a, states
        return states

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        length = self.a.shape[-2]
        grad_a = np.empty_like(self.a)
        grad_x = np.empty_like(self.a)
        carry = grad[..., length, :].copy()
        for step in range(length - 1, -1, -1):
            grad_a[..., step, :] = carry * self.states[..., step, :]
            grad_x[..., step, :] = carry
            carry = grad[..., step, :] + self.a[..., step, :] * carry
        return grad_a, grad_x, carry


def _stable_sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a, dtype=np.float64)
    positive = a >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-a[positive]))
    exps = np.exp(a[~positive])
    out[~positive] = exps / (1.0 + exps)
    return out


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    left, right = as_tensor(a), as_tensor(b)
    if left.ndim < 2 or right.ndim < 2 or left.shape[-1] != right.shape[-2]:
        raise DimensionError("matmul inner extents differ", left.shape, right.shape)
    return MatMul.apply(left, right)


def affine(x: TensorLike, weight: TensorLike, bias: Optional[TensorLike] = None) -> Tensor:
    """``out[.., j] = sum_i x[.., i] * W[i, j] + b[j]``.

    Raises
    ------
    DimensionError
        If the last extent of ``x`` differs from the first extent of ``W`` or the bias width
        differs from the output width.
    """
    inputs, weights = as_tensor(x), as_tensor(weight)
    if inputs.ndim < 1 or weights.ndim != 2 or inputs.shape[-1] != weights.shape[0]:
        raise DimensionError(
            "affine input width does not match weight rows", inputs.shape, weights.shape
        )
    if inputs.ndim == 1:
        out = MatMul.apply(inputs.reshape(1, inputs.shape[0]), weights).reshape(weights.shape[1])
    else:
        out = MatMul.apply(inputs, weights)
    if bias is None:
        return out
    offsets = as_tensor(bias)
    if offsets.shape != (weights.shape[1],):
        raise DimensionError(
            "affine bias width does not match weight columns", offsets.shape, weights.shape
        )
    return out + offsets


def softmax(x: TensorLike, axis: int = -1) -> Tensor:
    tensor = as_tensor(x)
    if tensor.ndim == 0 or tensor.shape[axis] == 0:
        raise DimensionError(f"softmax over an empty axis {axis}", tensor.shape)
    return Softmax.apply(tensor, axis=axis)


def log_softmax(x: TensorLike, axis: int = -1) -> Tensor:
    tensor = as_tensor(x)
    return tensor - LogSumExp.apply(tensor, axis=axis, keepdims=True)


def logsumexp(x: TensorLike, axis: int = -1, keepdims: bool = False) -> Tensor:
    return LogSumExp.apply(x, axis=axis, keepdims=keepdims)


def layer_norm(x: TensorLike, gain: TensorLike, bias: TensorLike, eps: float = 1e-5) -> Tensor:
    """Normalize every trailing feature vector to zero mean and unit variance, then scale."""
    tensor = as_tensor(x)
    width = tensor.shape[-1] if tensor.ndim else 0
    if width < 1:
        raise DimensionError("layer_norm needs at least one feature", tensor.shape)
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be positive, got {eps}")
    centered = tensor - tensor.mean(axis=-1, keepdims=True)
    variance = (centered * centered).mean(axis=-1, keepdims=True)
    return centered * (variance + eps) ** -0.5 * gain + bias


def stop_gradient(x: TensorLike) -> Tensor:
    return StopGradient.apply(x)


def concat(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    return Concat.apply(*tensors, axis=axis)


def stack(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("stack needs at least one tensor")
    return Stack.apply(*tensors, axis=axis)


def pad(x: TensorLike, widths: Sequence[Tuple[int, int]], value: float = 0.0) -> Tensor:
    """Constant padding with ``(before, after)`` counts per axis, as ``np.pad`` takes them."""
    tensor = as_tensor(x)
    if len(widths) != tensor.ndim or any(lo < 0 or hi < 0 for lo, hi in widths):
        raise ContractError(f"pad widths {list(widths)} do not fit shape {tensor.shape}")
    return Pad.apply(tensor, widths=tuple((int(lo), int(hi)) for lo, hi in widths), value=value)


def exp(x: TensorLike) -> Tensor:
    return Exp.apply(x)


def log(x: TensorLike) -> Tensor:
    return Log.apply(x)


def sigmoid(x: TensorLike) -> Tensor:
    return Sigmoid.apply(x)


def tanh(x: TensorLike) -> Tensor:
    return Tanh.apply(x)


def softplus(x: TensorLike) -> Tensor:
    return Softplus.apply(x)


def gelu(x: TensorLike) -> Tensor:
    return Gelu.apply(x)


def linear_recurrence(a: TensorLike, x: TensorLike, h0: TensorLike) -> Tensor:
    return LinearRecurrence.apply(a, x, h0)


def where(mask: np.ndarray, x: TensorLike, fill: float = 0.0) -> Tensor:
    """Keep ``x`` where ``mask`` holds, replace the rest by ``fill`` (mask is constant)."""
    keep = np.asarray(mask, dtype=np.float64)
    out = as_tensor(x) * keep
    if fill == 0.0:
        return out
    return out + (1.0 - keep) * fill
