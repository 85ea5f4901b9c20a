"""Dense tensors on numpy with a recorded tape and reverse-mode differentiation.

Operations run eagerly. While a :class:`Graph` is active (``with graph:`` or
through :meth:`Graph.eval`), every operation whose output depends on a tensor
with ``requires_grad=True`` is appended to the graph's tape. The tape is in
creation order, which is a topological order, so :meth:`Graph.backward` only
has to walk it in reverse. Outside of any graph nothing is recorded, which is
how evaluation and metric code avoid paying for gradients.

Broadcasting is restricted to leading-batch expansion: two operands are
compatible when their shapes are equal or when one shape is a suffix of the
other. Anything else needs an explicit reshape.
"""

import sys
import itertools
import logging
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional, Sequence, Union

import numpy as np

from neural_diversity.errors import ShapeError
from neural_diversity.utils import StrEnum

if sys.version < "3.11":
    from typing_extensions import Self
else:
    from typing import Self

logger = logging.getLogger(__name__)

_ids = itertools.count()
_state = threading.local()

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Precision(StrEnum):
    """Floating point precision of tensors."""

    SINGLE = "single"
    DOUBLE = "double"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32 if self == Precision.SINGLE else np.float64)


class Tensor:
    """Dense real array with an optional gradient.

    Args:
        data (ArrayLike): Values; integer input is converted to float64.
        requires_grad (bool, optional): Whether gradients flow to this tensor.
            Defaults to False.
        name (str | None, optional): Human readable name used in logs.
        dtype (np.dtype | None, optional): Target dtype. Defaults to the dtype
            of `data` when it is floating point.
    """

    __array_priority__ = 1000

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype: Optional[np.dtype] = None,
    ) -> None:
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.frozen = False
        self.id = next(_ids)

    @classmethod
    def from_flat(
        cls, shape: Sequence[int], values: Sequence[float], **kwargs: Any
    ) -> Self:
        """Build a tensor from a shape and a flat list of values.

        Raises:
            ShapeError: The product of the extents differs from the data length.
        """
        expected = int(np.prod(shape)) if len(shape) else 1
        if expected != len(values):
            raise ShapeError(
                f"shape {tuple(shape)} holds {expected} values, got {len(values)}"
            )
        return cls(np.asarray(values).reshape(tuple(shape)), **kwargs)

    @property
    def shape(self) -> tuple[int, ...]:
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
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Return a tensor sharing the values but cut from any graph."""
        return Tensor(self.data, requires_grad=False, name=self.name)

    def freeze(self) -> None:
        """Mark this tensor as frozen: no gradient, no update ever again."""
        self.requires_grad = False
        self.frozen = True
        self.grad = None

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f" '{self.name}'" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar, all routed through the recorded ops below
    def __add__(self, other: Any) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Any) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Any) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Any) -> "Tensor":
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other: Any) -> "Tensor":
        return self.__mul__(other)

    def __truediv__(self, other: Any) -> "Tensor":
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


@dataclass
class Node:
    """One recorded operation of a graph."""

    index: int
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Optional[BackwardFn]
    differentiable: bool = True

    @property
    def input_ids(self) -> tuple[int, ...]:
        return tuple(t.id for t in self.inputs)

    @property
    def output_id(self) -> int:
        return self.output.id


@dataclass(eq=False)
class Graph:
    """Tape of operations recorded while a builder function runs.

    Args:
        builder (Callable | None): Function mapping named input tensors to a
            dict of named output tensors (or a single tensor, named "output").
        input_names (Sequence[str] | None): Names the builder requires. When
            given, :meth:`eval` rejects missing or unexpected inputs.
        name (str): Label used in log messages.
    """

    builder: Optional[Callable[..., Any]] = None
    input_names: Optional[Sequence[str]] = None
    name: str = "graph"
    nodes: list[Node] = field(default_factory=list)
    nondifferentiable_hits: list[int] = field(default_factory=list)

    def __enter__(self) -> Self:
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        _state.stack.pop()

    @property
    def next_node_id(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes = []
        self.nondifferentiable_hits = []

    def record(
        self,
        op: str,
        inputs: Sequence[Tensor],
        output: Tensor,
        backward_fn: Optional[BackwardFn],
        differentiable: bool = True,
    ) -> Node:
        node = Node(
            self.next_node_id, op, tuple(inputs), output, backward_fn, differentiable
        )
        self.nodes.append(node)
        return node

    def eval(self, inputs: dict[str, Tensor]) -> dict[str, Tensor]:
        """Run the builder on `inputs`, recording a fresh tape.

        Args:
            inputs (dict[str, Tensor]): Named inputs of the builder.

        Raises:
            ValueError: No builder, or inputs missing / unexpected.
            ShapeError: An operation received incompatible shapes.

        Returns:
            dict[str, Tensor]: Named outputs of the builder.
        """
        if self.builder is None:
            raise ValueError(f"{self.name} has no builder to evaluate.")
        if self.input_names is not None:
            missing = set(self.input_names) - set(inputs)
            extra = set(inputs) - set(self.input_names)
            if missing or extra:
                raise ValueError(
                    f"{self.name}: missing inputs {sorted(missing)}, "
                    f"unexpected inputs {sorted(extra)}"
                )
        self.reset()
        with self:
            outputs = self.builder(**inputs)
        if isinstance(outputs, Tensor):
            outputs = {"output": outputs}
        return outputs

    def backward(
        self, loss: Tensor, params: Optional[Iterable[Tensor]] = None
    ) -> dict[int, np.ndarray]:
        """Propagate d(loss)/d(tensor) back through the tape.

        Gradients are written to the `.grad` attribute of every leaf tensor
        that requires gradients and appears on the tape, and of every tensor
        in `params`; parameters off the loss path receive exact zeros.

        Args:
            loss (Tensor): Scalar tensor recorded on this graph.
            params (Iterable[Tensor] | None, optional): Parameters that must
                receive a gradient even if unused. Defaults to None.

        Raises:
            ShapeError: The loss is not a scalar.

        Returns:
            dict[int, np.ndarray]: Gradient per leaf tensor id.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

        self.nondifferentiable_hits = []
        produced = {node.output_id for node in self.nodes}
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        if loss.id not in produced and loss.requires_grad:
            leaves[loss.id] = loss

        for node in reversed(self.nodes):
            g = grads.pop(node.output_id, None)
            if g is None:
                continue
            if not node.differentiable:
                self.nondifferentiable_hits.append(node.index)
                logger.warning(
                    "Gradient reached non-differentiable op '%s' (node %s).",
                    node.op,
                    node.index,
                )
                continue
            for inp, in_grad in zip(node.inputs, node.backward(g)):
                if in_grad is None or not inp.requires_grad:
                    continue
                if inp.id in grads:
                    grads[inp.id] = grads[inp.id] + in_grad
                else:
                    grads[inp.id] = in_grad
                if inp.id not in produced:
                    leaves[inp.id] = inp

        result = {}
        for leaf_id, leaf in leaves.items():
            leaf.grad = np.asarray(grads[leaf_id], dtype=leaf.dtype).reshape(leaf.shape)
            result[leaf_id] = leaf.grad
        for param in params or []:
            if param.id not in result:
                param.grad = np.zeros_like(param.data)
                result[param.id] = param.grad
        return result


def evaluate(graph: Graph, inputs: dict[str, Tensor]) -> dict[str, Tensor]:
    """Evaluate `graph` on named inputs (see :meth:`Graph.eval`)."""
    return graph.eval(inputs)


def backward(
    graph: Graph, loss: Tensor, params: Optional[Iterable[Tensor]] = None
) -> dict[int, np.ndarray]:
    """Back-propagate `loss` through `graph` (see :meth:`Graph.backward`)."""
    return graph.backward(loss, params)


def active_graph() -> Optional[Graph]:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


###############################
###### RECORDING HELPERS ######


def _node_id() -> Optional[int]:
    graph = active_graph()
    return graph.next_node_id if graph is not None else None


def _as_tensor(x: Any, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype if like is not None else None))


def _pair(a: Any, b: Any) -> tuple[Tensor, Tensor]:
    """Wrap raw operands as constants of the other operand's dtype."""
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    return _as_tensor(a, like), _as_tensor(b, like)


def _count(shape: tuple, axis: Any) -> int:
    """Number of entries folded into each output of a reduction."""
    if axis is None:
        return int(np.prod(shape)) if len(shape) else 1
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return int(np.prod([shape[ax] for ax in axes]))


def _emit(
    op: str,
    inputs: Sequence[Tensor],
    out_data: np.ndarray,
    backward_fn: Optional[BackwardFn],
    differentiable: bool = True,
) -> Tensor:
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    graph = active_graph()
    if graph is not None and out.requires_grad:
        graph.record(op, inputs, out, backward_fn, differentiable)
    return out


def _check_expandable(op: str, a: tuple, b: tuple) -> None:
    """Shapes must be equal or one a trailing suffix of the other."""
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short) :] != short:
        raise ShapeError(f"{op}: shapes {a} and {b} are not compatible", _node_id())


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the leading axes added by batch expansion."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    return grad


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


#########################
###### ELEMENTWISE ######


def add(a: Any, b: Any) -> Tensor:
    """Elementwise sum with leading-batch expansion."""
    a, b = _pair(a, b)
    _check_expandable("add", a.shape, b.shape)

    def _backward(g: np.ndarray) -> tuple:
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _emit("add", (a, b), a.data + b.data, _backward)


def sub(a: Any, b: Any) -> Tensor:
    """Elementwise difference with leading-batch expansion."""
    a, b = _pair(a, b)
    _check_expandable("sub", a.shape, b.shape)

    def _backward(g: np.ndarray) -> tuple:
        return _reduce_to(g, a.shape), -_reduce_to(g, b.shape)

    return _emit("sub", (a, b), a.data - b.data, _backward)


def mul(a: Any, b: Any) -> Tensor:
    """Elementwise product with leading-batch expansion."""
    a, b = _pair(a, b)
    _check_expandable("mul", a.shape, b.shape)

    def _backward(g: np.ndarray) -> tuple:
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _emit("mul", (a, b), a.data * b.data, _backward)


def div(a: Any, b: Any) -> Tensor:
    """Elementwise quotient with leading-batch expansion."""
    a, b = _pair(a, b)
    _check_expandable("div", a.shape, b.shape)
    out = a.data / b.data

    def _backward(g: np.ndarray) -> tuple:
        return _reduce_to(g / b.data, a.shape), _reduce_to(-g * out / b.data, b.shape)

    return _emit("div", (a, b), out, _backward)


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a constant scalar."""

    def _backward(g: np.ndarray) -> tuple:
        return (g * factor,)

    return _emit("scale", (x,), x.data * np.asarray(factor, dtype=x.dtype), _backward)


def add_scalar(x: Tensor, value: float) -> Tensor:
    def _backward(g: np.ndarray) -> tuple:
        return (g,)

    return _emit("add_scalar", (x,), x.data + np.asarray(value, dtype=x.dtype), _backward)


def square(x: Tensor) -> Tensor:
    def _backward(g: np.ndarray) -> tuple:
        return (2.0 * g * x.data,)

    return _emit("square", (x,), x.data * x.data, _backward)


def power(x: Tensor, exponent: float) -> Tensor:
    """Raise to a constant power (positive inputs for fractional exponents)."""
    out = np.power(x.data, exponent)

    def _backward(g: np.ndarray) -> tuple:
        return (g * exponent * np.power(x.data, exponent - 1.0),)

    return _emit("power", (x,), out, _backward)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def _backward(g: np.ndarray) -> tuple:
        return (0.5 * g / out,)

    return _emit("sqrt", (x,), out, _backward)


def log(x: Tensor) -> Tensor:
    def _backward(g: np.ndarray) -> tuple:
        return (g / x.data,)

    return _emit("log", (x,), np.log(x.data), _backward)


def clip_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); the gradient is zero where the floor is active."""
    active = x.data < floor

    def _backward(g: np.ndarray) -> tuple:
        return (np.where(active, 0.0, g),)

    return _emit("clip_min", (x,), np.where(active, np.asarray(floor, dtype=x.dtype), x.data), _backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def _backward(g: np.ndarray) -> tuple:
        return (g * out,)

    return _emit("exp", (x,), out, _backward)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def _backward(g: np.ndarray) -> tuple:
        return (g * (1.0 - out * out),)

    return _emit("tanh", (x,), out, _backward)


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def _backward(g: np.ndarray) -> tuple:
        return (g * out * (1.0 - out),)

    return _emit("sigmoid", (x,), out, _backward)


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x), the gate non-linearity of the backbone MLP."""
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def _backward(g: np.ndarray) -> tuple:
        return (g * (sig + x.data * sig * (1.0 - sig)),)

    return _emit("silu", (x,), x.data * sig, _backward)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity when `rate` is 0 or no generator is given."""
    if rate <= 0.0 or rng is None:
        return x
    if rate >= 1.0:
        raise ValueError(f"dropout rate must be < 1, got {rate}")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return mul(x, Tensor(keep))


######################
###### SHAPES ######


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not compatible", _node_id())
    _check_expandable("matmul", a.shape[:-2], b.shape[:-2])

    def _backward(g: np.ndarray) -> tuple:
        ga = _reduce_to(g @ _swap_last(b.data), a.shape) if a.requires_grad else None
        gb = _reduce_to(_swap_last(a.data) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("matmul", (a, b), a.data @ b.data, _backward)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; by default swap the last two."""
    if axes is None:
        if x.ndim < 2:
            raise ShapeError(f"transpose needs at least 2 axes, got {x.shape}", _node_id())
        axes = list(range(x.ndim - 2)) + [x.ndim - 1, x.ndim - 2]
    axes = list(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {x.ndim} axes", _node_id())
    inverse = np.argsort(axes)

    def _backward(g: np.ndarray) -> tuple:
        return (np.transpose(g, inverse),)

    return _emit("transpose", (x,), np.transpose(x.data, axes), _backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}", _node_id()) from e

    def _backward(g: np.ndarray) -> tuple:
        return (g.reshape(x.shape),)

    return _emit("reshape", (x,), out, _backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along `axis`; all other extents must agree."""
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}", _node_id())
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def _backward(g: np.ndarray) -> tuple:
        return tuple(np.split(g, bounds, axis=ax))

    return _emit("concat", tensors, np.concatenate([t.data for t in tensors], axis=ax), _backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: Optional[int] = None) -> Tensor:
    """Contiguous slice ``[start:stop]`` along one axis."""
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def _backward(g: np.ndarray) -> tuple:
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _emit("slice", (x,), x.data[index], _backward)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of `weight` for integer `ids` of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(
            f"embedding: ids must lie in [0, {weight.shape[0]}), got [{ids.min()}, {ids.max()}]",
            _node_id(),
        )

    def _backward(g: np.ndarray) -> tuple:
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (full,)

    return _emit("embedding", (weight,), weight.data[ids], _backward)


#########################
###### REDUCTIONS ######


def _expand_back(g: np.ndarray, shape: tuple, axis: Any, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(x: Tensor, axis: Any = None, keepdims: bool = False) -> Tensor:  # pylint: disable=redefined-builtin
    def _backward(g: np.ndarray) -> tuple:
        return (np.array(_expand_back(g, x.shape, axis, keepdims)),)

    return _emit("sum", (x,), np.sum(x.data, axis=axis, keepdims=keepdims), _backward)


def mean(x: Tensor, axis: Any = None, keepdims: bool = False) -> Tensor:
    count = _count(x.shape, axis)

    def _backward(g: np.ndarray) -> tuple:
        return (np.array(_expand_back(g, x.shape, axis, keepdims)) / count,)

    return _emit("mean", (x,), np.mean(x.data, axis=axis, keepdims=keepdims), _backward)


def var(x: Tensor, axis: Any = None, keepdims: bool = False, ddof: int = 0) -> Tensor:
    """Variance (population by default)."""
    centered = x.data - np.mean(x.data, axis=axis, keepdims=True)
    count = _count(x.shape, axis)

    def _backward(g: np.ndarray) -> tuple:
        return (_expand_back(g, x.shape, axis, keepdims) * 2.0 * centered / (count - ddof),)

    out = np.sum(centered * centered, axis=axis, keepdims=keepdims) / (count - ddof)
    return _emit("var", (x,), out, _backward)


def frobenius_norm(x: Tensor) -> Tensor:
    """sqrt of the sum of squares over all entries."""
    norm = np.sqrt(np.sum(x.data * x.data))

    def _backward(g: np.ndarray) -> tuple:
        if norm == 0.0:
            return (np.zeros_like(x.data),)
        return (g * x.data / norm,)

    return _emit("frobenius_norm", (x,), norm, _backward)


def frobenius_sq(x: Tensor) -> Tensor:
    """Sum of squares over all entries."""

    def _backward(g: np.ndarray) -> tuple:
        return (2.0 * g * x.data,)

    return _emit("frobenius_sq", (x,), np.sum(x.data * x.data), _backward)


###########################
###### NEURAL BLOCKS ######


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=-1, keepdims=True)

    def _backward(g: np.ndarray) -> tuple:
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return _emit("softmax", (x,), out, _backward)


def log_softmax(x: Tensor) -> Tensor:
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))

    def _backward(g: np.ndarray) -> tuple:
        return (g - np.exp(out) * np.sum(g, axis=-1, keepdims=True),)

    return _emit("log_softmax", (x,), out, _backward)


def rms_norm(x: Tensor, weight: Optional[Tensor] = None, eps: float = 1e-6) -> Tensor:
    """Scale the last axis to unit root-mean-square, then by `weight`."""
    if weight is not None and weight.shape != x.shape[-1:]:
        raise ShapeError(f"rms_norm: weight {weight.shape} does not match {x.shape}", _node_id())
    inv = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    normed = x.data * inv
    w = weight.data if weight is not None else 1.0

    def _backward(g: np.ndarray) -> tuple:
        gn = g * w
        gx = inv * (gn - normed * np.mean(gn * normed, axis=-1, keepdims=True))
        gw = _reduce_to(g * normed, weight.shape) if weight is not None else None
        return (gx, gw) if weight is not None else (gx,)

    inputs = (x, weight) if weight is not None else (x,)
    return _emit("rms_norm", inputs, normed * w, _backward)


def cross_entropy(logits: Tensor, targets: np.ndarray, reduction: str = "mean") -> Tensor:
    """Cross-entropy of integer `targets` against `logits` (..., V).

    Args:
        logits (Tensor): Unnormalized scores, last axis over classes.
        targets (np.ndarray): Integer class per leading position.
        reduction (str, optional): "mean", "sum" or "none". Defaults to "mean".

    Returns:
        Tensor: Scalar, or per-position losses when `reduction="none"`.
    """
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(
            f"cross_entropy: logits {logits.shape} vs targets {targets.shape}", _node_id()
        )
    shifted = logits.data - np.max(logits.data, axis=-1, keepdims=True)
    logz = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    logp = shifted - logz
    picked = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    n = picked.size

    if reduction == "none":
        out = picked
    elif reduction == "sum":
        out = np.sum(picked)
    elif reduction == "mean":
        out = np.sum(picked) / n
    else:
        raise ValueError(f"Unknown reduction '{reduction}'")

    def _backward(g: np.ndarray) -> tuple:
        probs = np.exp(logp)
        np.put_along_axis(
            probs, targets[..., None],
            np.take_along_axis(probs, targets[..., None], axis=-1) - 1.0, axis=-1,
        )
        if reduction == "none":
            return (probs * g[..., None],)
        factor = g / n if reduction == "mean" else g
        return (probs * factor,)

    return _emit("cross_entropy", (logits,), np.asarray(out, dtype=logits.dtype), _backward)


def argmax(x: Tensor, axis: int = -1) -> Tensor:
    """Index of the maximum along `axis`, as floats. Not differentiable."""
    out = np.argmax(x.data, axis=axis).astype(x.dtype)
    return _emit("argmax", (x,), out, None, differentiable=False)
