"""Dense tensors with reverse-mode automatic differentiation.

Every model quantity (tokens, projections, attention weights, logits, losses) is a
:class:`Tensor`. Operations record a backward rule when any input requires a
gradient; :meth:`Tensor.backward` walks the recorded graph once in reverse
topological order and accumulates gradients into leaf tensors.
"""

import contextlib
import logging
import math
import threading
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy.special import erf

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], tuple[np.ndarray | None, ...]]

_default_dtype: type[np.floating] = np.float64
_grad_mode = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes or axes are incompatible."""


class NonFiniteError(ArithmeticError):
    """Raised when an operation that requires finite input receives NaN or infinity."""


def set_precision(bits: int) -> None:
    """Select the floating point precision for newly created tensors.

    Parameters:
    -----------
        bits: int
            64 (default, required for gradient checks) or 32.

    Raises:
    -------
        ValueError:
            When bits is not 32 or 64.
    """
    global _default_dtype
    match bits:
        case 64:
            _default_dtype = np.float64
        case 32:
            _default_dtype = np.float32
        case _:
            raise ValueError(f"precision must be 32 or 64, got {bits}")


def get_dtype() -> type[np.floating]:
    """Return the dtype used for newly created tensors."""
    return _default_dtype


def grad_enabled() -> bool:
    """True when operations on the calling thread record a backward graph."""
    return getattr(_grad_mode, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block, for the calling thread only."""
    prev = grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = prev


@dataclass(frozen=True)
class RngState:
    """Seed plus a named deterministic generator.

    The generator is numpy's PCG64 seeded through a SeedSequence. Child streams are
    derived from integer keys, so the same seed and keys always yield the same values.
    """

    seed: int
    algorithm: str = "PCG64"

    def generator(self, *keys: int) -> np.random.Generator:
        """Create a generator for the stream named by keys."""
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=tuple(int(k) for k in keys))
        return np.random.Generator(np.random.PCG64(seq))


class Tensor:
    """N-dimensional real array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: BackwardFn | None = None,
        _op: str = "",
    ) -> None:
        array = np.asarray(data)
        if array.dtype != _default_dtype:
            array = array.astype(_default_dtype)
        self.data: np.ndarray = array
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    def __repr__(self) -> str:
        desc = f"Tensor(shape={self.shape}"
        if self._op:
            desc += f", op={self._op}"
        if self.requires_grad:
            desc += ", requires_grad=True"
        return desc + ")"

    @property
    def shape(self) -> tuple[int, ...]:
        """Shape of the underlying array."""
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        """Number of dimensions."""
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        """Return the underlying array (not a copy)."""
        return self.data

    def item(self) -> float:
        """Return the value of a single-element tensor.

        Raises:
        -------
            ValueError:
                When the tensor holds more or fewer than one element.
        """
        if self.data.size != 1:
            raise ValueError(f"item: can only convert a tensor of size 1, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Return a tensor sharing data but cut from the graph."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        """Drop the accumulated gradient."""
        self.grad = None

    def backward(self) -> None:
        """Populate ``grad`` on every tracked leaf reachable from this scalar.

        Gradients accumulate additively, both across repeated uses of a tensor in one
        graph and across repeated calls. The graph is released afterwards.

        Raises:
        -------
            ShapeError:
                When called on a tensor with more than one element.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar, got shape {self.shape}")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g), strict=True):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None

    # operator sugar
    def __add__(self, other: "Tensor | float") -> "Tensor":
        return add(self, _lift(other))

    def __radd__(self, other: float) -> "Tensor":
        return add(_lift(other), self)

    def __sub__(self, other: "Tensor | float") -> "Tensor":
        return sub(self, _lift(other))

    def __rsub__(self, other: float) -> "Tensor":
        return sub(_lift(other), self)

    def __mul__(self, other: "Tensor | float") -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other: float) -> "Tensor":
        return scale(self, float(other))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        return index_select(self, index)


def _lift(value: "Tensor | float") -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn, op: str) -> Tensor:
    track = grad_enabled() and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data, _op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, _op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_axis(x: Tensor, axis: int, op: str) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as ex:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from ex


# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    _broadcast_shape(a, b, "add")

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise difference with numpy broadcasting."""
    _broadcast_shape(a, b, "sub")

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    _broadcast_shape(a, b, "mul")

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a constant."""

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * factor,)

    return _make(x.data * factor, (x,), backward, "scale")


def exp(x: Tensor) -> Tensor:
    """Elementwise exponential."""
    out = np.exp(x.data)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * out,)

    return _make(out, (x,), backward, "exp")


def log(x: Tensor) -> Tensor:
    """Elementwise natural logarithm."""

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g / x.data,)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make(out, (x,), backward, "log")


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return cdf + x * pdf


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    out = 0.5 * x.data * (1.0 + erf(x.data / math.sqrt(2.0)))

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * _gelu_grad(x.data),)

    return _make(out, (x,), backward, "gelu")


# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batch axes broadcast by prefix.

    Raises:
    -------
        ShapeError:
            When either operand has fewer than two axes, the inner dimensions differ,
            or the batch axes do not broadcast.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as ex:
        raise ShapeError(f"matmul: batch axes of {a.shape} and {b.shape} do not broadcast") from ex

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Reshape without changing element order."""
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as ex:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from ex

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g.reshape(x.shape),)

    return _make(out, (x,), backward, "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; reverses them when axes is None."""
    perm = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(a % x.ndim for a in perm) != list(range(x.ndim)) or len(perm) != x.ndim:
        raise ShapeError(f"transpose: {perm} is not a permutation of the axes of {x.shape}")
    inverse = tuple(np.argsort([a % x.ndim for a in perm]))

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.transpose(g, inverse),)

    return _make(np.transpose(x.data, perm), (x,), backward, "transpose")


def swapaxes(x: Tensor, axis1: int, axis2: int) -> Tensor:
    """Exchange two axes."""
    perm = list(range(x.ndim))
    a1, a2 = _check_axis(x, axis1, "swapaxes"), _check_axis(x, axis2, "swapaxes")
    perm[a1], perm[a2] = perm[a2], perm[a1]
    return transpose(x, perm)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Expand size-one and missing leading axes."""
    try:
        out = np.broadcast_to(x.data, tuple(shape))
    except ValueError as ex:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {tuple(shape)}") from ex

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (_unbroadcast(g, x.shape),)

    return _make(np.array(out), (x,), backward, "broadcast_to")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join tensors along an existing axis."""
    if not xs:
        raise ShapeError("concat: no tensors given")
    axis = _check_axis(xs[0], axis, "concat")
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as ex:
        raise ShapeError(f"concat: shapes {[x.shape for x in xs]} differ off axis {axis}") from ex
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g: np.ndarray) -> tuple[np.ndarray, ...]:
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(xs), backward, "concat")


def _is_basic_index(index: Any) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int)) for p in parts)


def index_select(x: Tensor, index: Any) -> Tensor:
    """Numpy indexing (slices or integer arrays); repeated indices accumulate."""
    try:
        out = x.data[index]
    except IndexError as ex:
        raise ShapeError(f"index: {index!r} is invalid for shape {x.shape}") from ex

    basic = _is_basic_index(index)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        gx = np.zeros_like(x.data)
        if basic:
            gx[index] += g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _make(np.array(out), (x,), backward, "index")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Look up rows of a [V, D] table."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table {table.shape}")
    return index_select(table, ids)


def sum(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    """Sum over axes (all when None)."""
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    """Arithmetic mean over axes (all when None)."""
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# normalization and probabilities


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax along an axis.

    Parameters:
    -----------
        x: Tensor
            Finite scores.
        axis: int
            Axis to normalize over.
        mask: np.ndarray | None
            Boolean array broadcastable to x; False entries get exactly zero weight.
            Every slice along axis must keep at least one True entry.

    Raises:
    -------
        NonFiniteError:
            When x holds NaN or infinity.
    """
    axis = _check_axis(x, axis, "softmax")
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError(f"softmax: non-finite input of shape {x.shape}")
    scores = x.data if mask is None else np.where(mask, x.data, -np.inf)
    shifted = scores - scores.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Log of softmax, computed without forming the probabilities first."""
    axis = _check_axis(x, axis, "log_softmax")
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError(f"log_softmax: non-finite input of shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each vector over the last axis, then apply gain and bias."""
    dim = x.shape[-1]
    if gain.shape != (dim,) or bias.shape != (dim,):
        raise ShapeError(f"layernorm: gain {gain.shape} / bias {bias.shape} do not match last axis of {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        gxhat = g * gain.data
        gx = inv_std * (
            gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        flat = (-1, dim)
        return gx, (g * xhat).reshape(flat).sum(axis=0), g.reshape(flat).sum(axis=0)

    return _make(xhat * gain.data + bias.data, (x, gain, bias), backward, "layernorm")


def global_norm(tensors: Sequence[Tensor]) -> float:
    """L2 norm over the gradients of several tensors (missing gradients count as zero)."""
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float(np.sum(t.grad * t.grad))
    return math.sqrt(total)
