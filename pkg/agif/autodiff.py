"""
A small dense-tensor engine with reverse-mode differentiation.

Tensors wrap numpy arrays. Operations executed inside a ``Tape`` context are
recorded when any input requires a gradient; ``backward`` replays the record
in reverse. Outside of a tape nothing is recorded, which is how evaluation
runs.

    with Tape():
        loss = autodiff.sum(autodiff.linear(x, W, b))
    autodiff.backward(loss)
    W.grad  # numpy array, same shape as W
"""
import contextlib
import contextvars
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from einops import parse_shape
from einops import rearrange as _rearrange

from .util import GradientCheckError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]
Index = Union[int, slice, Tuple]

# Denominator floor of the relative gradient error.
GRADIENT_FLOOR = 1e-8

_default_dtype: contextvars.ContextVar = contextvars.ContextVar(
    "agif_default_dtype", default=np.dtype(np.float32)
)
_active_tape: contextvars.ContextVar = contextvars.ContextVar("agif_active_tape", default=None)


def default_dtype() -> np.dtype:
    return _default_dtype.get()


@contextlib.contextmanager
def precision(dtype: Union[str, np.dtype, type]) -> Iterator[np.dtype]:
    """
    Set the float precision of tensors created from python values.  float32 is
    the training default, float64 is what gradient checks run at.
    """
    dt = np.dtype(dtype)
    if dt.kind != "f":
        raise ValueError(f"Expected a floating point dtype, got {dt}")
    token = _default_dtype.set(dt)
    try:
        yield dt
    finally:
        _default_dtype.reset(token)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "is_leaf", "_tape")
    # ndarray (op) Tensor defers to the reflected Tensor operators.
    __array_ufunc__ = None

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype: Optional[Union[str, np.dtype, type]] = None,
        name: Optional[str] = None,
    ):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = _default_dtype.get()
        self.data: np.ndarray = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.is_leaf = True
        self._tape: Optional["Tape"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
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

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"Expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype: Union[str, np.dtype, type]) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        extra = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{extra})"

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __radd__(self, other) -> "Tensor":
        return add(other, self)

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other) -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: Index) -> "Tensor":
        return getitem(self, index)


@dataclass
class TapeRecord:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """
    Ordered record of the primitive operations executed while it is active.
    A tape belongs to one execution context; ``contextvars`` keeps concurrent
    contexts apart.
    """

    def __init__(self):
        self.records: List[TapeRecord] = []
        self._tokens: List[contextvars.Token] = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_active_tape.set(self))
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _active_tape.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.records)

    @staticmethod
    def current() -> Optional["Tape"]:
        return _active_tape.get()

    def backward(self, loss: Tensor) -> None:
        """
        Populate ``grad`` on every leaf tensor that requires a gradient and is
        reachable from ``loss``.  Reached gradients are overwritten, so
        replaying the same tape twice yields identical results; leaves that
        are not reached keep whatever they had.
        """
        if loss.size != 1:
            raise ShapeError(f"backward() expects a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("The loss was not recorded on this tape")

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        owners: Dict[int, Tensor] = {id(loss): loss}
        for record in reversed(self.records):
            g = grads.pop(id(record.output), None)
            if g is None:
                continue
            for tensor, tensor_grad in zip(record.inputs, record.backward(g)):
                if tensor_grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + tensor_grad
                else:
                    grads[key] = tensor_grad
                    owners[key] = tensor

        for key, g in grads.items():
            tensor = owners[key]
            if tensor.is_leaf:
                tensor.grad = np.array(g, dtype=tensor.dtype, copy=True).reshape(tensor.shape)


def backward(loss: Tensor) -> None:
    if loss.size != 1:
        raise ShapeError(f"backward() expects a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ValueError("The loss was not recorded on a tape; run the forward pass inside `with Tape():`")
    loss._tape.backward(loss)


def _record(
    op: str,
    inputs: Sequence[Tensor],
    data: np.ndarray,
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    tape: Optional[Tape] = _active_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        out._tape = tape
        tape.records.append(TapeRecord(op, tuple(inputs), out, backward_fn))
    return out


def _as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# Elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _record(
        "add", (a, b), a.data + b.data, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _record(
        "sub", (a, b), a.data - b.data, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _record(
        "mul",
        (a, b),
        a.data * b.data,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _record(
        "div",
        (a, b),
        a.data / b.data,
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def _pair(a, b) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, like=a)
    b = _as_tensor(b)
    return _as_tensor(a, like=b), b


def where(condition: np.ndarray, a, b) -> Tensor:
    """Select from ``a`` where ``condition`` holds and from ``b`` elsewhere."""
    a, b = _pair(a, b)
    cond = np.asarray(condition, dtype=bool)
    zero = np.zeros((), dtype=a.dtype)
    return _record(
        "where",
        (a, b),
        np.where(cond, a.data, b.data),
        lambda g: (
            _unbroadcast(np.where(cond, g, zero), a.shape),
            _unbroadcast(np.where(cond, zero, g), b.shape),
        ),
    )


def clip(x: Tensor, low: float, high: float) -> Tensor:
    inside = (x.data >= low) & (x.data <= high)
    return _record("clip", (x,), np.clip(x.data, low, high), lambda g: (g * inside,))


# Elementwise functions


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record("exp", (x,), out, lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _record("log", (x,), np.log(x.data), lambda g: (g / x.data,))


def sigmoid(x: Tensor) -> Tensor:
    out = np.exp(-np.logaddexp(0, -x.data)).astype(x.dtype, copy=False)
    return _record("sigmoid", (x,), out, lambda g: (g * out * (1 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _record("tanh", (x,), out, lambda g: (g * (1 - out * out),))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    positive = x.data > 0
    scale = np.where(positive, 1.0, slope).astype(x.dtype, copy=False)
    return _record("leaky_relu", (x,), x.data * scale, lambda g: (g * scale,))


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    positive = x.data > 0
    neg_part = alpha * np.expm1(np.minimum(x.data, 0))
    out = np.where(positive, x.data, neg_part).astype(x.dtype, copy=False)
    local = np.where(positive, 1.0, neg_part + alpha).astype(x.dtype, copy=False)
    return _record("elu", (x,), out, lambda g: (g * local,))


# Reductions and linear algebra


def sum(x: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    # pylint: disable=redefined-builtin
    shape = x.shape

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record("sum", (x,), np.sum(x.data, axis=axis, keepdims=keepdims), _backward)


def mean(x: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul expects operands with ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    return _record(
        "matmul",
        (a, b),
        np.matmul(a.data, b.data),
        lambda g: (
            _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape),
            _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape),
        ),
    )


def linear(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """y = x W^T + b over the last axis of x."""
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[-1:]} does not match weight {W.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise ShapeError(f"linear: bias shape {b.shape} does not match weight {W.shape}")
    out = x.data @ W.data.T
    if b is not None:
        out = out + b.data
    out_dim, in_dim = W.shape

    def _backward(g):
        g2 = g.reshape(-1, out_dim)
        grads = [g @ W.data, g2.T @ x.data.reshape(-1, in_dim)]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    inputs = (x, W) if b is None else (x, W, b)
    return _record("linear", inputs, out, _backward)


def masked_softmax(scores: Tensor, mask: Optional[np.ndarray] = None, axis: int = -1) -> Tensor:
    """
    Softmax along ``axis`` restricted to positions where ``mask`` is true.
    Masked positions come out as exactly 0.
    """
    if mask is None:
        mask = np.ones(scores.shape, dtype=bool)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
    if not np.all(mask.any(axis=axis)):
        raise ValueError("masked_softmax: a row has no valid position")

    shifted = np.where(mask, scores.data, -np.inf)
    shifted = shifted - shifted.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0).astype(scores.dtype, copy=False)
    out = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record("masked_softmax", (scores,), out, _backward)


def softmax(scores: Tensor, axis: int = -1) -> Tensor:
    return masked_softmax(scores, None, axis=axis)


# Shape manipulation


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    original = x.shape
    return _record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(original),))


def swapaxes(x: Tensor, axis1: int, axis2: int) -> Tensor:
    return _record(
        "swapaxes", (x,), np.swapaxes(x.data, axis1, axis2), lambda g: (np.swapaxes(g, axis1, axis2),)
    )


def rearrange(x: Tensor, pattern: str, **axes_lengths: int) -> Tensor:
    """
    einops rearrangement.  The left-hand side of ``pattern`` must not group
    axes, so the inverse pattern can recover every length from ``x``.
    """
    lhs, rhs = (side.strip() for side in pattern.split("->"))
    lengths = parse_shape(x.data, lhs)
    inverse = f"{rhs} -> {lhs}"
    return _record(
        "rearrange",
        (x,),
        _rearrange(x.data, pattern, **axes_lengths),
        lambda g: (_rearrange(g, inverse, **lengths),),
    )


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _record(
        "concat",
        tuple(tensors),
        np.concatenate([t.data for t in tensors], axis=axis),
        lambda g: np.split(g, splits, axis=axis),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    count = len(tensors)

    def _backward(g):
        moved = np.moveaxis(g, axis, 0)
        return [moved[i] for i in range(count)]

    return _record("stack", tuple(tensors), np.stack([t.data for t in tensors], axis=axis), _backward)


def getitem(x: Tensor, index: Index) -> Tensor:
    shape = x.shape

    def _backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _record("getitem", (x,), x.data[index], _backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids outside [0, {table.shape[0]})")

    def _backward(g):
        full = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(full, ids, g)
        return (full,)

    return _record("embedding", (table,), table.data[ids], _backward)


def gather(x: Tensor, index: np.ndarray, axis: int = -1) -> Tensor:
    """Pick one entry per row along ``axis``; ``index`` has x's shape without that axis."""
    index = np.expand_dims(np.asarray(index, dtype=np.int64), axis)
    shape = x.shape

    def _backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, index, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _record("gather", (x,), np.take_along_axis(x.data, index, axis=axis).squeeze(axis), _backward)


# Regularization and initialization


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """
    Inverted dropout: survivors are scaled by 1/(1-rate) at train time, so eval
    mode returns ``x`` itself.
    """
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return _record("dropout", (x,), x.data * keep, lambda g: (g * keep,))


def xavier_init(
    rows: int,
    cols: int,
    rng: np.random.Generator,
    dtype: Optional[Union[str, np.dtype, type]] = None,
    name: Optional[str] = None,
) -> Tensor:
    if rows < 1 or cols < 1:
        raise ValueError(f"xavier_init needs positive dimensions, got ({rows}, {cols})")
    bound = math.sqrt(6.0 / (rows + cols))
    values = rng.uniform(-bound, bound, size=(rows, cols))
    return Tensor(values, requires_grad=True, dtype=dtype or _default_dtype.get(), name=name)


def zeros(shape: Tuple[int, ...], requires_grad: bool = False, dtype=None, name: Optional[str] = None) -> Tensor:
    return Tensor(
        np.zeros(shape, dtype=dtype or _default_dtype.get()), requires_grad=requires_grad, name=name
    )


# Optimization


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Tensor], grads: Mapping[str, Optional[np.ndarray]], state: AdamState
) -> Mapping[str, Tensor]:
    """
    One bias-corrected Adam update, in place.  Parameters whose gradient is
    None are left alone, but their moments still see the step counter.
    """
    if state.t < 0:
        raise ValueError(f"Adam step counter must be non-negative, got {state.t}")
    for name, g in grads.items():
        if g is not None and g.shape != params[name].shape:
            raise ShapeError(f"adam_step: gradient for {name} has shape {g.shape}, expected {params[name].shape}")

    state.t += 1
    correction1 = 1 - state.beta1 ** state.t
    correction2 = 1 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * (g * g)
        state.m[name] = m.astype(p.dtype, copy=False)
        state.v[name] = v.astype(p.dtype, copy=False)
        update = state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        p.data = p.data - update.astype(p.dtype, copy=False)
    return params


def global_grad_norm(grads: Mapping[str, Optional[np.ndarray]]) -> float:
    total = 0.0
    for g in grads.values():
        if g is not None:
            total += float(np.sum(np.square(g, dtype=np.float64)))
    return math.sqrt(total)


# Gradient checking


def _scalar(value: Tensor) -> float:
    if value.size != 1:
        raise ShapeError(f"finite_diff_check needs a scalar function, got shape {value.shape}")
    return float(value.data.reshape(()))


def finite_diff_report(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-4,
    samples: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> Dict[str, float]:
    """
    Compare reverse-mode gradients of ``f`` against central differences.
    Returns the worst relative error per parameter.  ``samples`` bounds the
    number of coordinates checked per parameter (all of them when None).
    """
    if h <= 0:
        raise ValueError(f"finite difference step must be positive, got {h}")
    for p in params.values():
        if p.dtype != np.float64:
            logger.warning("Gradient check on %s tensor %s; use precision('float64')", p.dtype, p.name)
            break
    rng = rng if rng is not None else np.random.default_rng(0)

    base = _scalar(f())
    if _scalar(f()) != base:
        raise GradientCheckError("The checked function is not deterministic (disable dropout, fix the rng)")

    for p in params.values():
        p.grad = None
    with Tape():
        loss = f()
    backward(loss)

    report: Dict[str, float] = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        coords = np.arange(p.size)
        if samples is not None and samples < p.size:
            coords = np.sort(rng.choice(p.size, size=samples, replace=False))
        worst = 0.0
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        for c in coords:
            original = flat[c]
            flat[c] = original + h
            plus = _scalar(f())
            flat[c] = original - h
            minus = _scalar(f())
            flat[c] = original
            numeric = (plus - minus) / (2 * h)
            a = float(analytic.reshape(-1)[c])
            err = abs(a - numeric) / max(abs(a), abs(numeric), GRADIENT_FLOOR)
            worst = max(worst, err)
        report[name] = worst
    return report


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-4,
    samples: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Max relative error between analytic and central-difference gradients."""
    report = finite_diff_report(f, params, h=h, samples=samples, rng=rng)
    return max(report.values(), default=0.0)
