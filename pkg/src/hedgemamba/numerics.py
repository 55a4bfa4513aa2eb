"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every primitive computes its forward value with numpy and, when gradient
recording is active and an input requires a gradient, appends an adjoint
rule to the thread-local :class:`Tape`. :func:`backward` replays the tape
once in reverse order.

Each primitive also reports its cost in scalar multiply-adds to an optional
counter (see :func:`count_multadds`), which the complexity benchmark uses.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy import special


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class ShapeError(ValueError):
    """Raised on incompatible operand shapes."""


class TapeError(RuntimeError):
    """Raised on misuse of the gradient tape."""


_local = threading.local()


def _get(name, default):
    if not hasattr(_local, name):
        setattr(_local, name, default() if callable(default) else default)
    return getattr(_local, name)


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self.ops: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __len__(self):
        return len(self.ops)


def current_tape() -> Tape:
    tape = _get("tape", None)
    if tape is None or tape.consumed:
        tape = Tape()
        _local.tape = tape
    return tape


def reset_tape() -> None:
    """Drop the current thread's tape and everything recorded on it."""
    tape = _get("tape", None)
    if tape is not None:
        tape.ops.clear()
        tape.consumed = True
    _local.tape = None


def grad_enabled() -> bool:
    return _get("grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class MultAddCounter:
    def __init__(self):
        self.total = 0

    def add(self, n) -> None:
        self.total += int(n)


@contextlib.contextmanager
def count_multadds() -> Iterator[MultAddCounter]:
    """Count scalar multiply-adds issued by primitives inside the block."""
    counter = MultAddCounter()
    prev = _get("counter", None)
    _local.counter = counter
    try:
        yield counter
    finally:
        _local.counter = prev


def _count(n) -> None:
    counter = _get("counter", None)
    if counter is not None:
        counter.add(n)


class Tensor:
    """A float64 array that can take part in gradient recording."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._tape: Tape | None = None

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
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(data: np.ndarray, parents: Sequence[Tensor], adjoint: Callable, op: str = "op") -> Tensor:
    """Wrap a forward value and register its adjoint rule.

    ``adjoint(g)`` receives the upstream gradient and returns one gradient
    array (or None) per parent, in order.
    """
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = False
    out._tape = None
    if grad_enabled() and any(p.requires_grad for p in parents):
        tape = current_tape()
        for p in parents:
            if p._tape is not None and p._tape is not tape:
                raise TapeError(f"{op}: input was recorded on a tape that has already been consumed")
        out.requires_grad = True
        out._tape = tape
        tape.ops.append((out, tuple(parents), adjoint))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf that requires a gradient."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss was not produced under an active tape")
    if tape.consumed:
        raise TapeError("backward already ran on this tape; run a fresh forward pass")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, parents, adjoint in reversed(tape.ops):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for parent, pg in zip(parents, adjoint(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(f"adjoint shape {pg.shape} != input shape {parent.shape}")
            if parent._tape is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
    tape.ops.clear()
    tape.consumed = True


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    out = a.data + b.data
    _count(out.size)
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    out = a.data - b.data
    _count(out.size)
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    out = a.data * b.data
    _count(out.size)

    def adjoint(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record(out, (a, b), adjoint, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    _count(out.size)

    def adjoint(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record(out, (a, b), adjoint, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record(-a.data, (a,), lambda g: (-g,), "neg")


def maximum(a, floor: float) -> Tensor:
    """Clamp from below by a constant; no gradient flows where clamped."""
    a = as_tensor(a)
    keep = a.data >= floor
    out = np.where(keep, a.data, floor)
    _count(out.size)
    return record(out, (a,), lambda g: (g * keep,), "maximum")


# ---------------------------------------------------------------------------
# elementwise unary


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    _count(out.size)
    return record(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    _count(out.size)
    return record(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    _count(out.size)
    return record(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def square(a) -> Tensor:
    a = as_tensor(a)
    out = a.data * a.data
    _count(out.size)
    return record(out, (a,), lambda g: (2.0 * g * a.data,), "square")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = special.expit(a.data)
    _count(out.size)
    return record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    _count(out.size)
    return record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = special.expit(a.data)
    out = a.data * s
    _count(out.size)
    return record(out, (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),), "silu")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    _count(out.size)
    return record(out, (a,), lambda g: (g * special.expit(a.data),), "softplus")


_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = as_tensor(a)
    cdf = 0.5 * (1.0 + special.erf(a.data * _SQRT_HALF))
    out = a.data * cdf

    def adjoint(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
        return (g * (cdf + a.data * pdf),)

    _count(out.size)
    return record(out, (a,), adjoint, "gelu")


# ---------------------------------------------------------------------------
# reductions and normalizers


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = np.asarray(a.data.sum(axis=axes, keepdims=keepdims))
    _count(a.size)

    def adjoint(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record(out, (a,), adjoint, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axis, keepdims) * (1.0 / n)


def softmax(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax; entries where ``mask`` is False get weight 0."""
    a = as_tensor(a)
    x = a.data if mask is None else np.where(mask, a.data, -np.inf)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    _count(3 * out.size)

    def adjoint(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record(out, (a,), adjoint, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    _count(3 * out.size)

    def adjoint(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return record(out, (a,), adjoint, "log_softmax")


def cumsum(a, axis: int = 0) -> Tensor:
    a = as_tensor(a)
    out = np.cumsum(a.data, axis=axis)
    _count(out.size)

    def adjoint(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return record(out, (a,), adjoint, "cumsum")


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError("matmul needs at least 1-d operands")
    ka = a.shape[-1]
    kb = b.shape[-2] if b.ndim > 1 else b.shape[0]
    if ka != kb:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    _count(max(out.size, 1) * ka)

    def adjoint(g):
        ad, bd = a.data, b.data
        ga = gb = None
        if a.ndim == 1 and b.ndim == 1:
            ga = g * bd if a.requires_grad else None
            gb = g * ad if b.requires_grad else None
            return ga, gb
        a2 = ad[None, :] if a.ndim == 1 else ad
        b2 = bd[:, None] if b.ndim == 1 else bd
        g2 = g
        if a.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if b.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        if a.requires_grad:
            ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
            ga = _unbroadcast(ga, a2.shape).reshape(a.shape)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
            gb = _unbroadcast(gb, b2.shape).reshape(b.shape)
        return ga, gb

    return record(out, (a, b), adjoint, "matmul")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return record(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)
    return record(out, (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)
    out = np.array(out) if np.shares_memory(out, a.data) else out

    def adjoint(g):
        full = np.zeros_like(a.data)
        if _is_advanced(index):
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return record(out, (a,), adjoint, "getitem")


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis
        ):
            raise ShapeError(f"concat: incompatible shapes {ref.shape} and {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def adjoint(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return record(out, tensors, adjoint, "concat")


def take_rows(weight, ids) -> Tensor:
    """Embedding lookup: ``weight[ids]`` with scatter-add adjoint."""
    weight = as_tensor(weight)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"ids must lie in [0, {weight.shape[0]})")
    out = weight.data[ids]

    def adjoint(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return record(out, (weight,), adjoint, "take_rows")


def pick(a, index: np.ndarray, axis: int = -1) -> Tensor:
    """``take_along_axis`` with a trailing singleton removed."""
    a = as_tensor(a)
    idx = np.expand_dims(np.asarray(index), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def adjoint(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return record(out, (a,), adjoint, "pick")


# ---------------------------------------------------------------------------
# finite-difference oracle


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    step: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    Non-scalar outputs are reduced with a fixed random projection so every
    output coordinate contributes.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    inputs = [x] if isinstance(x, Tensor) else list(x)
    saved = [t.requires_grad for t in inputs]
    rng = np.random.default_rng(seed)
    with no_grad():
        probe = f(*inputs)
    weights = rng.standard_normal(probe.shape)

    def scalar(*args) -> Tensor:
        return tsum(mul(f(*args), weights))

    try:
        for t in inputs:
            t.requires_grad = True
            t.grad = None
        reset_tape()
        backward(scalar(*inputs))
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
        worst = 0.0
        with no_grad():
            for t, ga in zip(inputs, analytic):
                flat = t.data.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + step
                    up = scalar(*inputs).item()
                    flat[i] = orig - step
                    down = scalar(*inputs).item()
                    flat[i] = orig
                    numeric = (up - down) / (2.0 * step)
                    if not np.isfinite(numeric):
                        raise NonFiniteError("non-finite value during finite differencing")
                    a = ga.reshape(-1)[i]
                    err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                    worst = max(worst, err)
    finally:
        for t, flag in zip(inputs, saved):
            t.requires_grad = flag
            t.grad = None
    return worst
