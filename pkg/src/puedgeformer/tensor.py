"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations run eagerly on numpy arrays. When a :class:`Tape` is active, every
operation touching a tracked tensor is appended to it together with a closure
that maps the output gradient to input gradients. ``Tape.backward`` replays
the records in reverse order.

Outside of a tape, operations are plain numpy computations, which is what
inference uses.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "TapeError",
    "tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "gather_rows",
    "relu",
    "leaky_relu",
    "softmax_rows",
    "max_over_axis",
    "sum",
    "mean",
    "custom_op",
    "is_recording",
    "backward",
    "grad_check",
    "grad_check_many",
    "ordered_matmul",
    "track_kinks",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Raised on misuse of the gradient tape."""


_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


def is_recording() -> bool:
    """True inside a ``with Tape():`` block."""
    return _active_tape() is not None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t._tape = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None) -> "Tensor":
        return sum(self, axis)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


class Tape:
    """Ordered record of differentiable operations for one forward/backward cycle.

    Use as a context manager around the forward pass, then call
    :meth:`backward` once. A consumed tape must be :meth:`reset` before reuse.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("tape already consumed by backward(); call reset() first")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def reset(self) -> None:
        self.records.clear()
        self.consumed = False

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or t._tape is self

    def record(self, out: Tensor, parents: tuple[Tensor, ...], fn: Callable) -> None:
        out._tape = self
        self.records.append((out, parents, fn))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise TapeError("backward() already ran on this tape; reset it before reuse")
        if loss._tape is not self:
            if loss.requires_grad:
                loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
                self.consumed = True
                return
            raise TapeError("loss was not produced on this tape (stale tape?)")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, parents, fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            pgrads = fn(g)
            for p, pg in zip(parents, pgrads):
                if pg is None or not self.tracks(p):
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if p.requires_grad and p._tape is not self:
                    leaves[key] = p
        for key, leaf in leaves.items():
            g = grads[key]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        self.consumed = True


def backward(loss: Tensor) -> None:
    """Backpropagate ``loss`` through the tape that produced it."""
    if loss._tape is None:
        raise TapeError("loss carries no tape; run the forward pass inside `with Tape():`")
    loss._tape.backward(loss)


def custom_op(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of a differentiable op.

    ``grad_fn(g)`` receives the output gradient and returns one array (or None)
    per parent.
    """
    out = Tensor._wrap(data)
    tape = _active_tape()
    if tape is not None and any(tape.tracks(p) for p in parents):
        tape.record(out, tuple(parents), grad_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    return custom_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    return custom_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    return custom_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return custom_op(a.data * c, (a,), lambda g: (g * c,))


# matmul summation order: None -> BLAS, True -> sequential over the inner index
_ORDERED = threading.local()


def _ordered_enabled() -> bool:
    return getattr(_ORDERED, "on", False)


@contextlib.contextmanager
def ordered_matmul(enabled: bool = True):
    """Force matmul to accumulate strictly left-to-right over the inner index.

    Slower than BLAS but reproduces a naive triple loop bit for bit.
    """
    prev = _ordered_enabled()
    _ORDERED.on = enabled
    try:
        yield
    finally:
        _ORDERED.on = prev


def _mm(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if not _ordered_enabled():
        return np.matmul(x, y)
    out = x[..., :, 0:1] * y[..., 0:1, :]
    for p in range(1, x.shape[-1]):
        out = out + x[..., :, p : p + 1] * y[..., p : p + 1, :]
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading batch axes must match."""
    a, b = _as_tensor(a), _as_tensor(b)
    if (
        a.ndim < 2
        or b.ndim < 2
        or a.ndim != b.ndim
        or a.shape[:-2] != b.shape[:-2]
        or a.shape[-1] != b.shape[-2]
    ):
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def grad_fn(g):
        ga = _mm(g, np.swapaxes(b.data, -1, -2))
        gb = _mm(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return custom_op(_mm(a.data, b.data), (a, b), grad_fn)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"invalid permutation {axes} for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return custom_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} ({a.size} elements) to {shape}")
    src = a.shape
    return custom_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    nd = tensors[0].ndim
    ax = axis % nd if nd else 0
    for t in tensors[1:]:
        if t.ndim != nd or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != ax
        ):
            raise ShapeError(
                f"concat along axis {axis}: incompatible shapes "
                f"{[tuple(x.shape) for x in tensors]}"
            )
    offsets = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def grad_fn(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=ax)
            for i in range(len(tensors))
        )

    return custom_op(np.concatenate([t.data for t in tensors], axis=ax), tensors, grad_fn)


def gather_rows(a: Tensor, idx) -> Tensor:
    """``out[i, j] = a[idx[i, j]]`` for an integer index array of any shape."""
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise TypeError("gather_rows needs an integer index array")
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows index out of range [0, {n})")
    row_shape = a.shape[1:]

    def grad_fn(g):
        flat = idx.reshape(-1)
        g2 = g.reshape(flat.size, -1)
        out = np.zeros((n, g2.shape[1]))
        # sort so duplicate rows accumulate in a fixed order
        order = np.argsort(flat, kind="stable")
        np.add.at(out, flat[order], g2[order])
        return (out.reshape((n,) + row_shape),)

    return custom_op(a.data[idx], (a,), grad_fn)


_KINKS = threading.local()


@contextlib.contextmanager
def track_kinks():
    """Collect distances to non-differentiable points during a forward pass.

    Yields a list that receives, per activation call, the smallest ``|x|``
    and, per max reduction, the smallest gap between the top two entries.
    """
    prev = getattr(_KINKS, "log", None)
    _KINKS.log = []
    try:
        yield _KINKS.log
    finally:
        _KINKS.log = prev


def _note_kink(margin: float) -> None:
    log = getattr(_KINKS, "log", None)
    if log is not None:
        log.append(float(margin))


def relu(a: Tensor) -> Tensor:
    _note_kink(np.abs(a.data).min(initial=np.inf))
    mask = a.data > 0
    return custom_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    slope = float(slope)
    _note_kink(np.abs(a.data).min(initial=np.inf))
    if 0.0 <= slope <= 1.0:
        out = np.maximum(a.data, a.data * slope)
    else:
        out = np.where(a.data >= 0, a.data, a.data * slope)

    def grad_fn(g):
        return (np.where(a.data >= 0, g, g * slope),)

    return custom_op(out, (a,), grad_fn)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, shifted by the row maximum."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return custom_op(s, (a,), grad_fn)


def max_over_axis(a: Tensor, axis: int) -> tuple[Tensor, np.ndarray]:
    """Maximum along ``axis``; ties resolve to the lowest index.

    Returns the reduced tensor and the argmax index array. The gradient flows
    only to the argmax positions.
    """
    if not -a.ndim <= axis < a.ndim:
        raise np.exceptions.AxisError(axis, a.ndim)
    ax = axis % a.ndim
    if getattr(_KINKS, "log", None) is not None and a.shape[ax] > 1:
        top2 = -np.partition(-a.data, 1, axis=ax)
        gap = np.take(top2, 0, axis=ax) - np.take(top2, 1, axis=ax)
        _note_kink(gap.min(initial=np.inf))
    arg = np.argmax(a.data, axis=ax)
    values = np.take_along_axis(a.data, np.expand_dims(arg, ax), axis=ax).squeeze(ax)
    src = a.shape

    def grad_fn(g):
        out = np.zeros(src)
        np.put_along_axis(out, np.expand_dims(arg, ax), np.expand_dims(g, ax), axis=ax)
        return (out,)

    return custom_op(values, (a,), grad_fn), arg


def sum(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:  # noqa: A001
    src = a.shape
    if axis is None:
        return custom_op(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, src).copy(),))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(x % a.ndim for x in axes)

    def grad_fn(g):
        return (np.broadcast_to(np.expand_dims(g, axes), src).copy(),)

    return custom_op(a.data.sum(axis=axes), (a,), grad_fn)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6) -> float:
    """Maximum relative error between tape gradients and central differences.

    The error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``. Points
    where ``f`` is not differentiable (max-pool ties, activation kinks) give
    meaningless results and should be avoided by the caller.
    """
    return max(grad_check_many(lambda: f(x), [x], h).values(), default=0.0)


def grad_check_many(
    f: Callable[[], Tensor],
    tensors: Iterable[Tensor] | dict[str, Tensor],
    h: float = 1e-6,
    skip_zero: bool = False,
    skipped: dict[str, int] | None = None,
) -> dict[str, float]:
    """Like :func:`grad_check` for a closure over several tensors.

    Returns the max relative error per tensor, keyed by name (or position).

    With ``skip_zero``, coordinates whose gradient is zero up to roundoff are
    left out: the tape gradient must be below ``1e-12 * max(1, |f|)`` and the
    central difference within the difference noise ``100 * eps * max(1, |f|) / h``.
    The relative error is meaningless there (both sides are noise). Counts
    of skipped coordinates go into ``skipped`` when given.
    """
    if h <= 0:
        raise ValueError("step size h must be positive")
    items = list(tensors.items()) if isinstance(tensors, dict) else [
        (t.name or str(i), t) for i, t in enumerate(tensors)
    ]
    saved = [(t, t.requires_grad, t.grad) for _, t in items]
    for _, t in items:
        if not t.data.flags.c_contiguous:
            t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    try:
        with Tape() as tape:
            out = f()
        tape.backward(out)
        analytic = {name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in items}
    finally:
        for t, rg, g in saved:
            t.requires_grad = rg
            t.grad = g

    mag = max(1.0, abs(float(out.data)))
    zero_tape = 1e-12 * mag
    zero_diff = 100.0 * np.finfo(np.float64).eps * mag / h
    errors = {}
    for name, t in items:
        flat = t.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        worst = 0.0
        n_skipped = 0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            if skip_zero and abs(a_flat[i]) < zero_tape and abs(num) < zero_diff:
                n_skipped += 1
                continue
            err = abs(a_flat[i] - num) / max(1e-8, abs(a_flat[i]) + abs(num))
            worst = max(worst, err)
        errors[name] = worst
        if skipped is not None:
            skipped[name] = n_skipped
    return errors
