"""Dense float64 tensors with a tape-based reverse-mode gradient.

Operations are recorded only while a :class:`Tape` is active::

    with Tape() as tape:
        loss = (w * x).sum()
    grads = backward(loss)
    grads[w.id]

Outside a tape every op is a plain numpy computation with no bookkeeping.
"""

from __future__ import annotations

import contextvars
import itertools
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from pvckit.errors import ContractError, DimensionError, NonFiniteError

_ids = itertools.count(1)
_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "pvckit_active_tape", default=None
)


def _check_finite_enabled() -> bool:
    return os.environ.get("PVCKIT_CHECK_FINITE", "") not in ("", "0")


class Tensor:
    """Immutable N-dimensional float64 array that can take part in a tape."""

    __array_priority__ = 100.0
    __slots__ = ("data", "requires_grad", "id", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if _check_finite_enabled() and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.id = next(_ids)
        t.grad = None
        t.name = None
        t._tape = None
        if _check_finite_enabled() and not np.all(np.isfinite(arr)):
            raise NonFiniteError("non-finite values produced by an operation")
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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class TapeEntry:
    """One recorded operation: ``vjp`` maps the output cotangent to input cotangents."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]

    @property
    def input_ids(self) -> tuple[int, ...]:
        return tuple(t.id for t in self.inputs)

    @property
    def output_id(self) -> int:
        return self.output.id


@dataclass
class Tape:
    """Ordered record of the operations executed while the tape is active.

    Entries are appended in execution order, so the list is already a
    topological order of the computation graph.
    """

    entries: list[TapeEntry] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.entries)

    def produced(self, tensor: Tensor) -> bool:
        return any(e.output is tensor for e in self.entries)

    def clear(self) -> None:
        """Drop recorded entries so saved intermediates can be freed."""
        for e in self.entries:
            e.output._tape = None
        self.entries.clear()


def active_tape() -> Tape | None:
    return _active_tape.get()


class no_grad:
    """Context manager that suspends recording on any active tape."""

    def __enter__(self):
        self._token = _active_tape.set(None)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64), False)


def _record(op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    tape = _active_tape.get()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, needs)
    if needs:
        result._tape = tape
        tape.entries.append(TapeEntry(op, tuple(inputs), result, vjp))
    return result


def backward(loss: Tensor, tape: Tape | None = None) -> dict[int, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns a map from leaf tensor id to dLoss/dLeaf for every leaf on the
    tape that requires a gradient (zeros for leaves that do not contribute).
    Each leaf's ``grad`` attribute is set to the same array.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = loss._tape
    if tape is None:
        raise ContractError("backward needs the Tape the loss was recorded on")

    produced = {e.output.id for e in tape.entries}
    leaves: dict[int, Tensor] = {}
    for e in tape.entries:
        for t in e.inputs:
            if t.requires_grad and t.id not in produced:
                leaves.setdefault(t.id, t)

    cot: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for e in reversed(tape.entries):
        g = cot.pop(e.output.id, None)
        if g is None:
            continue
        in_grads = e.vjp(g)
        for t, gi in zip(e.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.id in cot:
                cot[t.id] = cot[t.id] + gi
            else:
                cot[t.id] = gi

    grads: dict[int, np.ndarray] = {}
    for tid, leaf in leaves.items():
        g = cot.get(tid)
        if g is None:
            g = np.zeros_like(leaf.data)
        grads[tid] = g
        leaf.grad = g
    if loss.id in leaves or (loss.requires_grad and loss.id not in produced):
        grads[loss.id] = np.ones_like(loss.data)
        loss.grad = grads[loss.id]
    return grads


# ---------------------------------------------------------------- helpers


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.data + b.data, lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.data - b.data, lambda g: (unbroadcast(g, sa), -unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        return (
            unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _record("mul", (a, b), ad * bd, vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        return (
            unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _record("div", (a, b), out, vjp)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record("scalar_mul", (a,), a.data * c, lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    # split by sign so neither branch overflows
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def abs_(a: Tensor) -> Tensor:
    a = as_tensor(a)
    s = np.sign(a.data)
    return _record("abs", (a,), np.abs(a.data), lambda g: (g * s,))


def square(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _record("square", (a,), x * x, lambda g: (2.0 * g * x,))


# ---------------------------------------------------------------- reductions


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", (a,), np.asarray(out), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims) if axes else a.data.copy()
    shape = a.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _record("mean", (a,), np.asarray(out), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over D, H, W of an ``[N, C, D, H, W]`` tensor, keeping unit extents."""
    x = as_tensor(x)
    if x.ndim != 5:
        raise DimensionError(f"global_avg_pool expects [N,C,D,H,W], got {x.shape}")
    return mean(x, axis=(2, 3, 4), keepdims=True)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    ad, bd = a.data, b.data
    return _record("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` laid out as ``[out, in]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"fully_connected: input features {x.shape[-1]} != weight in-features {weight.shape[-1]}"
        )
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    inputs: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"fully_connected: bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias.data
        inputs = (x, weight, bias)

    def vjp(g):
        grads = [g @ wd, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _record("fully_connected", inputs, out, vjp)


# ---------------------------------------------------------------- structural


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {old} into {tuple(shape)}") from None
    return _record("reshape", (a,), out, lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat needs at least one tensor")
    ndim = ts[0].ndim
    ax = axis % ndim
    for t in ts[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(ndim) if i != ax
        ):
            raise DimensionError(
                f"concat along axis {ax}: shapes {ts[0].shape} and {t.shape} differ off-axis"
            )
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def vjp(g):
        idx = [slice(None)] * ndim
        res = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            res.append(g[tuple(idx)])
        return res

    return _record("concat", ts, out, vjp)


def slice_(a: Tensor, key) -> Tensor:
    """Basic (view) indexing: ints, slices, Ellipsis, None."""
    a = as_tensor(a)
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not (k is None or k is Ellipsis or isinstance(k, (int, np.integer, slice))):
            raise ContractError("slice supports basic indexing only")
    out = a.data[key]
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return _record("slice", (a,), np.array(out), vjp)


def pad(a: Tensor, widths: Sequence[tuple[int, int]], mode: str = "constant") -> Tensor:
    """Zero (``constant``) or mirror (``reflect``, edge not repeated) padding."""
    a = as_tensor(a)
    widths = [tuple(int(v) for v in w) for w in widths]
    if len(widths) != a.ndim:
        raise DimensionError(f"pad: {len(widths)} widths for a {a.ndim}-d tensor")
    if mode == "constant":
        out = np.pad(a.data, widths)
        crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
        return _record("pad", (a,), out, lambda g: (g[crop],))
    if mode != "reflect":
        raise ContractError(f"unknown pad mode {mode!r}")
    for (lo, hi), n in zip(widths, a.shape):
        if max(lo, hi) > n - 1 and (lo or hi):
            raise DimensionError(f"reflect padding {max(lo, hi)} needs extent > {max(lo, hi)}, got {n}")
    # per-axis gather indices; the adjoint scatters them back
    index = [np.pad(np.arange(n), w, mode="reflect") for n, w in zip(a.shape, widths)]
    out = a.data[np.ix_(*index)]
    shape = a.shape

    def vjp(g):
        for ax, idx in enumerate(index):
            acc = np.zeros(g.shape[:ax] + (shape[ax],) + g.shape[ax + 1:])
            np.add.at(acc, (slice(None),) * ax + (idx,), g)
            g = acc
        return (g,)

    return _record("pad", (a,), out, vjp)


def take(a: Tensor, indices: Sequence[int], axis: int) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the gradient."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % a.ndim
    out = np.take(a.data, idx, axis=ax)
    shape = a.shape

    def vjp(g):
        acc = np.zeros(shape)
        np.add.at(acc, (slice(None),) * ax + (idx,), g)
        return (acc,)

    return _record("take", (a,), out, vjp)


def box_mean(a: Tensor, size: int, axes: tuple[int, int]) -> Tensor:
    """Uniform ``size x size`` window mean over two axes, valid positions only."""
    a = as_tensor(a)
    ax0, ax1 = (ax % a.ndim for ax in axes)
    for ax in (ax0, ax1):
        if a.shape[ax] < size:
            raise DimensionError(f"box_mean: axis {ax} extent {a.shape[ax]} < window {size}")
    x = a.data
    for ax in (ax0, ax1):
        c = np.cumsum(x, axis=ax)
        c = np.concatenate([np.zeros_like(np.take(c, [0], axis=ax)), c], axis=ax)
        n = c.shape[ax]
        x = np.take(c, np.arange(size, n), axis=ax) - np.take(c, np.arange(0, n - size), axis=ax)
    out = x / float(size * size)
    shape = a.shape

    def vjp(g):
        g = g / float(size * size)
        for ax in (ax0, ax1):
            # adjoint of a valid box sum is a full box sum of the zero-padded cotangent
            widths = [(0, 0)] * g.ndim
            widths[ax] = (size - 1, size - 1)
            gp = np.pad(g, widths)
            c = np.cumsum(gp, axis=ax)
            c = np.concatenate([np.zeros_like(np.take(c, [0], axis=ax)), c], axis=ax)
            n = shape[ax]
            g = np.take(c, np.arange(size, size + n), axis=ax) - np.take(c, np.arange(0, n), axis=ax)
        return (g,)

    return _record("box_mean", (a,), out, vjp)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", (a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inv),))


def channel_mix(a: Tensor, matrix: np.ndarray) -> Tensor:
    """Constant linear map over axis 1: ``out[:, i] = sum_j matrix[i, j] * a[:, j]``."""
    a = as_tensor(a)
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != a.shape[1]:
        raise DimensionError(f"channel_mix: matrix {m.shape} does not act on {a.shape[1]} channels")
    out = np.moveaxis(np.tensordot(m, a.data, axes=([1], [1])), 0, 1)
    return _record(
        "channel_mix",
        (a,),
        np.ascontiguousarray(out),
        lambda g: (np.ascontiguousarray(np.moveaxis(np.tensordot(m.T, g, axes=([1], [1])), 0, 1)),),
    )
