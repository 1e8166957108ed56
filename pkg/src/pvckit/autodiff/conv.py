"""3D cross-correlation and its transpose, with tape-recorded gradients.

Kernels use the layout ``[C_out, C_in, kd, kh, kw]`` for both directions.
Accumulation runs kernel-offset major (d, then h, then w), which fixes the
floating-point summation order independent of thread count.
"""

from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np

from pvckit.autodiff.tensor import Tensor, _record, as_tensor
from pvckit.errors import ContractError, DimensionError

_AXES = ("D", "H", "W")


def _triple(v, name: str) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ContractError(f"{name} needs 3 per-axis values, got {v}")
    return v


def conv_output_shape(spatial, kernel, padding=0, stride=1) -> tuple[int, int, int]:
    pad, st = _triple(padding, "padding"), _triple(stride, "stride")
    out = []
    for ax, n, k, p, s in zip(_AXES, spatial, kernel, pad, st):
        if s < 1:
            raise ContractError(f"stride on axis {ax} must be >= 1, got {s}")
        if k > n + 2 * p:
            raise DimensionError(f"axis {ax}: kernel extent {k} exceeds padded input extent {n + 2 * p}")
        out.append((n + 2 * p - k) // s + 1)
    return tuple(out)


def conv_transpose_output_shape(spatial, kernel, padding=0, stride=1) -> tuple[int, int, int]:
    pad, st = _triple(padding, "padding"), _triple(stride, "stride")
    out = []
    for ax, n, k, p, s in zip(_AXES, spatial, kernel, pad, st):
        if s < 1:
            raise ContractError(f"stride on axis {ax} must be >= 1, got {s}")
        m = (n - 1) * s - 2 * p + k
        if m < 1:
            raise DimensionError(f"axis {ax}: transposed output extent {m} < 1")
        out.append(m)
    return tuple(out)


def _check(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, c_in_axis: int):
    if x.ndim != 5:
        raise DimensionError(f"input must be [N,C,D,H,W], got shape {x.shape}")
    if w.ndim != 5:
        raise DimensionError(f"kernel must be [C_out,C_in,kd,kh,kw], got shape {w.shape}")
    if x.shape[1] != w.shape[c_in_axis]:
        raise DimensionError(
            f"axis C: input has {x.shape[1]} channels, kernel expects {w.shape[c_in_axis]}"
        )
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"axis C_out: bias shape {b.shape} != ({w.shape[0]},)")


def _window(offset, out_shape, stride):
    return tuple(slice(o, o + s * (n - 1) + 1, s) for o, n, s in zip(offset, out_shape, stride))


def correlate(x: np.ndarray, w: np.ndarray, padding, stride) -> np.ndarray:
    """Raw forward: ``out[n,o,z,y,x] = sum_{c,a,b,e} w[o,c,a,b,e] * xp[n,c,z*s+a,...]``."""
    pad, st = _triple(padding, "padding"), _triple(stride, "stride")
    out_sp = conv_output_shape(x.shape[2:], w.shape[2:], pad, st)
    xp = np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in pad)) if any(pad) else x
    acc = np.zeros((w.shape[0], x.shape[0]) + out_sp)
    for off in itertools.product(*(range(k) for k in w.shape[2:])):
        xs = xp[(slice(None), slice(None)) + _window(off, out_sp, st)]
        acc += np.tensordot(w[(slice(None), slice(None)) + off], xs, axes=([1], [1]))
    return np.ascontiguousarray(acc.transpose(1, 0, 2, 3, 4))


def scatter(g: np.ndarray, w: np.ndarray, in_spatial, padding, stride) -> np.ndarray:
    """Adjoint of :func:`correlate` with respect to its input.

    ``g`` is ``[N, C_out, ...out]``; the result is ``[N, C_in, *in_spatial]``.
    """
    pad, st = _triple(padding, "padding"), _triple(stride, "stride")
    out_sp = g.shape[2:]
    padded = tuple(n + 2 * p for n, p in zip(in_spatial, pad))
    acc = np.zeros((w.shape[1], g.shape[0]) + padded)
    for off in itertools.product(*(range(k) for k in w.shape[2:])):
        contrib = np.tensordot(w[(slice(None), slice(None)) + off], g, axes=([0], [1]))
        acc[(slice(None), slice(None)) + _window(off, out_sp, st)] += contrib
    crop = (slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(pad, in_spatial))
    return np.ascontiguousarray(acc[crop].transpose(1, 0, 2, 3, 4))


def kernel_grad(x: np.ndarray, g: np.ndarray, kernel_shape, padding, stride) -> np.ndarray:
    """d(sum(g * correlate(x, w)))/dw."""
    pad, st = _triple(padding, "padding"), _triple(stride, "stride")
    out_sp = g.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in pad)) if any(pad) else x
    gw = np.empty(kernel_shape)
    for off in itertools.product(*(range(k) for k in kernel_shape[2:])):
        xs = xp[(slice(None), slice(None)) + _window(off, out_sp, st)]
        gw[(slice(None), slice(None)) + off] = np.tensordot(g, xs, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    return gw


def conv3d(x, kernel, bias=None, padding: int | Sequence[int] = 0, stride: int | Sequence[int] = 1) -> Tensor:
    """Static 3D convolution (cross-correlation convention) plus bias."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    b = as_tensor(bias) if bias is not None else None
    _check(x.data, kernel.data, None if b is None else b.data, 1)
    pad, st = _triple(padding, "padding"), _triple(stride, "stride")
    xd, wd = x.data, kernel.data
    out = correlate(xd, wd, pad, st)
    if b is not None:
        out += b.data[None, :, None, None, None]

    def vjp(g):
        grads = [
            scatter(g, wd, xd.shape[2:], pad, st) if x.requires_grad else None,
            kernel_grad(xd, g, wd.shape, pad, st) if kernel.requires_grad else None,
        ]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return grads

    inputs = (x, kernel) if b is None else (x, kernel, b)
    return _record("conv3d", inputs, out, vjp)


def conv3d_transpose(x, kernel, bias=None, padding: int | Sequence[int] = 0, stride: int | Sequence[int] = 1) -> Tensor:
    """Transposed convolution mapping ``C_in -> C_out`` with kernel ``[C_out, C_in, ...]``.

    Equals the input-gradient of :func:`conv3d` taken with the channel-swapped
    kernel, so ``conv3d_transpose`` undoes the extent change of an unpadded
    ``conv3d`` with the same kernel extents.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    b = as_tensor(bias) if bias is not None else None
    _check(x.data, kernel.data, None if b is None else b.data, 1)
    pad, st = _triple(padding, "padding"), _triple(stride, "stride")
    xd = x.data
    wt = np.ascontiguousarray(kernel.data.transpose(1, 0, 2, 3, 4))  # [C_in, C_out, ...]
    out_sp = conv_transpose_output_shape(xd.shape[2:], wt.shape[2:], pad, st)
    out = scatter(xd, wt, out_sp, pad, st)
    if b is not None:
        out += b.data[None, :, None, None, None]

    def vjp(g):
        grads = [
            correlate(g, wt, pad, st) if x.requires_grad else None,
            kernel_grad(g, xd, wt.shape, pad, st).transpose(1, 0, 2, 3, 4)
            if kernel.requires_grad
            else None,
        ]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return grads

    inputs = (x, kernel) if b is None else (x, kernel, b)
    return _record("conv3d_transpose", inputs, out, vjp)
