"""Central finite differences for checking tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from pvckit.autodiff.tensor import Tape, Tensor, backward, no_grad


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-5, indices=None) -> np.ndarray:
    """Estimate d fn() / d t by central differences, perturbing ``t.data`` in place.

    ``indices`` restricts the probe to a subset of flat positions; the other
    entries of the result are left at zero.
    """
    flat = t.data.reshape(-1)
    out = np.zeros_like(flat)
    probe = range(flat.size) if indices is None else indices
    with no_grad():
        for i in probe:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().data)
            flat[i] = orig - h
            fm = float(fn().data)
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(t.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(|a|, |n|, floor), taken over the whole array."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0), floor)
    return float(np.max(np.abs(a - n), initial=0.0) / scale)


def check_gradients(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-5,
    max_probes: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative error between tape and finite-difference gradients.

    ``fn`` must build a scalar from ``tensors`` (all ``requires_grad``).
    With ``max_probes`` only that many random entries per tensor are probed.
    """
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = fn()
    backward(loss, tape)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]
    tape.clear()
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for t, a in zip(tensors, analytic):
        idx = None
        if max_probes is not None and t.size > max_probes:
            idx = rng.choice(t.size, size=max_probes, replace=False)
        n = numeric_grad(fn, t, h, idx)
        if idx is not None:
            a = a.reshape(-1)[idx]
            n = n.reshape(-1)[idx]
        worst = max(worst, relative_error(a, n))
    return worst
