"""Xavier initialisation and the Adam update."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from pvckit.autodiff import Tensor
from pvckit.errors import ContractError, DimensionError


def fans(shape: tuple[int, ...]) -> tuple[int, int]:
    """(fan_in, fan_out) for FC weights ``[out, in]`` and conv kernels ``[out, in, *k]``."""
    if len(shape) < 2:
        raise ContractError(f"xavier needs at least 2 dims, got {shape}")
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    return shape[1] * receptive, shape[0] * receptive


def xavier_bound(shape: tuple[int, ...], gain: float = 1.0) -> float:
    fan_in, fan_out = fans(shape)
    return gain * math.sqrt(6.0 / (fan_in + fan_out))


def xavier_init(shape, seed: int | np.random.Generator = 0, requires_grad: bool = True,
                gain: float = 1.0) -> Tensor:
    """Glorot-uniform tensor on ``[-b, b]`` with ``b = gain * sqrt(6 / (fan_in + fan_out))``."""
    shape = tuple(int(s) for s in shape)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    bound = xavier_bound(shape, gain)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=requires_grad)


@dataclass
class AdamState:
    """First/second moment estimates keyed by parameter name, plus the step count."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Apply one bias-corrected Adam update in place to ``params``.

    Parameters without an entry in ``grads`` are treated as having zero
    gradient (their moments still decay).
    """
    if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
        raise ContractError(f"betas must lie in (0, 1), got {beta1}, {beta2}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise DimensionError(f"{name}: gradient shape {g.shape} != parameter shape {p.data.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state
