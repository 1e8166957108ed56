"""Multi-dimensional dynamic convolution with densely-connected attention.

A :class:`DynConvLayer` owns one static kernel ``W`` and three attention
heads.  For every input volume the heads emit a spatial, an input-channel
and an output-channel attention vector, and the kernel actually applied is::

    W_dyn = W * (a_spa + a_in + a_out) / 3

Bias is not modulated.  The heads see a running mixture of all preceding
layers' features (see :func:`dense_mix`) rather than only the current input.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from pvckit.autodiff import (
    Tensor,
    as_tensor,
    channel_mix,
    concat,
    conv3d,
    conv3d_transpose,
    fully_connected,
    global_avg_pool,
    mean,
    pad,
    relu,
    reshape,
    scalar_mul,
    sigmoid,
    slice_,
    take,
)
from pvckit.errors import DimensionError
from pvckit.optim import xavier_init


@dataclass
class AttentionHead:
    """GAP -> FC(2n) -> ReLU -> FC(n) -> sigmoid."""

    fc1_weight: Tensor  # [2n, C_in]
    fc1_bias: Tensor  # [2n]
    fc2_weight: Tensor  # [n, 2n]
    fc2_bias: Tensor  # [n]

    @classmethod
    def create(cls, c_in: int, n: int, rng: np.random.Generator) -> "AttentionHead":
        return cls(
            fc1_weight=xavier_init((2 * n, c_in), rng),
            fc1_bias=Tensor(np.zeros(2 * n), requires_grad=True),
            fc2_weight=xavier_init((n, 2 * n), rng),
            fc2_bias=Tensor(np.zeros(n), requires_grad=True),
        )

    @property
    def c_in(self) -> int:
        return self.fc1_weight.shape[1]

    @property
    def n(self) -> int:
        return self.fc2_weight.shape[0]

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.fc1.weight": self.fc1_weight,
            f"{prefix}.fc1.bias": self.fc1_bias,
            f"{prefix}.fc2.weight": self.fc2_weight,
            f"{prefix}.fc2.bias": self.fc2_bias,
        }


def attention_forward(head: AttentionHead, x_in: Tensor) -> Tensor:
    """Per-item attention vector ``[N, n]`` with every value in (0, 1)."""
    x_in = as_tensor(x_in)
    if x_in.ndim != 5 or x_in.shape[1] != head.c_in:
        raise DimensionError(
            f"attention head expects {head.c_in} input channels, got shape {x_in.shape}"
        )
    pooled = reshape(global_avg_pool(x_in), (x_in.shape[0], head.c_in))
    hidden = relu(fully_connected(pooled, head.fc1_weight, head.fc1_bias))
    return sigmoid(fully_connected(hidden, head.fc2_weight, head.fc2_bias))


def dynamic_kernel(weight: Tensor, a_spa: Tensor, a_in: Tensor, a_out: Tensor) -> Tensor:
    """Re-weight ``weight [C_out, C_in, kd, kh, kw]`` by three attention vectors.

    Unbatched attentions (1-d) give a kernel shaped like ``weight``; batched
    attentions ``[N, n]`` give ``[N, C_out, C_in, kd, kh, kw]``.
    """
    weight, a_spa, a_in, a_out = (as_tensor(t) for t in (weight, a_spa, a_in, a_out))
    c_out, c_in, kd, kh, kw = weight.shape
    batched = a_spa.ndim == 2
    lead = (a_spa.shape[0],) if batched else ()
    for name, a, n in (("a_spa", a_spa, kd * kh * kw), ("a_in", a_in, c_in), ("a_out", a_out, c_out)):
        if a.shape != lead + (n,):
            raise DimensionError(f"{name} has shape {a.shape}, expected {lead + (n,)}")
    spa = reshape(a_spa, lead + (1, 1, kd, kh, kw))
    ain = reshape(a_in, lead + (1, c_in, 1, 1, 1))
    aout = reshape(a_out, lead + (c_out, 1, 1, 1, 1))
    # scale the attention sum first so all-ones attention returns W exactly
    return weight * scalar_mul(spa + ain + aout, 1.0 / 3.0)


@dataclass
class DenseAttentionState:
    """Running attention input carried along a chain of dynamic layers."""

    x_prev: Tensor
    layer: int = 1


def _fit_extent(t: Tensor, axis: int, n: int) -> Tensor:
    m = t.shape[axis]
    if m == n:
        return t
    key = [slice(None)] * t.ndim
    if m > n:
        lo = (m - n) // 2
        key[axis] = slice(lo, lo + n)
        return slice_(t, tuple(key))
    widths = [(0, 0)] * t.ndim
    lo = (n - m) // 2
    widths[axis] = (lo, n - m - lo)
    return pad(t, widths)


def reconcile(x_prev: Tensor, like_shape: tuple[int, ...]) -> Tensor:
    """Bring ``x_prev`` to ``like_shape`` without parameters.

    Spatial axes are centre-cropped (when larger) or zero-padded (when
    smaller).  Channels are tiled cyclically when ``x_prev`` has fewer, or
    averaged over cyclic groups (channel ``j`` feeds ``j mod C``) when it
    has more.
    """
    if x_prev.ndim != 5 or len(like_shape) != 5 or x_prev.shape[0] != like_shape[0]:
        raise DimensionError(f"cannot reconcile {x_prev.shape} with {tuple(like_shape)}")
    out = x_prev
    for axis in (2, 3, 4):
        out = _fit_extent(out, axis, like_shape[axis])
    c_prev, c = out.shape[1], like_shape[1]
    if c_prev == c:
        return out
    if c > c_prev:
        return take(out, [i % c_prev for i in range(c)], axis=1)
    if c_prev % c == 0:
        n, _, d, h, w = out.shape
        grouped = reshape(out, (n, c_prev // c, c, d, h, w))
        return mean(grouped, axis=1)
    fold = np.zeros((c, c_prev))
    fold[np.arange(c_prev) % c, np.arange(c_prev)] = 1.0
    return channel_mix(out, fold / fold.sum(axis=1, keepdims=True))


def dense_mix(x_lminus1: Tensor, state: DenseAttentionState) -> tuple[Tensor, DenseAttentionState]:
    """``x_in = (x_{l-1} + x_prev) / 2``; the result becomes the next ``x_prev``.

    Unrolled over a chain of features f1 (the network input), f2, ..., fm the
    mixture is ``f_m/2 + f_{m-1}/4 + ... + f_2/2^(m-1) + f_1/2^(m-1)``.
    """
    prev = reconcile(state.x_prev, x_lminus1.shape)
    mixed = scalar_mul(x_lminus1 + prev, 0.5)
    return mixed, DenseAttentionState(x_prev=mixed, layer=state.layer + 1)


def unrolled_weights(m: int) -> list[float]:
    """Closed-form weights of f1..fm in the mixture after ``m`` dense_mix steps."""
    if m < 1:
        raise ValueError("need at least one feature")
    w = [2.0 ** -(m - k + 1) for k in range(1, m + 1)]
    w[0] = 2.0 ** -(m - 1)
    return w


@dataclass
class DynConvLayer:
    """Convolution (or transposed convolution) with optional attention heads.

    ``heads`` is ``None`` for a plain static layer.  Setting
    ``force_attention`` replaces every attention value by that constant,
    bypassing the heads (used to check the reduction to a static layer).
    """

    weight: Tensor
    bias: Tensor
    heads: dict[str, AttentionHead] | None
    padding: tuple[int, int, int] = (0, 0, 0)
    stride: tuple[int, int, int] = (1, 1, 1)
    transpose: bool = False
    force_attention: float | None = field(default=None, compare=False)

    @classmethod
    def create(
        cls,
        c_in: int,
        c_out: int,
        kernel: tuple[int, int, int],
        rng: np.random.Generator,
        padding=(0, 0, 0),
        transpose: bool = False,
        dynamic: bool = True,
        gain: float = 1.0,
    ) -> "DynConvLayer":
        weight = xavier_init((c_out, c_in) + tuple(kernel), rng, gain=gain)
        bias = Tensor(np.zeros(c_out), requires_grad=True)
        heads = None
        if dynamic:
            heads = {
                "spa": AttentionHead.create(c_in, int(np.prod(kernel)), rng),
                "in": AttentionHead.create(c_in, c_in, rng),
                "out": AttentionHead.create(c_in, c_out, rng),
            }
        return cls(weight, bias, heads, tuple(padding), (1, 1, 1), transpose)

    @property
    def dynamic(self) -> bool:
        return self.heads is not None

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel_size(self) -> tuple[int, int, int]:
        return tuple(self.weight.shape[2:])

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        params = {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}
        if self.heads is not None:
            for key in ("spa", "in", "out"):
                params.update(self.heads[key].parameters(f"{prefix}.att_{key}"))
        return params

    def attentions(self, x_att: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        n = x_att.shape[0]
        if self.force_attention is not None:
            c = float(self.force_attention)
            sizes = (int(np.prod(self.kernel_size)), self.c_in, self.c_out)
            return tuple(Tensor(np.full((n, s), c)) for s in sizes)
        return tuple(attention_forward(self.heads[k], x_att) for k in ("spa", "in", "out"))

    def _conv(self, x: Tensor, kernel: Tensor) -> Tensor:
        fn = conv3d_transpose if self.transpose else conv3d
        return fn(x, kernel, self.bias, padding=self.padding, stride=self.stride)


def dynconv_forward(
    layer: DynConvLayer,
    x: Tensor,
    state: DenseAttentionState | None = None,
    densely_connected: bool = True,
) -> tuple[Tensor, DenseAttentionState | None]:
    """Apply ``layer`` to ``x``.

    With ``densely_connected`` the heads read :func:`dense_mix` of ``x`` and
    the carried state; otherwise they read ``x`` alone and the state passes
    through untouched.  The convolution itself always consumes ``x``.
    """
    x = as_tensor(x)
    if x.ndim != 5 or x.shape[1] != layer.c_in:
        raise DimensionError(f"layer expects {layer.c_in} input channels, got shape {x.shape}")
    if not layer.dynamic:
        return layer._conv(x, layer.weight), state

    if densely_connected:
        if state is None:
            state = DenseAttentionState(x_prev=x)
        x_att, state = dense_mix(x, state)
    else:
        x_att = x

    a_spa, a_in, a_out = layer.attentions(x_att)
    kernels = dynamic_kernel(layer.weight, a_spa, a_in, a_out)
    outs = [
        layer._conv(slice_(x, (slice(i, i + 1),)), slice_(kernels, (i,)))
        for i in range(x.shape[0])
    ]
    y = outs[0] if len(outs) == 1 else concat(outs, axis=0)
    return y, state


def parameter_count(params: dict[str, Tensor]) -> int:
    return int(sum(p.size for p in params.values()))


def with_forced_attention(layer: DynConvLayer, value: float | None) -> DynConvLayer:
    return replace(layer, force_attention=value)
