"""Random miniature configurations for finite-difference gradient checks.

``make_case(seed)`` returns ``(kind, fn, tensors)``; the kind cycles with
the seed so any 100 consecutive seeds cover every layer and loss.
"""

from __future__ import annotations

import numpy as np

from pvckit.autodiff import (
    Tensor,
    abs_,
    box_mean,
    channel_mix,
    concat,
    conv3d,
    conv3d_transpose,
    fully_connected,
    global_avg_pool,
    mean,
    pad,
    relu,
    sigmoid,
    slice_,
    square,
    sum_,
    take,
)
import pvckit.dynconv as dynconv_module
from pvckit.dynconv import DenseAttentionState, DynConvLayer, attention_forward, dynconv_forward
from pvckit.losses import PLANES, LossWeights, SsimParams, _sobel_pair, composite_loss, imbv_loss, mae_loss, sobel_loss, ssim_loss
from pvckit.volume import Label


def _t(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _labels(rng, shape):
    lab = rng.integers(0, 5, size=shape).astype(np.uint16)
    flat = lab.reshape(-1)
    flat[0] = Label.MYOCARDIUM
    flat[1] = Label.BLOOD_POOL
    return lab


def _weights(rng, x_shape):
    # random projection so gradients are not all identical
    return rng.normal(size=x_shape)


def case_conv(rng):
    c_in, c_out = rng.integers(1, 3, size=2)
    k = tuple(rng.integers(1, 4, size=3))
    pads = tuple(int(rng.integers(0, kk)) for kk in k)
    x = _t(rng, 1, c_in, 4, 5, 5)
    w = _t(rng, c_out, c_in, *k)
    b = _t(rng, c_out)
    proj = None

    def fn():
        y = conv3d(x, w, b, padding=pads)
        nonlocal proj
        if proj is None:
            proj = rng.normal(size=y.shape)
        return sum_(y * proj)

    return fn, [x, w, b]


def case_conv_transpose(rng):
    c_in, c_out = rng.integers(1, 3, size=2)
    k = (1, 3, 3) if rng.random() < 0.5 else tuple(rng.integers(1, 4, size=3))
    x = _t(rng, 1, c_in, 3, 4, 4)
    w = _t(rng, c_out, c_in, *k)
    b = _t(rng, c_out)
    proj = None

    def fn():
        nonlocal proj
        y = conv3d_transpose(x, w, b)
        if proj is None:
            proj = rng.normal(size=y.shape)
        return sum_(y * proj)

    return fn, [x, w, b]


def case_elementwise(rng):
    # redraw until relu and abs inputs are clear of their kinks
    while True:
        a = _t(rng, 2, 3)
        b = _t(rng, 3, lo=0.5, hi=1.5)
        if min(np.min(np.abs(a.data * (b.data + 1))), np.min(np.abs(a.data - 0.1))) > 1e-3:
            break

    def fn():
        z = relu(a * b + a) - sigmoid(a) / b
        return mean(square(z) + abs_(a - 0.1))

    return fn, [a, b]


def case_fc(rng):
    x = _t(rng, 2, 4)
    w = _t(rng, 3, 4)
    b = _t(rng, 3)
    proj = rng.normal(size=(2, 3))
    return (lambda: sum_(sigmoid(fully_connected(x, w, b)) * proj)), [x, w, b]


def case_structural(rng):
    a = _t(rng, 1, 2, 3, 4, 4)
    b = _t(rng, 1, 1, 3, 4, 4)
    m = rng.uniform(size=(2, 3))
    proj = rng.normal(size=(1, 2, 5, 6, 6))

    def fn():
        c = concat([a, b], axis=1)
        c = channel_mix(c, m)
        c = pad(c, [(0, 0), (0, 0), (1, 1), (1, 1), (1, 1)], mode="reflect")
        s = slice_(c, (slice(None), slice(None), slice(0, 5), slice(0, 6), slice(0, 6)))
        t = take(s, [1, 0, 1], axis=1)
        return sum_(slice_(t, (slice(None), slice(0, 2))) * proj) + sum_(global_avg_pool(a))

    return fn, [a, b]


def case_box_mean(rng):
    a = _t(rng, 1, 1, 4, 5, 6)
    size = int(rng.integers(2, 4))
    proj = None

    def fn():
        nonlocal proj
        y = box_mean(a, size, (3, 4))
        if proj is None:
            proj = rng.normal(size=y.shape)
        return sum_(y * proj)

    return fn, [a]


def case_attention(rng):
    from pvckit.dynconv import AttentionHead

    while True:
        head = AttentionHead.create(2, 3, rng)
        x = _t(rng, 2, 2, 2, 3, 3)
        proj = rng.normal(size=(2, 3))
        params = [head.fc1_weight, head.fc1_bias, head.fc2_weight, head.fc2_bias]
        fn = lambda: sum_(attention_forward(head, x) * proj)  # noqa: E731
        if _relu_margin(fn) > 1e-3:
            return fn, [x] + params


def _relu_margin(fn) -> float:
    """Smallest |input| seen by the attention heads' ReLU during one forward pass."""
    seen = []
    orig = dynconv_module.relu

    def spy(t):
        seen.append(float(np.min(np.abs(t.data))))
        return orig(t)

    dynconv_module.relu = spy
    try:
        fn()
    finally:
        dynconv_module.relu = orig
    return min(seen, default=np.inf)


def case_dynconv(rng):
    # redraw until the heads' ReLU inputs are clear of the kink
    while True:
        fn, tensors = _dynconv_draw(rng)
        if _relu_margin(fn) > 1e-3:
            return fn, tensors


def _dynconv_draw(rng):
    c_in, c_out = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    transpose = bool(rng.random() < 0.3)
    k = (1, 3, 3) if transpose else (3, 3, 3)
    layer = DynConvLayer.create(c_in, c_out, k, rng, padding=(0, 0, 0) if transpose else (1, 1, 1),
                                transpose=transpose)
    for p in layer.parameters("l").values():
        # move biases off zero so every parameter is exercised
        p.data = p.data + rng.uniform(-0.2, 0.2, size=p.shape)
    x = _t(rng, 2, c_in, 3, 4, 4, lo=0.0, hi=1.0)
    prev = _t(rng, 2, 1, 3, 5, 5)
    dc = bool(rng.random() < 0.7)
    proj = None

    def fn():
        nonlocal proj
        y, _ = dynconv_forward(layer, x, DenseAttentionState(prev), dc)
        if proj is None:
            proj = rng.normal(size=y.shape)
        return sum_(y * proj)

    return fn, [x, prev] + list(layer.parameters("l").values())


def _pair(rng, shape):
    y = Tensor(rng.uniform(0.1, 1.0, size=shape))
    x = _t(rng, *shape, lo=0.1, hi=1.0)
    return y, x


def case_mae(rng):
    y, x = _pair(rng, (2, 1, 3, 4, 4))
    return (lambda: mae_loss(y, x)), [x]


def case_ssim(rng):
    y, x = _pair(rng, (1, 1, 4, 5, 5))
    p = SsimParams(window=3)
    return (lambda: ssim_loss(y, x, p)), [x]


def _sobel_responses(d):
    t = Tensor(d)
    return np.concatenate([np.abs(g.data).ravel() for _, axes in PLANES
                           if min(d.shape[a] for a in axes) >= 2 for g in _sobel_pair(t, axes)])


def case_sobel(rng):
    # redraw until every non-structural response is clear of the |.| kink
    while True:
        y, x = _pair(rng, (1, 1, 3, 4, 5))
        r = _sobel_responses(x.data - y.data)
        if np.min(r[r > 1e-12], initial=np.inf) > 1e-3:
            return (lambda: sobel_loss(y, x)), [x]


def case_imbv(rng):
    shape = (2, 1, 3, 4, 4)
    y, x = _pair(rng, shape)
    labels = np.stack([_labels(rng, shape[2:]) for _ in range(2)])
    return (lambda: imbv_loss(y, x, labels)), [x]


def case_composite(rng):
    shape = (1, 1, 4, 5, 5)
    y, x = _pair(rng, shape)
    labels = _labels(rng, shape[2:])
    w = LossWeights(*rng.uniform(0.05, 1.0, size=3))
    return (lambda: composite_loss(y, x, labels, w, SsimParams(window=3))), [x]


CASES = [
    ("conv3d", case_conv),
    ("conv3d_transpose", case_conv_transpose),
    ("elementwise", case_elementwise),
    ("fully_connected", case_fc),
    ("structural", case_structural),
    ("box_mean", case_box_mean),
    ("attention", case_attention),
    ("dynconv_forward", case_dynconv),
    ("mae_loss", case_mae),
    ("ssim_loss", case_ssim),
    ("sobel_loss", case_sobel),
    ("imbv_loss", case_imbv),
    ("composite_loss", case_composite),
]


def make_case(seed: int):
    kind, builder = CASES[seed % len(CASES)]
    rng = np.random.default_rng(seed)
    fn, tensors = builder(rng)
    return kind, fn, tensors
