"""Training losses: MAE, three-plane SSIM, three-plane Sobel and IMBV.

All losses take ``(Y, X)`` with ``Y`` the reference (training label) and
``X`` the network output, both shaped ``[N, 1, D, H, W]``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from pvckit.autodiff import Tensor, abs_, as_tensor, box_mean, mean, mul, pad, slice_, sum_
from pvckit.errors import DegenerateRegionError, DimensionError, WindowError
from pvckit.volume import Label, TemplateSet, Volume, as_labels

log = logging.getLogger(__name__)

# (name, in-plane axes) for a [N, C, D, H, W] tensor
PLANES = (("transverse", (3, 4)), ("coronal", (2, 4)), ("sagittal", (2, 3)))


@dataclass
class LossWeights:
    lambda_a: float = 0.8  # SSIM
    lambda_b: float = 0.1  # Sobel
    lambda_c: float = 0.1  # IMBV

    def __post_init__(self):
        if min(self.lambda_a, self.lambda_b, self.lambda_c) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class SsimParams:
    window: int = 11
    k1: float = 0.01
    k2: float = 0.03
    data_range: float | None = None  # None: max of the reference batch

    def constants(self, reference: np.ndarray) -> tuple[float, float]:
        r = self.data_range if self.data_range is not None else float(np.max(reference))
        if r <= 0:
            r = 1.0
        return (self.k1 * r) ** 2, (self.k2 * r) ** 2


def _pair(Y, X) -> tuple[Tensor, Tensor]:
    Y, X = as_tensor(Y), as_tensor(X)
    if Y.shape != X.shape:
        raise DimensionError(f"reference shape {Y.shape} != output shape {X.shape}")
    if Y.ndim != 5:
        raise DimensionError(f"expected [N, 1, D, H, W] volumes, got {Y.shape}")
    return Y, X


def mae_loss(Y, X) -> Tensor:
    Y, X = _pair(Y, X)
    return mean(abs_(Y - X))


_warned: set[tuple] = set()  # warn once per (plane, extent, window)


def ssim_planes(Y, X, params: SsimParams | None = None) -> dict[str, Tensor]:
    """Mean SSIM per plane orientation, skipping orientations thinner than the window."""
    Y, X = _pair(Y, X)
    p = params or SsimParams()
    c1, c2 = p.constants(Y.data)
    out: dict[str, Tensor] = {}
    for name, axes in PLANES:
        if min(Y.shape[a] for a in axes) < p.window:
            key = (name, tuple(Y.shape[2:]), p.window)
            if key not in _warned:
                _warned.add(key)
                log.warning("ssim: skipping %s plane, extent below window %d", name, p.window)
            continue
        mu_y = box_mean(Y, p.window, axes)
        mu_x = box_mean(X, p.window, axes)
        yy = box_mean(mul(Y, Y), p.window, axes)
        xx = box_mean(mul(X, X), p.window, axes)
        xy = box_mean(mul(X, Y), p.window, axes)
        mu_yx = mu_y * mu_x
        mu_yy = mu_y * mu_y
        mu_xx = mu_x * mu_x
        cov = xy - mu_yx
        var_sum = (yy - mu_yy) + (xx - mu_xx)
        num = (2.0 * mu_yx + c1) * (2.0 * cov + c2)
        den = (mu_yy + mu_xx + c1) * (var_sum + c2)
        out[name] = mean(num / den)
    if not out:
        raise WindowError(f"every plane has an extent below the {p.window}-voxel SSIM window: {Y.shape[2:]}")
    return out


def ssim_3plane(Y, X, params: SsimParams | None = None) -> Tensor:
    """Equal-weight average of transverse, coronal and sagittal SSIM."""
    planes = list(ssim_planes(Y, X, params).values())
    total = planes[0]
    for t in planes[1:]:
        total = total + t
    return total * (1.0 / len(planes))


def ssim_loss(Y, X, params: SsimParams | None = None) -> Tensor:
    return 1.0 - ssim_3plane(Y, X, params)


def _sobel_pair(t: Tensor, axes: tuple[int, int]) -> tuple[Tensor, Tensor]:
    a, b = axes
    widths = [(0, 0)] * t.ndim
    widths[a] = widths[b] = (1, 1)
    tp = pad(t, widths, mode="reflect")
    na, nb = t.shape[a], t.shape[b]

    def shift(src: Tensor, axis: int, k: int, n: int) -> Tensor:
        key = [slice(None)] * src.ndim
        key[axis] = slice(k, k + n)
        return slice_(src, tuple(key))

    def smooth(src: Tensor, axis: int, n: int) -> Tensor:
        return shift(src, axis, 0, n) + 2.0 * shift(src, axis, 1, n) + shift(src, axis, 2, n)

    def diff(src: Tensor, axis: int, n: int) -> Tensor:
        return shift(src, axis, 2, n) - shift(src, axis, 0, n)

    grad_b = smooth(diff(tp, b, nb), a, na)  # derivative across the second in-plane axis
    grad_a = smooth(diff(tp, a, na), b, nb)
    return grad_a, grad_b


def sobel_loss(Y, X) -> Tensor:
    """MAE between Sobel gradient maps, averaged over both maps and three planes.

    Sobel is linear, so the gradients of ``X - Y`` are taken directly.
    """
    Y, X = _pair(Y, X)
    d = X - Y
    terms = []
    for _, axes in PLANES:
        if min(d.shape[a] for a in axes) < 2:
            continue
        ga, gb = _sobel_pair(d, axes)
        terms.append((mean(abs_(ga)) + mean(abs_(gb))) * 0.5)
    if not terms:
        raise WindowError(f"volume {d.shape[2:]} too thin for a 3x3 Sobel operator")
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def _region_masks(labels: np.ndarray, shape: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
    if labels.shape != tuple(shape):
        raise DimensionError(f"label map {labels.shape} does not match volume {tuple(shape)}")
    myo = labels == int(Label.MYOCARDIUM)
    bp = labels == int(Label.BLOOD_POOL)
    if not myo.any():
        raise DegenerateRegionError("myocardium region is empty")
    if not bp.any():
        raise DegenerateRegionError("blood-pool region is empty")
    return myo, bp


def imbv(volume, templates):
    """Mean myocardial activity over mean left-ventricular blood-pool activity.

    Accepts a :class:`Volume`, a 3-d array or a Tensor whose trailing three
    axes are the grid.  Tensors give a differentiable 0-d Tensor, anything
    else a float.
    """
    labels = as_labels(templates)
    if isinstance(volume, Tensor):
        grid = volume.shape[-3:]
        myo, bp = _region_masks(labels, grid)
        v = volume
        if v.ndim != 3:
            v = v.reshape(grid)
        m_myo = sum_(mul(v, myo.astype(np.float64))) * (1.0 / myo.sum())
        m_bp = sum_(mul(v, bp.astype(np.float64))) * (1.0 / bp.sum())
        if float(m_bp.data) == 0.0:
            raise DegenerateRegionError("blood-pool mean is zero")
        return m_myo / m_bp
    arr = volume.data if isinstance(volume, Volume) else np.asarray(volume, dtype=np.float64)
    arr = arr.reshape(arr.shape[-3:])
    myo, bp = _region_masks(labels, arr.shape)
    m_bp = arr[bp].mean()
    if m_bp == 0:
        raise DegenerateRegionError("blood-pool mean is zero")
    return float(arr[myo].mean() / m_bp)


def _batch_labels(templates, n: int) -> list[np.ndarray]:
    if isinstance(templates, TemplateSet):
        return [templates.labels] * n
    if isinstance(templates, np.ndarray):
        if templates.ndim == 3:
            return [templates] * n
        return [templates[i] for i in range(templates.shape[0])]
    labels = [as_labels(t) for t in templates]
    if len(labels) != n:
        raise DimensionError(f"{len(labels)} template sets for a batch of {n}")
    return labels


def imbv_loss(Y, X, templates) -> Tensor:
    """Batch mean of ``|IMBV(X_i) - IMBV(Y_i)|`` using each item's templates."""
    Y, X = _pair(Y, X)
    n = Y.shape[0]
    labels = _batch_labels(templates, n)
    total = None
    for i in range(n):
        yi = slice_(Y, (i, 0))
        xi = slice_(X, (i, 0))
        if not np.any(xi.data[labels[i] == int(Label.BLOOD_POOL)]):
            # IMBV of an all-zero blood pool is undefined; the item adds nothing
            log.debug("imbv_loss: item %d has a zero blood-pool output, skipped", i)
            term = sum_(xi) * 0.0
        else:
            term = abs_(imbv(xi, labels[i]) - imbv(yi, labels[i]))
        total = term if total is None else total + term
    return total * (1.0 / n)


def loss_components(Y, X, templates=None, weights: LossWeights | None = None,
                    ssim_params: SsimParams | None = None) -> dict[str, Tensor]:
    """Individual loss terms; ``imbv`` is omitted when ``lambda_c`` is 0."""
    w = weights or LossWeights()
    parts = {
        "mae": mae_loss(Y, X),
        "ssim": ssim_loss(Y, X, ssim_params),
        "sobel": sobel_loss(Y, X),
    }
    if w.lambda_c > 0:
        if templates is None:
            raise ValueError("templates are required when lambda_c > 0")
        parts["imbv"] = imbv_loss(Y, X, templates)
    return parts


def combine(parts: dict[str, Tensor], weights: LossWeights | None = None) -> Tensor:
    w = weights or LossWeights()
    total = parts["mae"] + w.lambda_a * parts["ssim"] + w.lambda_b * parts["sobel"]
    if "imbv" in parts:
        total = total + w.lambda_c * parts["imbv"]
    return total


def composite_loss(Y, X, templates=None, weights: LossWeights | None = None,
                   ssim_params: SsimParams | None = None) -> Tensor:
    """MAE + lambda_a * SSIM + lambda_b * Sobel + lambda_c * IMBV."""
    return combine(loss_components(Y, X, templates, weights, ssim_params), weights)
