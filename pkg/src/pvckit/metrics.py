"""Image-quality metrics, agreement statistics and cohort tables."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Sequence

import numpy as np

from pvckit.autodiff import Tensor, no_grad
from pvckit.errors import ContractError, DegenerateRegionError, DimensionError
from pvckit.losses import SsimParams, imbv, ssim_3plane
from pvckit.volume import Label, TemplateSet, as_array, as_labels


def _arrays(Y, X) -> tuple[np.ndarray, np.ndarray]:
    y, x = as_array(Y), as_array(X)
    if y.shape != x.shape:
        raise DimensionError(f"reference {y.shape} and image {x.shape} differ")
    return y, x


def heart_slices(templates) -> np.ndarray:
    """Indices of transverse (z) slices touching myocardium or blood pool."""
    lab = as_labels(templates)
    heart = np.isin(lab, [int(Label.MYOCARDIUM), int(Label.BLOOD_POOL)])
    return np.flatnonzero(heart.reshape(lab.shape[0], -1).any(axis=1))


def restrict(arr, slices: np.ndarray | None) -> np.ndarray:
    a = as_array(arr)
    return a if slices is None else a[slices]


def rmse(Y, X, slices: np.ndarray | None = None) -> float:
    y, x = _arrays(Y, X)
    y, x = restrict(y, slices), restrict(x, slices)
    return float(np.sqrt(np.mean((y - x) ** 2)))


def psnr(Y, X, slices: np.ndarray | None = None) -> float:
    """``20 log10(max Y) - 10 log10(MSE)`` in dB; ``inf`` when the images agree."""
    y, x = _arrays(Y, X)
    y, x = restrict(y, slices), restrict(x, slices)
    peak = float(np.max(y))
    if peak <= 0:
        raise ContractError("PSNR needs a reference with a positive peak")
    mse = float(np.mean((y - x) ** 2))
    if mse == 0:
        return math.inf
    return 20.0 * math.log10(peak) - 10.0 * math.log10(mse)


def ssim_eval(Y, X, slices: np.ndarray | None = None, params: SsimParams | None = None) -> float:
    """Three-plane SSIM of two volumes with gradients disabled."""
    y, x = _arrays(Y, X)
    y, x = restrict(y, slices), restrict(x, slices)
    with no_grad():
        val = ssim_3plane(Tensor(y[None, None]), Tensor(x[None, None]), params)
    return float(val.data)


@dataclass
class BlandAltman:
    bias: float
    sd: float
    loa_lower: float
    loa_upper: float
    n: int

    def within(self, a: Sequence[float], b: Sequence[float]) -> np.ndarray:
        d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
        return (d >= self.loa_lower) & (d <= self.loa_upper)


def bland_altman(a: Sequence[float], b: Sequence[float]) -> BlandAltman:
    """Bias and 95% limits of agreement of ``a - b`` (sample SD)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"need two equal-length lists, got {a.shape} and {b.shape}")
    if a.size < 2:
        raise ContractError("Bland-Altman needs at least two pairs")
    d = a - b
    bias = float(d.mean())
    sd = float(d.std(ddof=1))
    return BlandAltman(bias, sd, bias - 1.96 * sd, bias + 1.96 * sd, int(a.size))


@dataclass
class LinearFit:
    slope: float
    intercept: float
    r_squared: float
    pearson: float
    degenerate: bool = False


def linear_fit(x: Sequence[float], y: Sequence[float]) -> LinearFit:
    """Ordinary least squares ``y ~ slope * x + intercept``.

    A constant ``y`` leaves Pearson undefined; that case is returned with
    ``pearson = nan`` and ``degenerate = True``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionError(f"need two equal-length lists, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise ContractError("linear fit needs at least two points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    if sxx == 0:
        raise ContractError("x has zero variance")
    syy = float(dy @ dy)
    sxy = float(dx @ dy)
    slope = sxy / sxx
    intercept = float(y.mean() - slope * x.mean())
    if syy == 0:
        return LinearFit(slope, intercept, float("nan"), float("nan"), True)
    r = sxy / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    return LinearFit(slope, intercept, r * r, r)


@dataclass
class AgreementReport:
    method: str
    reference: str
    bias: float
    loa_lower: float
    loa_upper: float
    slope: float
    intercept: float
    r_squared: float
    pearson: float
    n: int


def agreement(method: str, values: Sequence[float], reference_name: str, reference: Sequence[float]) -> AgreementReport:
    """Bland-Altman of ``values - reference`` plus the fit of ``values`` on ``reference``."""
    ba = bland_altman(values, reference)
    fit = linear_fit(reference, values)
    return AgreementReport(method, reference_name, ba.bias, ba.loa_lower, ba.loa_upper,
                           fit.slope, fit.intercept, fit.r_squared, fit.pearson, ba.n)


@dataclass
class CaseMetrics:
    case_id: str
    method: str
    reference: str
    imbv: float
    ssim: float
    psnr: float  # dB
    rmse: float


METRIC_NAMES = ("imbv", "ssim", "psnr", "rmse")
CSV_COLUMNS = tuple(f.name for f in fields(CaseMetrics))


def case_metrics(case_id: str, method: str, reference_name: str, reference, image, templates: TemplateSet,
                 heart_only: bool = True) -> CaseMetrics:
    """All metrics for one image against one reference volume."""
    slices = heart_slices(templates) if heart_only else None
    try:
        value = imbv(image, templates)
    except DegenerateRegionError:
        value = float("nan")  # zero blood-pool mean in the image
    return CaseMetrics(
        case_id=case_id,
        method=method,
        reference=reference_name,
        imbv=value,
        ssim=ssim_eval(reference, image, slices),
        psnr=psnr(reference, image, slices),
        rmse=rmse(reference, image, slices),
    )


def _fmt(v: float) -> str:
    return repr(float(v))


def metrics_csv(rows: Iterable[CaseMetrics]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        writer.writerow([r.case_id, r.method, r.reference] + [_fmt(getattr(r, m)) for m in METRIC_NAMES])
    return buf.getvalue()


def read_metrics_csv(text: str) -> list[CaseMetrics]:
    reader = csv.DictReader(io.StringIO(text))
    out = []
    for row in reader:
        out.append(CaseMetrics(row["case_id"], row["method"], row["reference"],
                               *(float(row[m]) for m in METRIC_NAMES)))
    return out


def format_mean_sd(mean: float, sd: float, digits: int = 3) -> str:
    return f"{mean:.{digits}f}±{sd:.{digits}f}"


def cohort_table(cases: Sequence[CaseMetrics]) -> dict:
    """``{reference: {method: {metric: {"mean", "sd", "n", "text"}}}}`` with sample SD."""
    if not cases:
        raise ContractError("cohort table needs at least one case")
    groups: dict[tuple[str, str], list[CaseMetrics]] = {}
    for c in cases:
        groups.setdefault((c.reference, c.method), []).append(c)
    table: dict = {}
    for (ref, method), rows in groups.items():
        entry = {}
        for m in METRIC_NAMES:
            vals = np.array([getattr(r, m) for r in rows], dtype=np.float64)
            finite = vals[np.isfinite(vals)]
            mean = float(finite.mean()) if finite.size else float(vals.mean())
            sd = float(finite.std(ddof=1)) if finite.size > 1 else 0.0
            entry[m] = {"mean": mean, "sd": sd, "n": int(vals.size), "text": format_mean_sd(mean, sd)}
        table.setdefault(ref, {})[method] = entry
    return table


def cohort_csv(table: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["reference", "method", "metric", "mean", "sd", "n", "text"])
    for ref, methods in table.items():
        for method, entry in methods.items():
            for m in METRIC_NAMES:
                e = entry[m]
                writer.writerow([ref, method, m, _fmt(e["mean"]), _fmt(e["sd"]), e["n"], e["text"]])
    return buf.getvalue()


def summary_json(table: dict, agreements: Sequence[AgreementReport]) -> str:
    doc = {"cohort": table, "agreement": [asdict(a) for a in agreements]}
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=True)
