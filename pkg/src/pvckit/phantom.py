"""Synthetic cardiac phantoms with known IMBV, rotation augmentation and splits."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.ndimage import rotate

from pvckit.errors import ContractError, DegenerateRegionError
from pvckit.losses import imbv
from pvckit.pvc import PsfModel, blur
from pvckit.volume import Label, TemplateSet, Volume


@dataclass
class Ellipsoid:
    """Axis-aligned ellipsoid in voxel units; ``center`` is relative to the grid centre."""

    center: tuple[float, float, float]
    radii: tuple[float, float, float]

    def mask(self, dims) -> np.ndarray:
        grids = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")
        r2 = np.zeros(dims)
        for g, n, c, r in zip(grids, dims, self.center, self.radii):
            r2 += ((g - (n - 1) / 2.0 - c) / r) ** 2
        return r2 <= 1.0


@dataclass
class PhantomSpec:
    """Geometry (voxel units), activities and noise for one synthetic case.

    ``counts_scale`` is the expected count per unit activity; 0 disables
    Poisson noise.  The myocardium is the shell between the blood pool and
    ``blood_pool`` radii grown by ``wall_thickness``.
    """

    dims: tuple[int, int, int] = (32, 48, 48)
    spacing: tuple[float, float, float] = (4.0, 4.0, 4.0)
    blood_pool: Ellipsoid = field(default_factory=lambda: Ellipsoid((0.0, 0.0, 0.0), (5.0, 4.5, 4.5)))
    wall_thickness: float = 2.5
    liver: Ellipsoid = field(default_factory=lambda: Ellipsoid((9.0, 8.0, -6.0), (5.0, 9.0, 11.0)))
    lungs: tuple[Ellipsoid, ...] = field(
        default_factory=lambda: (
            Ellipsoid((-2.0, 0.0, -14.0), (11.0, 12.0, 6.0)),
            Ellipsoid((-2.0, 0.0, 14.0), (11.0, 12.0, 6.0)),
        )
    )
    activity: dict = field(
        default_factory=lambda: {"myocardium": 1.0, "blood_pool": 4.0, "liver": 2.0, "lung": 0.3, "background": 0.5}
    )
    psf: PsfModel = field(default_factory=PsfModel)
    counts_scale: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        if min(self.activity.values()) < 0:
            raise ContractError("activities must be non-negative")
        if self.counts_scale < 0:
            raise ContractError("counts_scale must be non-negative")

    @property
    def myocardium_outer(self) -> Ellipsoid:
        bp = self.blood_pool
        return Ellipsoid(bp.center, tuple(r + self.wall_thickness for r in bp.radii))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        for key in ("blood_pool", "liver"):
            if key in d and isinstance(d[key], dict):
                d[key] = Ellipsoid(**d[key])
        if "lungs" in d:
            d["lungs"] = tuple(Ellipsoid(**e) if isinstance(e, dict) else e for e in d["lungs"])
        if "psf" in d and isinstance(d["psf"], dict):
            d["psf"] = PsfModel(**d["psf"])
        return cls(**d)


def paper_scale_spec(**overrides) -> PhantomSpec:
    """50 x 70 x 70 grid at 4 mm, organs scaled up accordingly."""
    s = 70 / 48
    base = PhantomSpec(
        dims=(50, 70, 70),
        blood_pool=Ellipsoid((0.0, 0.0, 0.0), (6.0, 5.0, 5.0)),
        liver=Ellipsoid((13.0, 12.0, -9.0), (7.0, 9.0 * s, 11.0 * s)),
        lungs=(
            Ellipsoid((-3.0, 0.0, -20.0), (16.0, 17.0, 9.0)),
            Ellipsoid((-3.0, 0.0, 20.0), (16.0, 17.0, 9.0)),
        ),
    )
    return replace(base, **overrides)


def small_spec(**overrides) -> PhantomSpec:
    """16 x 24 x 24 grid used for fast training runs."""
    base = PhantomSpec(
        dims=(16, 24, 24),
        blood_pool=Ellipsoid((0.0, 0.0, 0.0), (3.0, 3.0, 3.0)),
        wall_thickness=2.0,
        liver=Ellipsoid((5.0, 5.0, -4.0), (3.0, 5.0, 6.0)),
        lungs=(
            Ellipsoid((-1.0, 0.0, -8.0), (6.0, 7.0, 3.5)),
            Ellipsoid((-1.0, 0.0, 8.0), (6.0, 7.0, 3.5)),
        ),
    )
    return replace(base, **overrides)


@dataclass
class PhantomCase:
    truth: Volume
    templates: TemplateSet
    observed: Volume
    true_imbv: float
    spec: PhantomSpec


def label_map(spec: PhantomSpec) -> TemplateSet:
    """Background, then lungs, liver, myocardial shell and blood pool, later winning."""
    dims = spec.dims
    labels = np.full(dims, int(Label.BACKGROUND), dtype=np.uint16)
    for lung in spec.lungs:
        labels[lung.mask(dims)] = Label.LUNG
    labels[spec.liver.mask(dims)] = Label.LIVER
    labels[spec.myocardium_outer.mask(dims)] = Label.MYOCARDIUM
    labels[spec.blood_pool.mask(dims)] = Label.BLOOD_POOL
    t = TemplateSet(labels)
    try:
        t.check_cardiac()
    except DegenerateRegionError as e:
        raise DegenerateRegionError(f"degenerate phantom geometry: {e}") from None
    return t


def generate(spec: PhantomSpec) -> PhantomCase:
    """Piecewise-constant truth, its blur, and optional Poisson noise; seeded."""
    templates = label_map(spec)
    lut = np.zeros(len(Label))
    for label in Label:
        lut[int(label)] = spec.activity[label.name.lower()]
    truth = Volume(lut[templates.labels.astype(np.intp)], spec.spacing)
    clean = blur(truth, spec.psf)
    if spec.counts_scale > 0:
        rng = np.random.default_rng(spec.seed)
        observed = clean.like(rng.poisson(clean.data * spec.counts_scale) / spec.counts_scale)
    else:
        observed = clean
    return PhantomCase(truth, templates, observed, imbv(truth, templates), spec)


def cohort_specs(base: PhantomSpec, n: int, seed: int, jitter: float = 0.15) -> list[PhantomSpec]:
    """``n`` specs with perturbed geometry and activities, deterministic in ``seed``.

    The blood pool stays hotter than the myocardium in every case.
    """
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(n):
        def scale(e: Ellipsoid, shift: float) -> Ellipsoid:
            radii = tuple(r * (1.0 + rng.uniform(-jitter, jitter)) for r in e.radii)
            center = tuple(c + rng.uniform(-shift, shift) for c in e.center)
            return Ellipsoid(center, radii)

        act = dict(base.activity)
        act["myocardium"] = base.activity["myocardium"] * (1.0 + rng.uniform(-jitter, jitter))
        act["blood_pool"] = base.activity["blood_pool"] * (1.0 + rng.uniform(-jitter, jitter))
        for key in ("liver", "lung", "background"):
            act[key] = base.activity[key] * (1.0 + rng.uniform(-jitter, jitter))
        specs.append(
            replace(
                base,
                blood_pool=scale(base.blood_pool, 1.0),
                wall_thickness=base.wall_thickness * (1.0 + rng.uniform(-jitter, jitter)),
                liver=scale(base.liver, 1.0),
                lungs=tuple(scale(l, 1.0) for l in base.lungs),
                activity=act,
                seed=int(rng.integers(0, 2**31 - 1)),
            )
        )
    return specs


def ct_like(templates: TemplateSet) -> np.ndarray:
    """Contrast-CT stand-in: a fixed intensity per organ, for dual-channel input."""
    lut = np.zeros(len(Label))
    lut[Label.BACKGROUND] = 0.3
    lut[Label.MYOCARDIUM] = 0.6
    lut[Label.BLOOD_POOL] = 1.0
    lut[Label.LIVER] = 0.5
    lut[Label.LUNG] = 0.05
    return lut[templates.labels.astype(np.intp)]


# ------------------------------------------------------------------ augmentation


def _plane(axis: int) -> tuple[int, int]:
    return tuple(a for a in range(3) if a != axis)


def rotate_array(arr: np.ndarray, angle: float, axis: int, order: int = 1) -> np.ndarray:
    """Rotate about ``axis`` in place on the same grid.

    Multiples of 90 degrees on a square plane are exact voxel permutations;
    other angles use trilinear (``order=1``) or nearest (``order=0``)
    resampling with zero fill.
    """
    plane = _plane(axis)
    quarter = angle / 90.0
    if quarter == int(quarter) and arr.shape[plane[0]] == arr.shape[plane[1]]:
        return np.rot90(arr, k=int(quarter) % 4, axes=plane).copy()
    out = rotate(arr, angle, axes=plane, reshape=False, order=order, mode="constant", cval=0.0, prefilter=False)
    return out


def rotate_volume(v: Volume, angle: float, axis: int) -> Volume:
    return v.like(np.maximum(rotate_array(v.data, angle, axis, order=1), 0.0))


def rotate_templates(t: TemplateSet, angle: float, axis: int) -> TemplateSet:
    return TemplateSet(rotate_array(t.labels.astype(np.int64), angle, axis, order=0).astype(np.uint16))


def rotation_angles(step_degrees: float = 30) -> list[float]:
    if step_degrees <= 0 or not math.isclose(360 / step_degrees, round(360 / step_degrees)):
        raise ContractError(f"step {step_degrees} does not divide 360")
    n = int(round(360 / step_degrees))
    return [step_degrees * k for k in range(1, n)]


def augment_rotations(volumes, step_degrees: float = 30, axes: int = 3) -> list:
    """Originals followed by every rotation at ``step, 2*step, ... < 360`` about each axis.

    Accepts one :class:`Volume` / :class:`TemplateSet` or a list of them;
    ``n`` inputs give ``n + n * axes * (360/step - 1)`` outputs.
    """
    items = volumes if isinstance(volumes, (list, tuple)) else [volumes]
    angles = rotation_angles(step_degrees)
    out = list(items)
    for item in items:
        for axis in range(axes):
            for angle in angles:
                if isinstance(item, TemplateSet):
                    out.append(rotate_templates(item, angle, axis))
                else:
                    out.append(rotate_volume(item, angle, axis))
    return out


def rotation_plan(n_items: int, step_degrees: float = 30, axes: int = 3) -> list[tuple[int, float | None, int | None]]:
    """(item index, angle, axis) in the same order as :func:`augment_rotations`."""
    angles = rotation_angles(step_degrees)
    plan: list[tuple[int, float | None, int | None]] = [(i, None, None) for i in range(n_items)]
    for i in range(n_items):
        for axis in range(axes):
            for angle in angles:
                plan.append((i, angle, axis))
    return plan


# ------------------------------------------------------------------ splits


def split_counts(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items."""
    fr = np.asarray(fractions, dtype=np.float64)
    if np.any(fr < 0) or not math.isclose(fr.sum(), 1.0, abs_tol=1e-9):
        raise ContractError(f"fractions must be non-negative and sum to 1, got {list(fractions)}")
    raw = fr * n
    counts = np.floor(raw + 1e-9).astype(int)
    rem = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    for i in order[:rem]:
        counts[i] += 1
    return counts.tolist()


def dataset_split(cases: Sequence, fractions: Sequence[float] = (15 / 28, 3 / 28, 10 / 28), seed: int = 0):
    """Shuffle deterministically and cut into (train, val, test)."""
    if len(fractions) != 3:
        raise ContractError("need train/val/test fractions")
    counts = split_counts(len(cases), fractions)
    for name, c, f in zip(("train", "val", "test"), counts, fractions):
        if f > 0 and c == 0:
            raise ContractError(f"{name} split is empty for {len(cases)} cases")
    perm = np.random.default_rng(seed).permutation(len(cases))
    parts, start = [], 0
    for c in counts:
        parts.append([cases[i] for i in perm[start:start + c]])
        start += c
    return tuple(parts)
