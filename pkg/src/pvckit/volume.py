"""Volume and organ-template containers shared by every stage."""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from pvckit.errors import ContractError, DegenerateRegionError, DimensionError


class Label(IntEnum):
    BACKGROUND = 0
    MYOCARDIUM = 1
    BLOOD_POOL = 2
    LIVER = 3
    LUNG = 4


@dataclass
class Volume:
    """Non-negative activity on a ``(D, H, W)`` grid with spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (4.0, 4.0, 4.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.data.ndim != 3:
            raise DimensionError(f"volume must be 3-d, got shape {self.data.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ContractError(f"spacing must be 3 positive values, got {self.spacing}")
        if np.any(self.data < 0):
            raise ContractError("volume activities must be non-negative")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def like(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.spacing)


@dataclass
class TemplateSet:
    """Integer label map that partitions a volume grid into organ regions."""

    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise DimensionError(f"label map must be 3-d, got shape {self.labels.shape}")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise ContractError("label map must hold integers")
        valid = np.isin(self.labels, [int(v) for v in Label])
        if not valid.all():
            raise ContractError("label map holds values outside the organ label set")
        self.labels = self.labels.astype(np.uint16)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape

    def mask(self, label: Label | int) -> np.ndarray:
        return self.labels == int(label)

    def check_cardiac(self) -> None:
        for lab in (Label.MYOCARDIUM, Label.BLOOD_POOL):
            if not self.mask(lab).any():
                raise DegenerateRegionError(f"{lab.name.lower()} region is empty")

    def shifted(self, offset: tuple[int, int, int]) -> "TemplateSet":
        """Translate labels by whole voxels; uncovered voxels become background."""
        out = np.full(self.labels.shape, int(Label.BACKGROUND), dtype=np.uint16)
        src, dst = [], []
        for n, o in zip(self.labels.shape, offset):
            o = int(o)
            if abs(o) >= n:
                return TemplateSet(out)
            src.append(slice(max(0, -o), n - max(0, o)))
            dst.append(slice(max(0, o), n - max(0, -o)))
        out[tuple(dst)] = self.labels[tuple(src)]
        return TemplateSet(out)


def as_array(v) -> np.ndarray:
    if isinstance(v, Volume):
        return v.data
    return np.asarray(v, dtype=np.float64)


def as_labels(t) -> np.ndarray:
    if isinstance(t, TemplateSet):
        return t.labels
    return np.asarray(t)
