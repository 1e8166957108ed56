"""Phantom cohorts on disk and the (input, label, templates) samples used for training."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from pvckit.errors import ContractError, DegenerateRegionError, DimensionError
from pvckit.fileio import read_volume, write_volume
from pvckit.phantom import PhantomCase, PhantomSpec, ct_like, rotate_templates, rotate_volume, rotation_plan
from pvckit.pvc import PsfModel, iy_correct
from pvckit.volume import TemplateSet, Volume

MANIFEST = "manifest.json"


def case_name(i: int) -> str:
    return f"case_{i:03d}"


def write_case(directory, case: PhantomCase, case_id: str) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_volume(d / "observed", case.observed)
    write_volume(d / "truth", case.truth)
    write_volume(d / "labels", case.templates, spacing=case.truth.spacing)
    meta = {"case_id": case_id, "true_imbv": case.true_imbv, "seed": case.spec.seed, "spec": case.spec.to_dict()}
    (d / "case.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return d


def read_case(directory) -> tuple[str, PhantomCase]:
    d = Path(directory)
    meta = json.loads((d / "case.json").read_text())
    observed = read_volume(d / "observed")
    truth = read_volume(d / "truth")
    templates = read_volume(d / "labels")
    if not isinstance(templates, TemplateSet):
        raise ContractError(f"{d / 'labels'} is not a label map")
    spec = PhantomSpec.from_dict(meta["spec"])
    return meta["case_id"], PhantomCase(truth, templates, observed, float(meta["true_imbv"]), spec)


def write_cohort(out_dir, cases: Sequence[PhantomCase], extra: dict | None = None) -> Path:
    """One sub-directory per case plus a top-level manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, case in enumerate(cases):
        name = case_name(i)
        write_case(out / name, case, name)
        entries.append({"case_id": name, "dir": name, "true_imbv": case.true_imbv, "seed": case.spec.seed})
    manifest = {"n_cases": len(cases), "cases": entries, **(extra or {})}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def read_cohort(data_dir) -> list[tuple[str, PhantomCase]]:
    root = Path(data_dir)
    path = root / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {root}")
    manifest = json.loads(path.read_text())
    return [read_case(root / e["dir"]) for e in manifest["cases"]]


@dataclass
class Sample:
    case_id: str
    x: np.ndarray  # [C, D, H, W] network input
    y: np.ndarray  # [1, D, H, W] training label (iY output)
    templates: TemplateSet
    observed: Volume
    truth: Volume | None = None

    @property
    def label(self) -> Volume:
        return self.observed.like(self.y[0])


def network_input(observed: Volume, templates: TemplateSet, channels: int) -> np.ndarray:
    """Observed activity, optionally stacked with a CT-like anatomical channel."""
    if channels == 1:
        return observed.data[None].copy()
    if channels == 2:
        return np.stack([observed.data, ct_like(templates)])
    raise DimensionError(f"unsupported channel count {channels}")


def make_sample(case_id: str, case: PhantomCase, channels: int = 1, iy_iterations: int = 10,
                psf: PsfModel | None = None) -> Sample:
    label = iy_correct(case.observed, case.templates, psf or case.spec.psf, iy_iterations)
    return Sample(case_id, network_input(case.observed, case.templates, channels), label.data[None],
                  case.templates, case.observed, case.truth)


def augment_samples(samples: Sequence[Sample], step_degrees: float = 30, axes: int = 3) -> list[Sample]:
    """Originals plus rotated copies of input, label and templates together."""
    out = []
    for idx, angle, axis in rotation_plan(len(samples), step_degrees, axes):
        s = samples[idx]
        if angle is None:
            out.append(s)
            continue
        obs = rotate_volume(s.observed, angle, axis)
        lab = rotate_volume(s.label, angle, axis)
        tmpl = rotate_templates(s.templates, angle, axis)
        try:
            tmpl.check_cardiac()
        except DegenerateRegionError:
            # heart rotated off-grid; keep the original in its place
            out.append(s)
            continue
        x = network_input(obs, tmpl, s.x.shape[0])
        out.append(Sample(f"{s.case_id}@{axis}:{angle:g}", x, lab.data[None], tmpl, obs, None))
    return out
