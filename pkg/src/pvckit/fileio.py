"""On-disk formats: volume/label files and binary model checkpoints.

Volume file
    ``<stem>.json`` header plus ``<stem>.raw`` payload.  The header holds
    ``dims`` (D, H, W), ``spacing_mm``, ``dtype`` (``float32`` for activity,
    ``uint16`` for label maps, both little-endian) and ``label_map``.

Checkpoint
    ``b"PVCK"``, format version (u32 LE), header length (u64 LE), a UTF-8
    JSON header, then every tensor as contiguous little-endian float64 in
    header order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from pvckit.errors import ContractError
from pvckit.optim import AdamState
from pvckit.volume import TemplateSet, Volume

MAGIC = b"PVCK"
CHECKPOINT_VERSION = 1
VOLUME_FORMAT = "pvckit-volume"

_DTYPES = {"float32": np.dtype("<f4"), "uint16": np.dtype("<u2")}


def _stem(path) -> Path:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p


def write_volume(path, obj: Volume | TemplateSet, spacing=None) -> Path:
    """Write a volume or label map to ``<path>.json`` + ``<path>.raw``."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(obj, TemplateSet):
        data = obj.labels.astype(_DTYPES["uint16"])
        tag, is_label = "uint16", True
        spacing = spacing or (4.0, 4.0, 4.0)
    else:
        data = obj.data.astype(_DTYPES["float32"])
        tag, is_label = "float32", False
        spacing = obj.spacing
    header = {
        "format": VOLUME_FORMAT,
        "dims": list(data.shape),
        "spacing_mm": [float(s) for s in spacing],
        "dtype": tag,
        "label_map": is_label,
    }
    stem.with_suffix(".json").write_text(json.dumps(header, indent=2) + "\n")
    stem.with_suffix(".raw").write_bytes(np.ascontiguousarray(data).tobytes())
    return stem


def read_volume(path) -> Volume | TemplateSet:
    stem = _stem(path)
    header = json.loads(stem.with_suffix(".json").read_text())
    if header.get("format") != VOLUME_FORMAT:
        raise ContractError(f"{stem}.json is not a {VOLUME_FORMAT} header")
    dtype = _DTYPES.get(header["dtype"])
    if dtype is None:
        raise ContractError(f"unknown data type tag {header['dtype']!r}")
    dims = tuple(int(d) for d in header["dims"])
    raw = stem.with_suffix(".raw").read_bytes()
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) != expected:
        raise ContractError(f"{stem}.raw holds {len(raw)} bytes, header implies {expected}")
    arr = np.frombuffer(raw, dtype=dtype).reshape(dims)
    if header.get("label_map"):
        return TemplateSet(arr.astype(np.uint16))
    return Volume(arr.astype(np.float64), tuple(header["spacing_mm"]))


@dataclass
class Checkpoint:
    network: dict
    params: dict[str, np.ndarray]
    adam: AdamState = field(default_factory=AdamState)
    meta: dict = field(default_factory=dict)

    def param_hash(self) -> str:
        return params_hash(self.params)


def params_hash(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in params:
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return h.hexdigest()


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    offset = 0

    def add(group: str, name: str, arr: np.ndarray):
        nonlocal offset
        b = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(b)
        offset += len(b)

    for name, arr in ckpt.params.items():
        add("param", name, arr)
    for name, arr in ckpt.adam.m.items():
        add("adam_m", name, arr)
    for name, arr in ckpt.adam.v.items():
        add("adam_v", name, arr)
    header = {
        "network": ckpt.network,
        "adam_step": ckpt.adam.step,
        "meta": ckpt.meta,
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ContractError(f"{path} is not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        if start + 8 * count > len(raw):
            raise ContractError(f"{path} is truncated at tensor {e['name']!r}")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start).reshape(e["shape"])
        groups[e["group"]][e["name"]] = arr.astype(np.float64)
    adam = AdamState(groups["adam_m"], groups["adam_v"], int(header["adam_step"]))
    return Checkpoint(header["network"], groups["param"], adam, header.get("meta", {}))
