"""Deterministic tensor archives (checkpoints and attention traces).

Layout, all integers little-endian::

    magic      4 bytes   b"ATTA"
    version    uint32    1
    header_len uint32    length of the JSON header in bytes
    header     UTF-8 JSON, keys sorted, no whitespace:
               {"meta": {...}, "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    payload    raw little-endian C-order buffers, concatenated in header order

Offsets are relative to the start of the payload. Tensors are stored in
sorted-name order and nothing time-dependent is written, so the same content
always produces the same bytes.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import ValidationError

MAGIC = b"ATTA"
VERSION = 1

_DTYPES = {
    "float32": "<f4",
    "float64": "<f8",
    "int64": "<i8",
    "int32": "<i4",
    "uint8": "u1",
    "bool": "?",
}


def _as_numpy(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.ascontiguousarray(value)
    name = arr.dtype.name
    if name not in _DTYPES:
        raise ValidationError(f"unsupported dtype {name}")
    return arr.astype(_DTYPES[name], copy=False)


def to_bytes(tensors: dict, meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = _as_numpy(tensors[name])
        buf = arr.tobytes(order="C")
        entries.append({"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(header)) + header + b"".join(chunks)


def from_bytes(blob: bytes, as_torch: bool = True):
    """Returns ``(tensors, meta)``."""
    if blob[:4] != MAGIC:
        raise ValidationError("not a tensor archive (bad magic)")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise ValidationError(f"unsupported archive version {version}")
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    base = 12 + hlen
    out = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        raw = blob[start:start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise ValidationError(f"archive truncated at tensor {e['name']!r}")
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
        out[e["name"]] = torch.from_numpy(arr) if as_torch else arr
    return out, header["meta"]


def save(path, tensors: dict, meta: dict | None = None) -> Path:
    """Atomic write: temp file then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(tensors, meta))
    os.replace(tmp, path)
    return path


def load(path, as_torch: bool = True):
    return from_bytes(Path(path).read_bytes(), as_torch)


# -- training state ------------------------------------------------------------

def save_training_state(path, trainer, meta: dict | None = None) -> Path:
    tensors = {f"model/{k}": v for k, v in trainer.model.state_dict().items()}
    tensors.update({f"optim/{k}": v for k, v in trainer.optimizer_tensors().items()})
    m = dict(meta or {})
    m.update(step=trainer.step, topology=trainer.model.topology)
    return save(path, tensors, m)


def load_model_state(model, tensors: dict) -> None:
    sd = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    missing = set(model.state_dict()) ^ set(sd)
    if missing:
        raise ValidationError(f"checkpoint does not match model: {sorted(missing)[:5]}")
    model.load_state_dict(sd)


def load_training_state(path, trainer) -> dict:
    tensors, meta = load(path)
    load_model_state(trainer.model, tensors)
    trainer.load_optimizer_tensors({k[len("optim/"):]: v for k, v in tensors.items() if k.startswith("optim/")})
    trainer.step = int(meta["step"])
    return meta
