"""W+ latents, attribute edit directions and the direction-bank archive.

A W+ latent is a plain ``(n_layers, d_latent)`` float array. Directions are
stored with unit Frobenius norm plus a ``calibration_scale`` that carries the
original magnitude, so ``apply_edit(w, d, 1.0)`` reproduces the un-normalized
offset.

Direction-bank archive layout (all integers little-endian)::

    bytes 0..3    magic b"ATDB"
    bytes 4..7    uint32 format version (currently 1)
    bytes 8..11   uint32 header length H
    next H bytes  UTF-8 JSON header: format_version, mode, n_layers, d_latent,
                  attribute_names, calibration_scales
    remainder     one float32 LE matrix per direction, row-major, in header order
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, DegenerateDirectionError, UsageError

# Attribute categories edited by the full-scale method.
FULL_SCALE_ATTRIBUTES = (
    "smile", "surprise", "angry", "sad", "eyesclose", "eyeglasses", "beard",
    "gender", "age", "black", "white", "yellow", "pose", "lights",
)

BANK_MAGIC = b"ATDB"
BANK_FORMAT_VERSION = 1


def as_latent(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ConfigurationError(f"W+ latent must be 2-D (n_layers, d_latent), got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ConfigurationError("W+ latent has non-finite entries")
    return w


@dataclass(frozen=True)
class AttributeDirection:
    attribute_id: str
    delta: np.ndarray
    calibration_scale: float = 1.0

    def __post_init__(self):
        delta = as_latent(self.delta)
        norm = np.linalg.norm(delta)
        if abs(norm - 1.0) > 1e-6:
            raise ConfigurationError(
                f"direction {self.attribute_id!r} must have unit norm, got {norm:.6g}; "
                "use AttributeDirection.from_offset"
            )
        if not self.calibration_scale > 0:
            raise ConfigurationError("calibration_scale must be positive")
        delta = delta / norm
        delta.setflags(write=False)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "calibration_scale", float(self.calibration_scale))

    @classmethod
    def from_offset(cls, attribute_id: str, offset) -> "AttributeDirection":
        offset = as_latent(offset)
        norm = float(np.linalg.norm(offset))
        if norm == 0.0:
            raise DegenerateDirectionError(f"zero offset for attribute {attribute_id!r}")
        return cls(attribute_id, offset / norm, norm)

    @property
    def shape(self) -> tuple[int, int]:
        return self.delta.shape

    def offset(self) -> np.ndarray:
        return self.calibration_scale * self.delta


def apply_edit(w, d: AttributeDirection, alpha: float) -> np.ndarray:
    """Return ``w + alpha * calibration_scale * delta`` as a new array."""
    w = as_latent(w)
    if w.shape != d.shape:
        raise ConfigurationError(f"latent shape {w.shape} does not match direction shape {d.shape}")
    if alpha == 0:
        return w.copy()
    return w + (alpha * d.calibration_scale) * d.delta


def sweep(w, d: AttributeDirection, alphas: Iterable[float]) -> list[np.ndarray]:
    return [apply_edit(w, d, a) for a in alphas]


def extract_direction(edited: Sequence, unedited: Sequence, attribute_id: str = "direction") -> AttributeDirection:
    """Mean paired difference between edited and unedited latents, normalized."""
    if len(edited) == 0 or len(unedited) == 0:
        raise UsageError("extract_direction needs at least one pair")
    if len(edited) != len(unedited):
        raise UsageError(f"got {len(edited)} edited but {len(unedited)} unedited latents")
    e = np.stack([as_latent(x) for x in edited])
    u = np.stack([as_latent(x) for x in unedited])
    if e.shape != u.shape:
        raise ConfigurationError(f"edited shape {e.shape[1:]} != unedited shape {u.shape[1:]}")
    mean_diff = (e - u).mean(axis=0)
    if not np.any(mean_diff):
        raise DegenerateDirectionError(f"mean difference is zero for {attribute_id!r}")
    return AttributeDirection.from_offset(attribute_id, mean_diff)


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


@dataclass
class DirectionBank:
    directions: list[AttributeDirection] = field(default_factory=list)
    mode: str = "synthetic"

    def __post_init__(self):
        names = [d.attribute_id for d in self.directions]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate attribute ids in bank: {names}")
        shapes = {d.shape for d in self.directions}
        if len(shapes) > 1:
            raise ConfigurationError(f"directions have mixed shapes: {shapes}")
        if self.mode == "full_scale" and tuple(names) != FULL_SCALE_ATTRIBUTES:
            raise ConfigurationError("full-scale bank must hold exactly the 14 attribute categories in order")

    @property
    def attribute_names(self) -> list[str]:
        return [d.attribute_id for d in self.directions]

    @property
    def shape(self) -> tuple[int, int]:
        return self.directions[0].shape

    def __len__(self) -> int:
        return len(self.directions)

    def __iter__(self):
        return iter(self.directions)

    def __getitem__(self, name: str) -> AttributeDirection:
        for d in self.directions:
            if d.attribute_id == name:
                return d
        raise UsageError(f"unknown attribute {name!r}; bank holds {self.attribute_names}")

    def __contains__(self, name: str) -> bool:
        return name in self.attribute_names

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    def to_bytes(self) -> bytes:
        n_layers, d_latent = self.shape
        header = {
            "format_version": BANK_FORMAT_VERSION,
            "mode": self.mode,
            "n_layers": n_layers,
            "d_latent": d_latent,
            "attribute_names": self.attribute_names,
            "calibration_scales": [d.calibration_scale for d in self.directions],
        }
        hb = json.dumps(header, sort_keys=True).encode("utf-8")
        parts = [BANK_MAGIC, struct.pack("<II", BANK_FORMAT_VERSION, len(hb)), hb]
        parts += [d.delta.astype("<f4").tobytes() for d in self.directions]
        return b"".join(parts)

    @classmethod
    def load(cls, path) -> "DirectionBank":
        return cls.from_bytes(Path(path).read_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "DirectionBank":
        if blob[:4] != BANK_MAGIC:
            raise ConfigurationError("not a direction-bank archive")
        version, hlen = struct.unpack("<II", blob[4:12])
        if version != BANK_FORMAT_VERSION:
            raise ConfigurationError(f"unsupported bank format version {version}")
        header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
        n, dl = header["n_layers"], header["d_latent"]
        body = np.frombuffer(blob, dtype="<f4", offset=12 + hlen)
        names = header["attribute_names"]
        if body.size != len(names) * n * dl:
            raise ConfigurationError("direction-bank payload size does not match header")
        mats = body.reshape(len(names), n, dl).astype(np.float64)
        dirs = [
            AttributeDirection(name, m / np.linalg.norm(m), scale)
            for name, m, scale in zip(names, mats, header["calibration_scales"])
        ]
        return cls(dirs, mode=header.get("mode", "synthetic"))
