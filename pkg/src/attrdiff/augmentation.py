"""Attribute-controlled synthesis augmentation.

With probability ``rate`` a training tuple ``(I, T, F, L, W)`` is replaced by
``(I', T, F, L, W')`` where ``W' = W + alpha * dW`` for one randomly chosen
attribute and ``I'`` is decoded from ``W'``. The identity embedding ``F`` and
landmarks ``L`` always come from the original image.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError
from .latent_space import DirectionBank, apply_edit
from .world.latent_map import LatentMap
from .world.renderer import landmarks as world_landmarks
from .world.renderer import render


@dataclass(frozen=True)
class AugmentationConfig:
    rate: float = 0.3
    alpha_min: float = 0.0
    alpha_max: float = 2.5
    eligible_attributes: Optional[tuple] = None   # None means the whole bank
    recompute_landmarks: bool = False

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ConfigurationError(f"augmentation rate must be in [0, 1], got {self.rate}")
        if self.alpha_min > self.alpha_max:
            raise ConfigurationError("alpha_min must not exceed alpha_max")
        if self.eligible_attributes is not None:
            object.__setattr__(self, "eligible_attributes", tuple(self.eligible_attributes))


@dataclass
class TrainingSample:
    image: np.ndarray            # (3, H, W) float32 in [0, 1]
    prompt: str
    face_embedding: np.ndarray   # F, taken from the original image
    landmarks: np.ndarray        # L, (K, 2) pixels
    latent: np.ndarray           # W, (n_layers, d_latent)
    provenance: dict = field(default_factory=lambda: {"attribute": None, "alpha": 0.0})

    @property
    def augmented(self) -> bool:
        return self.provenance.get("attribute") is not None


def quantize(image: np.ndarray) -> np.ndarray:
    """Round to 8-bit levels so images survive a PNG round trip exactly."""
    return (np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


class SyntheticDecoder:
    """Latent -> image path of the synthetic world: recover factors, render, quantize."""

    def __init__(self, latent_map: LatentMap, size: int):
        self.latent_map = latent_map
        self.size = size

    def params(self, w):
        return self.latent_map.recover(w)

    def __call__(self, w) -> np.ndarray:
        img = render(self.params(w), self.size)
        return quantize(img.transpose(2, 0, 1))

    def landmarks(self, w) -> np.ndarray:
        return world_landmarks(self.params(w), self.size)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for one consumed sample, so augmentation replays from (seed, index)."""
    return np.random.default_rng([seed, index, 0xA6])


def maybe_augment(
    sample: TrainingSample,
    bank: DirectionBank,
    cfg: AugmentationConfig,
    rng: np.random.Generator,
    decode: Callable,
) -> TrainingSample:
    if sample.latent.shape != bank.shape:
        raise ConfigurationError(f"sample latent {sample.latent.shape} does not match bank {bank.shape}")
    # Always draw the same number of variates so streams stay aligned.
    u, pick, a = rng.random(), rng.random(), rng.random()
    if u >= cfg.rate:
        return replace(sample, provenance={"attribute": None, "alpha": 0.0})
    names = cfg.eligible_attributes or tuple(bank.attribute_names)
    name = names[min(int(pick * len(names)), len(names) - 1)]
    alpha = cfg.alpha_min + (cfg.alpha_max - cfg.alpha_min) * a
    w_new = apply_edit(sample.latent, bank[name], alpha)
    new_landmarks = sample.landmarks
    if cfg.recompute_landmarks and hasattr(decode, "landmarks"):
        new_landmarks = decode.landmarks(w_new)
    return TrainingSample(
        image=decode(w_new),
        prompt=sample.prompt,
        face_embedding=sample.face_embedding,
        landmarks=new_landmarks,
        latent=w_new,
        provenance={"attribute": name, "alpha": float(alpha)},
    )
