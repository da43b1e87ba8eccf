"""Synthetic training collection and its on-disk form.

On disk a dataset is a directory holding ``images/NNNNN.png`` (8-bit RGB,
lossless), ``latents.npy`` with every W+ latent stacked, ``faces.npy`` with
the identity embeddings, and ``manifest.jsonl`` with one record per image::

    {"index": 0, "image": "images/00000.png", "latent": "latents.npy#0",
     "prompt": "a person", "theta": {...}, "landmarks": [[x, y], ...]}
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from ..augmentation import SyntheticDecoder, TrainingSample
from ..embeddings import PROMPTS
from .factors import WorldParams, sample_params
from .latent_map import LatentMap
from .probes import embed_images
from .renderer import landmarks as world_landmarks

TRAIN_PROMPTS = tuple(p for p in PROMPTS if p)


@dataclass
class SyntheticDataset:
    thetas: np.ndarray      # (N, n_factors)
    images: np.ndarray      # (N, 3, H, W) float32
    prompts: list
    faces: np.ndarray       # (N, face_embed_dim)
    landmarks: np.ndarray   # (N, K, 2)
    latents: np.ndarray     # (N, n_layers, d_latent)

    def __len__(self) -> int:
        return len(self.prompts)

    def sample(self, i: int) -> TrainingSample:
        return TrainingSample(
            image=self.images[i],
            prompt=self.prompts[i],
            face_embedding=self.faces[i],
            landmarks=self.landmarks[i],
            latent=self.latents[i],
        )

    def params(self, i: int) -> WorldParams:
        return WorldParams.from_vector(self.thetas[i])

    def manifest_records(self) -> list[dict]:
        return [
            {
                "index": i,
                "image": f"images/{i:05d}.png",
                "latent": f"latents.npy#{i}",
                "prompt": self.prompts[i],
                "theta": self.params(i).to_dict(),
                "landmarks": self.landmarks[i].tolist(),
            }
            for i in range(len(self))
        ]

    def save(self, root) -> Path:
        root = Path(root)
        (root / "images").mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(self.images):
            arr = np.round(img.transpose(1, 2, 0) * 255).astype(np.uint8)
            Image.fromarray(arr).save(root / "images" / f"{i:05d}.png", optimize=False)
        np.save(root / "latents.npy", self.latents.astype("<f8"), allow_pickle=False)
        np.save(root / "faces.npy", self.faces.astype("<f4"), allow_pickle=False)
        with open(root / "manifest.jsonl", "w") as fh:
            for rec in self.manifest_records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return root

    @classmethod
    def load(cls, root) -> "SyntheticDataset":
        root = Path(root)
        recs = [json.loads(line) for line in (root / "manifest.jsonl").read_text().splitlines() if line]
        images = np.stack([
            np.asarray(Image.open(root / r["image"]).convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0
            for r in recs
        ])
        return cls(
            thetas=np.stack([WorldParams.from_dict(r["theta"]).vector() for r in recs]),
            images=images.astype(np.float32),
            prompts=[r["prompt"] for r in recs],
            faces=np.load(root / "faces.npy"),
            landmarks=np.array([r["landmarks"] for r in recs], dtype=np.float64),
            latents=np.load(root / "latents.npy"),
        )


def build_dataset(n: int, seed: int, latent_map: LatentMap, id_probe, size: int,
                  natural: bool = True) -> SyntheticDataset:
    """Sample faces, decode them, and extract (F, L, W) for each.

    ``natural`` restricts attributes to the narrow everyday ranges (no
    glasses); otherwise the full calibrated ranges are used.
    """
    rng = np.random.default_rng([seed, 0xDA7A, int(natural)])
    params = sample_params(rng, n, natural=natural)
    prompts = [TRAIN_PROMPTS[i] for i in rng.integers(0, len(TRAIN_PROMPTS), n)]
    decode = SyntheticDecoder(latent_map, size)
    latents = latent_map.embed_many(params)
    images = np.stack([decode(w) for w in latents])
    with torch.no_grad():
        faces = embed_images(id_probe, images).astype(np.float32)
    lms = np.stack([world_landmarks(p, size) for p in params])
    return SyntheticDataset(
        thetas=np.stack([p.vector() for p in params]),
        images=images,
        prompts=prompts,
        faces=faces,
        landmarks=lms,
        latents=latents,
    )
