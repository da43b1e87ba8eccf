"""Small CNN probes trained on rendered faces.

``IdentityProbe`` maps an image to a unit embedding whose cosine similarity
tracks identity-factor distance and ignores attributes. It regresses onto a
random-Fourier-feature embedding of the identity factors, so the target
cosine between two identities is roughly a Gaussian kernel of their
distance. ``AttributeProbe`` regresses the six attribute factors.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ProbeTrainingError, UsageError
from .factors import (
    ATTRIBUTE_NAMES,
    ATTRIBUTE_RANGES,
    N_ATTRIBUTE,
    N_IDENTITY,
    WorldParams,
    sample_params,
)
from .renderer import render_batch

log = logging.getLogger(__name__)

EMBED_DIM = 32
RFF_BANDWIDTH = 1.6


class _Trunk(nn.Module):
    def __init__(self, width: int = 32, image_size: int = 32):
        super().__init__()
        stride = 2 if image_size > 16 else 1
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, 2 * width, 3, stride=stride, padding=1), nn.SiLU(),
            nn.Conv2d(2 * width, 2 * width, 3, padding=1), nn.SiLU(),
            nn.AdaptiveAvgPool2d(8),
            nn.Flatten(),
            nn.Linear(2 * width * 64, 256), nn.SiLU(),
        )

    def forward(self, x):
        return self.net(x)


class IdentityProbe(nn.Module):
    def __init__(self, embed_dim: int = EMBED_DIM, width: int = 32, image_size: int = 32):
        super().__init__()
        self.trunk = _Trunk(width, image_size)
        self.head = nn.Linear(256, embed_dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.head(self.trunk(images)), dim=-1)


class AttributeProbe(nn.Module):
    def __init__(self, width: int = 32, image_size: int = 32):
        super().__init__()
        self.trunk = _Trunk(width, image_size)
        self.head = nn.Linear(256, N_ATTRIBUTE)
        lo = torch.tensor([ATTRIBUTE_RANGES[n][0] for n in ATTRIBUTE_NAMES])
        hi = torch.tensor([ATTRIBUTE_RANGES[n][1] for n in ATTRIBUTE_NAMES])
        self.register_buffer("center", (lo + hi) / 2)
        self.register_buffer("half_range", (hi - lo) / 2)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.center + self.half_range * self.head(self.trunk(images))


def identity_targets(identity_factors: np.ndarray, seed: int, dim: int = EMBED_DIM) -> np.ndarray:
    rng = np.random.default_rng([seed, 0x1D])
    omega = rng.normal(0.0, RFF_BANDWIDTH, size=(dim // 2, N_IDENTITY))
    z = np.asarray(identity_factors) @ omega.T
    return np.concatenate([np.cos(z), np.sin(z)], axis=-1) / np.sqrt(dim // 2)


@dataclass
class ProbeMetrics:
    r2: dict
    auc: float
    triplet_rate: float

    def as_dict(self) -> dict:
        return {"r2": dict(self.r2), "auc": self.auc, "triplet_rate": self.triplet_rate}


def r2_scores(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    ss_res = ((pred - target) ** 2).sum(axis=0)
    ss_tot = ((target - target.mean(axis=0)) ** 2).sum(axis=0)
    return 1.0 - ss_res / ss_tot


def roc_auc(pos: np.ndarray, neg: np.ndarray) -> float:
    """Probability a positive score beats a negative one (ties count half)."""
    pos = np.sort(np.asarray(pos))
    neg = np.sort(np.asarray(neg))
    lower = np.searchsorted(neg, pos, side="left")
    upper = np.searchsorted(neg, pos, side="right")
    return float((lower + 0.5 * (upper - lower)).sum() / (pos.size * neg.size))


@torch.no_grad()
def embed_images(probe: nn.Module, images: np.ndarray, batch: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch):
        out.append(probe(torch.as_tensor(images[i : i + batch])).double().numpy())
    return np.concatenate(out)


def _fit(model, images, targets, loss_fn, *, epochs, batch, lr, seed):
    gen = torch.Generator().manual_seed(seed)
    x = torch.as_tensor(images)
    y = torch.as_tensor(targets, dtype=torch.float32)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    steps = epochs * ((len(x) + batch - 1) // batch)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=steps)
    model.train()
    for _ in range(epochs):
        perm = torch.randperm(len(x), generator=gen)
        for i in range(0, len(x), batch):
            idx = perm[i : i + batch]
            loss = loss_fn(model(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def evaluate_probes(id_probe, attr_probe, size: int, seed: int, n: int = 400) -> ProbeMetrics:
    """Held-out validation: per-factor R^2, verification AUC and triplet ordering."""
    rng = np.random.default_rng([seed, 0xE7A1])
    params = sample_params(rng, n, natural=False)
    imgs = render_batch(params, size)
    pred = embed_images(attr_probe, imgs)
    r2 = r2_scores(pred, np.stack([p.attribute_factors for p in params]))

    # Same identity with resampled attributes vs a different identity.
    same = [WorldParams(p.identity_factors, q.attribute_factors) for p, q in zip(params, sample_params(rng, n, natural=False))]
    others = sample_params(rng, n, natural=False)
    e0 = embed_images(id_probe, imgs)
    e_same = embed_images(id_probe, render_batch(same, size))
    e_diff = embed_images(id_probe, render_batch(others, size))
    pos = (e0 * e_same).sum(-1)
    neg = (e0 * e_diff).sum(-1)
    return ProbeMetrics(
        r2={name: float(v) for name, v in zip(ATTRIBUTE_NAMES, r2)},
        auc=roc_auc(pos, neg),
        triplet_rate=float(np.mean(pos >= neg)),
    )


def train_probes(
    dataset_size: int,
    seed: int,
    size: int = 32,
    epochs: int = 16,
    batch: int = 64,
    lr: float = 2e-3,
    min_r2: float = 0.9,
    min_auc: float = 0.95,
):
    """Train both probes on freshly rendered faces and enforce the validation contract.

    Returns ``(identity_probe, attribute_probe, metrics)``.
    """
    if dataset_size < 1000:
        raise UsageError(f"probe training needs dataset_size >= 1000, got {dataset_size}")
    rng = np.random.default_rng([seed, 0x9B0])
    params = sample_params(rng, dataset_size, natural=False)
    imgs = render_batch(params, size)
    attrs = np.stack([p.attribute_factors for p in params])
    ids = identity_targets(np.stack([p.identity_factors for p in params]), seed)

    torch.manual_seed(seed)
    id_probe = IdentityProbe(image_size=size)
    attr_probe = AttributeProbe(image_size=size)
    half = attr_probe.half_range.numpy()
    _fit(
        attr_probe, imgs, attrs,
        lambda p, t: F.mse_loss(p / torch.as_tensor(half), t / torch.as_tensor(half)),
        epochs=epochs, batch=batch, lr=lr, seed=seed,
    )
    _fit(
        id_probe, imgs, ids,
        lambda p, t: (1.0 - (p * t).sum(-1)).mean(),
        epochs=epochs, batch=batch, lr=lr, seed=seed + 1,
    )
    metrics = evaluate_probes(id_probe, attr_probe, size, seed)
    log.info("probe metrics: %s", metrics.as_dict())
    bad_r2 = {k: v for k, v in metrics.r2.items() if v < min_r2}
    if bad_r2 or metrics.auc < min_auc:
        raise ProbeTrainingError(
            f"probes failed validation (R2 below {min_r2}: {bad_r2}; AUC {metrics.auc:.4f})",
            metrics.as_dict(),
        )
    return id_probe, attr_probe, metrics
