"""Diffusion + identity-loss training with an enforced freezing policy.

Three training modes:

``base``
    Everything except the attribute adapter is trained with the attribute
    gain at zero. This stands in for the pretrained backbone and identity
    adapter the method starts from.
``adapter``
    The method's own regime: only the attribute projector and the attribute
    key/value projections (or the shared concat projection) are trainable.
``full``
    Every parameter is trainable.

Randomness for step ``k`` comes from a counter-based stream seeded by
``(seed, k)``, so resuming from a checkpoint replays exactly.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .augmentation import AugmentationConfig, SyntheticDecoder, TrainingSample, maybe_augment, sample_rng
from .diffusion import NoiseSchedule, add_noise, ddim_x0_approx
from .errors import ConfigurationError, TrainingAbort, ValidationError
from .latent_space import DirectionBank
from .tdca import CONCAT
from .unet import UNet, predict_noise

log = logging.getLogger(__name__)

MODES = ("base", "adapter", "full")


@dataclass
class TrainConfig:
    lr: float = 1e-5
    weight_decay: float = 0.01
    steps: int = 2000
    batch_size: int = 32
    lambda_id: float = 1.0
    lambda1_train: float = 1.0
    lambda2_train: float = 1.0
    p_uncond: float = 0.1
    id_loss_min_t: int = 0
    id_loss_max_t: Optional[int] = None   # skip the ID loss above this t; None means no upper bound
    mode: str = "adapter"
    seed: int = 0
    checkpoint_every: int = 0
    grad_clip: float = 1.0
    lr_schedule: str = "constant"   # or "cosine": decays to 0 at ``steps``

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError("lr must be positive")
        if self.lambda_id < 0:
            raise ConfigurationError("lambda_id must be non-negative")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.id_loss_max_t is not None and self.id_loss_max_t < self.id_loss_min_t:
            raise ConfigurationError("id_loss_max_t must not be below id_loss_min_t")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigurationError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "cosine":
            return self.lr * 0.5 * (1.0 + math.cos(math.pi * min(step, self.steps) / self.steps))
        return self.lr


# -- freezing policy --------------------------------------------------------

def adapter_parameter_names(model: UNet) -> set[str]:
    suffixes = (".to_k_cat.weight", ".to_v_cat.weight") if model.topology == CONCAT else (
        ".to_k_attr.weight", ".to_v_attr.weight")
    return {n for n, _ in model.named_parameters() if n.startswith("attr_projector.") or n.endswith(suffixes)}


def expected_trainable(model: UNet, mode: str) -> set[str]:
    names = {n for n, _ in model.named_parameters()}
    adapter = adapter_parameter_names(model)
    attr_only = {n for n in names if n.endswith((".to_k_attr.weight", ".to_v_attr.weight"))}
    if mode == "adapter":
        return adapter
    if mode == "base":
        return names - adapter - attr_only
    return names


def apply_freeze_policy(model: UNet, mode: str) -> None:
    keep = expected_trainable(model, mode)
    for n, p in model.named_parameters():
        p.requires_grad_(n in keep)


def audit_trainable(model: UNet, mode: str) -> list[str]:
    """Sorted trainable parameter names; raises if they differ from the policy."""
    actual = {n for n, p in model.named_parameters() if p.requires_grad}
    expected = expected_trainable(model, mode)
    if actual != expected:
        raise ValidationError(
            f"freeze policy violated for mode {mode!r}: unexpected {sorted(actual - expected)}, "
            f"missing {sorted(expected - actual)}"
        )
    return sorted(actual)


def audit_groups(model: UNet, mode: str) -> set[str]:
    """Coarse module groups that hold trainable parameters (for logs and acceptance)."""
    groups = set()
    for n in audit_trainable(model, mode):
        if n.startswith("attr_projector."):
            groups.add("attr_projector")
        elif n.endswith((".to_k_attr.weight", ".to_v_attr.weight")):
            groups.add("attr_kv")
        elif n.endswith((".to_k_cat.weight", ".to_v_cat.weight")):
            groups.add("concat_kv")
        else:
            groups.add(n.split(".")[0])
    return groups


# -- losses -----------------------------------------------------------------

def diffusion_loss(model, schedule: NoiseSchedule, x0, t, eps, bundle, landmarks=None, predictor=None):
    """Epsilon-prediction MSE; returns ``(loss, noise_est, x_t)``."""
    x_t = add_noise(schedule, x0, t, eps)
    if predictor is None:
        noise_est = predict_noise(model, x_t, t, bundle, landmarks)
    else:
        noise_est = predictor(x_t, t)
    return F.mse_loss(noise_est, eps), noise_est, x_t


def identity_loss(schedule: NoiseSchedule, x_t, t, noise_est, original_image, probe, reference_embedding=None,
                  mask=None):
    """Squared L2 between probe embeddings of the DDIM clean estimate and the original image."""
    x0_hat = ddim_x0_approx(schedule, x_t, t, noise_est).clamp(0.0, 1.0)
    e_hat = probe(x0_hat.to(next(probe.parameters()).dtype))
    if reference_embedding is None:
        with torch.no_grad():
            reference_embedding = probe(original_image.to(e_hat.dtype))
    per = ((e_hat - reference_embedding.to(e_hat.dtype)) ** 2).sum(dim=-1)
    if mask is not None:
        m = mask.to(per.dtype)
        return (per * m).sum() / m.sum().clamp(min=1.0)
    return per.mean()


# -- batches ----------------------------------------------------------------

@dataclass
class Batch:
    images: torch.Tensor
    prompts: list
    faces: torch.Tensor
    landmarks: np.ndarray
    latents: torch.Tensor
    t: torch.Tensor
    eps: torch.Tensor
    drop: torch.Tensor
    provenance: list = field(default_factory=list)


def make_batch(dataset, step: int, cfg: TrainConfig, schedule: NoiseSchedule, bank: Optional[DirectionBank],
               aug: Optional[AugmentationConfig], decode: Optional[SyntheticDecoder]) -> Batch:
    rng = np.random.default_rng([cfg.seed, step, 0xBA7C])
    idx = rng.integers(0, len(dataset), cfg.batch_size)
    samples: list[TrainingSample] = []
    for j, i in enumerate(idx):
        s = dataset.sample(int(i))
        if aug is not None and aug.rate > 0:
            s = maybe_augment(s, bank, aug, sample_rng(cfg.seed, step * cfg.batch_size + j), decode)
        samples.append(s)
    shape = samples[0].image.shape
    return Batch(
        images=torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32)),
        prompts=[s.prompt for s in samples],
        faces=torch.from_numpy(np.stack([s.face_embedding for s in samples]).astype(np.float32)),
        landmarks=np.stack([s.landmarks for s in samples]),
        latents=torch.from_numpy(np.stack([s.latent for s in samples]).astype(np.float32)),
        t=torch.from_numpy(rng.integers(0, schedule.T, cfg.batch_size)),
        eps=torch.from_numpy(rng.standard_normal((cfg.batch_size,) + shape).astype(np.float32)),
        drop=torch.from_numpy(rng.random(cfg.batch_size) < cfg.p_uncond),
        provenance=[dict(s.provenance, index=int(i)) for s, i in zip(samples, idx)],
    )


def conditioning(model: UNet, batch: Batch):
    bundle = model.encode(batch.prompts, batch.faces, batch.latents)
    if batch.drop.any():
        null = model.encode_null(len(batch.prompts))
        keep = (~batch.drop).view(-1, 1, 1)
        bundle = type(bundle)(*(torch.where(keep, c, n) for c, n in zip(bundle.tensors(), null.tensors())))
    return bundle


# -- trainer ----------------------------------------------------------------

class Trainer:
    """Owns a model, its optimizer and the step counter."""

    def __init__(self, model: UNet, cfg: TrainConfig, schedule: NoiseSchedule, dataset, *, id_probe=None,
                 bank=None, aug: Optional[AugmentationConfig] = None, decode=None, metrics_path=None):
        self.model, self.cfg, self.schedule, self.dataset = model, cfg, schedule, dataset
        self.id_probe, self.bank, self.aug, self.decode = id_probe, bank, aug, decode
        self.metrics_path = metrics_path
        self.step = 0
        if cfg.mode == "base":
            model.lambda1, model.lambda2 = cfg.lambda1_train, 0.0
        else:
            model.lambda1, model.lambda2 = cfg.lambda1_train, cfg.lambda2_train
        apply_freeze_policy(model, cfg.mode)
        self.trainable = [p for p in model.parameters() if p.requires_grad]
        self.optimizer = torch.optim.AdamW(self.trainable, lr=cfg.lr, weight_decay=cfg.weight_decay)
        if cfg.lambda_id > 0 and id_probe is None:
            raise ConfigurationError("lambda_id > 0 needs an identity probe")
        if id_probe is not None:
            for p in id_probe.parameters():
                p.requires_grad_(False)

    def losses(self, batch: Batch):
        model = self.model
        bundle = conditioning(model, batch)
        l_diff, noise_est, x_t = diffusion_loss(model, self.schedule, batch.images, batch.t, batch.eps, bundle,
                                                batch.landmarks)
        total = l_diff.double()
        l_id = torch.zeros((), dtype=torch.float64)
        if self.cfg.lambda_id > 0:
            mask = (~batch.drop) & (batch.t >= self.cfg.id_loss_min_t)
            if self.cfg.id_loss_max_t is not None:
                mask = mask & (batch.t <= self.cfg.id_loss_max_t)
            l_id = identity_loss(self.schedule, x_t, batch.t, noise_est, batch.images, self.id_probe,
                                 reference_embedding=batch.faces, mask=mask).double()
            total = total + self.cfg.lambda_id * l_id
        return total, l_diff.double(), l_id

    def train_step(self, batch: Optional[Batch] = None) -> dict:
        if batch is None:
            batch = make_batch(self.dataset, self.step, self.cfg, self.schedule, self.bank, self.aug, self.decode)
        start = time.perf_counter()
        total, l_diff, l_id = self.losses(batch)
        record = {
            "step": self.step,
            "diffusion": float(l_diff.detach()),
            "identity": float(l_id.detach()),
            "total": float(total.detach()),
            "augmented": sum(p["attribute"] is not None for p in batch.provenance),
        }
        if not math.isfinite(record["total"]):
            raise TrainingAbort(f"non-finite loss at step {self.step}", record)
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        for group in self.optimizer.param_groups:
            group["lr"] = self.cfg.lr_at(self.step)
        grad_norm = torch.nn.utils.clip_grad_norm_(self.trainable, self.cfg.grad_clip if self.cfg.grad_clip else float("inf"))
        record["grad_norm"] = float(grad_norm)
        self.optimizer.step()
        record["wall_time"] = time.perf_counter() - start
        self.step += 1
        if self.metrics_path is not None:
            with open(self.metrics_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")
        return record

    def run(self, n_steps: int, callback=None) -> list[dict]:
        history = []
        for _ in range(n_steps):
            rec = self.train_step()
            history.append(rec)
            if callback is not None:
                callback(self, rec)
        return history

    # -- persistence --------------------------------------------------------

    def optimizer_tensors(self) -> dict[str, torch.Tensor]:
        names = {id(p): n for n, p in self.model.named_parameters()}
        out = {}
        for p in self.trainable:
            st = self.optimizer.state.get(p)
            if not st:
                continue
            n = names[id(p)]
            out[f"{n}#exp_avg"] = st["exp_avg"]
            out[f"{n}#exp_avg_sq"] = st["exp_avg_sq"]
            out[f"{n}#step"] = torch.as_tensor(st["step"], dtype=torch.float32).reshape(1)
        return out

    def load_optimizer_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        params = dict(self.model.named_parameters())
        for key, val in tensors.items():
            n, slot = key.rsplit("#", 1)
            p = params[n]
            st = self.optimizer.state.setdefault(p, {})
            st[slot] = val.reshape(()).clone() if slot == "step" else val.clone()


def smoothed(values, window: int = 50) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.insert(v, 0, 0.0))
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def config_dict(cfg) -> dict:
    return asdict(cfg)
