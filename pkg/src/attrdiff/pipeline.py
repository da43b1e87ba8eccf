"""End-to-end experiment steps shared by the command line and the acceptance suite.

The stages are:

1. ``prepare_world``: latent map, probes, direction bank and two datasets.
   The *broad* set covers every attribute range and feeds the backbone
   stage; the *natural* set (no glasses, narrow everyday ranges) feeds the
   adapter stage, where glasses only ever appear through augmentation.
2. ``pretrain``: trains the backbone and identity path from scratch. This
   stands in for the large pretrained generator the method starts from.
3. ``adapter_model`` + ``train_adapter``: freezes the backbone and trains
   only the attribute path, in triplet or concat topology.
4. ``sweep_responses``: layout-locked sweeps scored by the probes.
"""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from scipy.stats import spearmanr

from . import checkpoint
from .augmentation import AugmentationConfig, SyntheticDecoder
from .config import ExperimentConfig
from .diffusion import NoiseSchedule
from .inference import InferenceConfig, attribute_sweep_run
from .latent_space import DirectionBank
from .metrics import embed
from .tdca import CONCAT, TRIPLET
from .training import Trainer, TrainConfig
from .unet import UNet
from .world.dataset import SyntheticDataset, build_dataset
from .world.factors import attribute_index, sample_params
from .world.latent_map import LatentMap
from .world.probes import AttributeProbe, IdentityProbe, embed_images, train_probes
from .world.renderer import landmarks as world_landmarks

log = logging.getLogger(__name__)


@dataclass
class World:
    latent_map: LatentMap
    id_probe: IdentityProbe
    attr_probe: AttributeProbe
    probe_metrics: dict
    bank: DirectionBank
    broad: SyntheticDataset
    natural: SyntheticDataset
    size: int

    @property
    def decoder(self) -> SyntheticDecoder:
        return SyntheticDecoder(self.latent_map, self.size)


def schedule_for(cfg: ExperimentConfig) -> NoiseSchedule:
    s = cfg.schedule
    return NoiseSchedule.linear(s.T, s.beta_start, s.beta_end)


def direction_bank(latent_map: LatentMap, cfg: ExperimentConfig) -> DirectionBank:
    """Bank extracted from paired latents, the data-driven way."""
    rng = np.random.default_rng([cfg.seed, 0xD1])
    thetas = sample_params(rng, cfg.world.direction_pairs, natural=True)
    return latent_map.extracted_bank(thetas, rng, noise=cfg.world.direction_noise)


def prepare_world(cfg: ExperimentConfig) -> World:
    size = cfg.model.image_size
    lm = LatentMap.from_seed(cfg.world.latent_seed, cfg.world.n_layers, cfg.world.d_latent)
    id_probe, attr_probe, pm = train_probes(cfg.world.probe_images, cfg.seed, size=size,
                                            epochs=cfg.world.probe_epochs)
    bank = direction_bank(lm, cfg)
    broad = build_dataset(cfg.world.n_images, cfg.seed, lm, id_probe, size, natural=False)
    natural = build_dataset(cfg.world.n_images, cfg.seed, lm, id_probe, size, natural=True)
    return World(lm, id_probe, attr_probe, pm.as_dict(), bank, broad, natural, size)


def save_world(world: World, root) -> dict:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    world.latent_map.save(root / "latent_map.npy")
    probe_meta = {"image_size": world.size, "metrics": world.probe_metrics}
    checkpoint.save(root / "probes.ckpt",
                    {**{f"id/{k}": v for k, v in world.id_probe.state_dict().items()},
                     **{f"attr/{k}": v for k, v in world.attr_probe.state_dict().items()}},
                    probe_meta)
    world.bank.save(root / "directions.atdb")
    world.broad.save(root / "broad")
    world.natural.save(root / "natural")
    return probe_meta


def load_world(root, cfg: ExperimentConfig) -> World:
    root = Path(root)
    lm = LatentMap.load(root / "latent_map.npy", cfg.world.n_layers)
    tensors, meta = checkpoint.load(root / "probes.ckpt")
    size = int(meta["image_size"])
    id_probe, attr_probe = IdentityProbe(image_size=size), AttributeProbe(image_size=size)
    id_probe.load_state_dict({k[3:]: v for k, v in tensors.items() if k.startswith("id/")})
    attr_probe.load_state_dict({k[5:]: v for k, v in tensors.items() if k.startswith("attr/")})
    for p in (*id_probe.parameters(), *attr_probe.parameters()):
        p.requires_grad_(False)
    id_probe.eval()
    attr_probe.eval()
    return World(lm, id_probe, attr_probe, meta["metrics"], DirectionBank.load(root / "directions.atdb"),
                 SyntheticDataset.load(root / "broad"), SyntheticDataset.load(root / "natural"), size)


# -- models -------------------------------------------------------------------

def new_model(cfg: ExperimentConfig) -> UNet:
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        return UNet(cfg.model)


def pretrain(cfg: ExperimentConfig, world: World, steps: Optional[int] = None, metrics_path=None,
             model: Optional[UNet] = None):
    """Backbone stage on the broad set; returns ``(trainer, history)``."""
    model = model if model is not None else new_model(cfg)
    tc = cfg.pretrain
    trainer = Trainer(model, tc, schedule_for(cfg), world.broad, id_probe=world.id_probe if tc.lambda_id else None,
                      metrics_path=metrics_path)
    history = trainer.run(tc.steps if steps is None else steps)
    return trainer, history


def adapter_model(base: UNet, cfg: ExperimentConfig, topology: str = TRIPLET) -> UNet:
    """Copy of the backbone with a fresh attribute path in the requested topology."""
    model = copy.deepcopy(base)
    model.reset_attribute_adapter(cfg.seed + 1)
    if topology == CONCAT:
        model.convert_to_concat()
    return model


def adapter_trainer(model: UNet, cfg: ExperimentConfig, world: World, aug: Optional[AugmentationConfig] = None,
                    train: Optional[TrainConfig] = None, metrics_path=None) -> Trainer:
    aug = cfg.augment if aug is None else aug
    return Trainer(model, train or cfg.train, schedule_for(cfg), world.natural, id_probe=world.id_probe,
                   bank=world.bank, aug=aug, decode=world.decoder, metrics_path=metrics_path)


def train_adapter(model: UNet, cfg: ExperimentConfig, world: World, aug: Optional[AugmentationConfig] = None,
                  steps: Optional[int] = None, metrics_path=None):
    trainer = adapter_trainer(model, cfg, world, aug, metrics_path=metrics_path)
    history = trainer.run(cfg.train.steps if steps is None else steps)
    return trainer, history


# -- evaluation ---------------------------------------------------------------

def eval_references(cfg: ExperimentConfig, world: World, n: Optional[int] = None) -> list[dict]:
    """Held-out natural faces with everything a generation needs."""
    n = cfg.metrics.eval_refs if n is None else n
    rng = np.random.default_rng([cfg.seed, 0xE7A1])
    params = sample_params(rng, n, natural=True)
    dec = world.decoder
    refs = []
    for p in params:
        w = world.latent_map.embed(p)
        img = dec(w)
        refs.append({"theta": p, "w": w, "reference": img, "landmarks": world_landmarks(p, world.size),
                     "prompt": "a person"})
    faces = embed_images(world.id_probe, np.stack([r["reference"] for r in refs]))
    for r, f in zip(refs, faces):
        r["face"] = f.astype(np.float32)
    return refs


def sweep_responses(model: UNet, cfg: ExperimentConfig, world: World, refs, attribute: str, alphas,
                    inference: Optional[InferenceConfig] = None) -> dict:
    """Attribute response and identity similarity for each reference and strength."""
    inference = inference or cfg.inference
    schedule = schedule_for(cfg)
    k = attribute_index(attribute)
    direction = world.bank[attribute]
    response = np.zeros((len(refs), len(alphas)))
    similarity = np.zeros((len(refs), len(alphas)))
    images = []
    for r, ref in enumerate(refs):
        res = attribute_sweep_run(model, schedule, ref["face"], ref["landmarks"], ref["w"], direction, alphas,
                                  ref["prompt"], inference)
        imgs = torch.stack(res.images).clamp(0, 1)
        with torch.no_grad():
            response[r] = world.attr_probe(imgs.float())[:, k].double().numpy()
        e = embed(world.id_probe, list(imgs))
        similarity[r] = np.clip(e @ ref["face"].astype(np.float64) / np.linalg.norm(ref["face"]), -1, 1)
        images.append(imgs)
    return {"alphas": list(map(float, alphas)), "response": response, "similarity": similarity, "images": images}


def monotonicity(response: np.ndarray, alphas) -> float:
    """Spearman correlation between strength and the reference-averaged response (0 when flat)."""
    mean = np.asarray(response, dtype=np.float64).mean(axis=0)
    if np.ptp(mean) == 0:
        return 0.0
    return float(spearmanr(alphas, mean).statistic)


def summary(sweep: dict) -> dict:
    return {
        "alphas": sweep["alphas"],
        "mean_response": sweep["response"].mean(axis=0).tolist(),
        "mean_similarity": sweep["similarity"].mean(axis=0).tolist(),
        "spearman": monotonicity(sweep["response"], sweep["alphas"]),
    }


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")
    return path
