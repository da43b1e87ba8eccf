"""Command line: ``attrdiff {prepare,train,sweep,ablate,report}``.

Exit codes: 0 success, 2 usage or configuration error, 3 validation
failure, 4 runtime abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock, Timeout
from PIL import Image

from . import __version__, checkpoint
from . import config as config_mod
from . import metrics, pipeline
from .errors import AttrDiffError, UsageError, ValidationError
from .inference import to_image
from .latent_space import cosine
from .tdca import CONCAT, TRIPLET
from .training import audit_trainable
from .unet import UNet

log = logging.getLogger("attrdiff")

ENV_OUT = "PSTF_OUT"


# -- helpers ------------------------------------------------------------------

def parse_alphas(text: str) -> list[float]:
    """``"0,0.5,1"``, ``"[0, 0.5]"`` or ``"start:stop:step"`` (stop included when on the grid)."""
    s = text.strip()
    try:
        if s.count(":") == 2:
            start, stop, step = (float(p) for p in s.split(":"))
            if step <= 0:
                raise ValueError
            n = int(np.floor((stop - start) / step + 1e-9)) + 1
            return [round(start + i * step, 10) for i in range(n)]
        s = s.strip("[]")
        vals = [float(p) for p in s.split(",") if p.strip()]
    except ValueError:
        raise UsageError(f"cannot parse --alphas {text!r}") from None
    if not vals:
        raise UsageError("--alphas is empty")
    return vals


def code_version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def load_config(args) -> config_mod.ExperimentConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def output_root(args, cfg) -> Path:
    if args.out:
        return Path(args.out)
    if os.environ.get(ENV_OUT):
        return Path(os.environ[ENV_OUT])
    return Path(cfg.out_dir)


def provenance(cfg) -> dict:
    return {"config_hash": cfg.hash(), "seed": cfg.seed, "code_version": code_version()}


def save_png(x, path) -> None:
    arr = np.round(np.asarray(x) * 255).astype(np.uint8)
    Image.fromarray(arr).save(path, optimize=False)


def model_from_checkpoint(cfg, path):
    tensors, meta = checkpoint.load(path)
    model = UNet(cfg.model)
    if meta.get("topology") == CONCAT:
        model.convert_to_concat()
    checkpoint.load_model_state(model, tensors)
    model.eval()
    return model, meta


def require_world(root: Path, cfg):
    if not (root / "world" / "manifest.json").exists():
        raise UsageError(f"no prepared world under {root}; run 'prepare' first")
    return pipeline.load_world(root / "world", cfg)


# -- commands -----------------------------------------------------------------

def cmd_prepare(cfg, root: Path, args) -> dict:
    world = pipeline.prepare_world(cfg)
    wroot = root / "world"
    pipeline.save_world(world, wroot)
    analytic = world.latent_map.analytic_bank(world.bank.attribute_names)
    checks = {n: cosine(world.bank[n].delta, analytic[n].delta) for n in world.bank.attribute_names}
    manifest = {
        **provenance(cfg),
        "image_size": world.size,
        "broad_images": len(world.broad),
        "natural_images": len(world.natural),
        "probe_metrics": world.probe_metrics,
        "direction_check": checks,
        "files": ["latent_map.npy", "probes.ckpt", "directions.atdb", "broad/manifest.jsonl",
                  "natural/manifest.jsonl"],
    }
    if min(checks.values()) < 0.999:
        raise ValidationError(f"extracted directions disagree with the analytic map: {checks}")
    pipeline.write_json(wroot / "manifest.json", manifest)
    print(f"prepared {len(world.natural)} + {len(world.broad)} images under {wroot}")
    return manifest


def _train_stage(trainer, cfg, path_prefix: Path, steps: int, tag: str):
    every = trainer.cfg.checkpoint_every
    meta = {**provenance(cfg), "model": cfg.model.as_dict(), "stage": tag}
    while trainer.step < steps:
        trainer.train_step()
        if every and trainer.step % every == 0 and trainer.step < steps:
            checkpoint.save_training_state(path_prefix.parent / "checkpoints" / f"{tag}_{trainer.step:06d}.ckpt",
                                           trainer, meta)
    return checkpoint.save_training_state(path_prefix, trainer, {**meta, "tag": "final"})


def _base_model(cfg, root: Path, world):
    base_path = root / "base.ckpt"
    if base_path.exists():
        model, meta = model_from_checkpoint(cfg, base_path)
        if meta.get("config_hash") == cfg.hash():
            return model
    model = pipeline.new_model(cfg)
    trainer = pipeline.Trainer(model, cfg.pretrain, pipeline.schedule_for(cfg), world.broad,
                               id_probe=world.id_probe if cfg.pretrain.lambda_id else None,
                               metrics_path=root / "metrics_base.jsonl")
    log.info("backbone trainable parameters: %d tensors", len(audit_trainable(model, cfg.pretrain.mode)))
    _train_stage(trainer, cfg, base_path, cfg.pretrain.steps, "base")
    return model


def cmd_train(cfg, root: Path, args) -> dict:
    world = require_world(root, cfg)
    base = _base_model(cfg, root, world)
    topology = getattr(args, "topology", TRIPLET)
    model = pipeline.adapter_model(base, cfg, topology)
    trainer = pipeline.adapter_trainer(model, cfg, world, metrics_path=root / f"metrics_{topology}.jsonl")
    if args.checkpoint:
        checkpoint.load_training_state(args.checkpoint, trainer)
    trainable = audit_trainable(model, cfg.train.mode)
    log.info("trainable parameters (%s): %s", cfg.train.mode, trainable)
    pipeline.write_json(root / f"audit_{topology}.json", {**provenance(cfg), "mode": cfg.train.mode,
                                                           "trainable": trainable})
    path = _train_stage(trainer, cfg, root / f"{topology}.ckpt", cfg.train.steps, topology)
    print(f"trained {topology} adapter to step {trainer.step}: {path}")
    return {"checkpoint": str(path), "step": trainer.step}


def cmd_sweep(cfg, root: Path, args) -> dict:
    world = require_world(root, cfg)
    attribute = args.attribute or cfg.metrics.sweep_attribute
    world.bank[attribute]          # usage error listing the bank when unknown
    alphas = parse_alphas(args.alphas) if args.alphas else list(cfg.metrics.alphas)
    ckpt = Path(args.checkpoint) if args.checkpoint else root / f"{TRIPLET}.ckpt"
    if not ckpt.exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    model, _ = model_from_checkpoint(cfg, ckpt)
    refs = pipeline.eval_references(cfg, world, 1)
    sweep = pipeline.sweep_responses(model, cfg, world, refs, attribute, alphas)
    out = root / "sweeps" / attribute
    out.mkdir(parents=True, exist_ok=True)
    for a, img in zip(alphas, sweep["images"][0]):
        save_png(to_image(img), out / f"alpha_{a:.2f}.png")
    curve = {**provenance(cfg), "banner": metrics.BANNER, "attribute": attribute, **pipeline.summary(sweep)}
    pipeline.write_json(out / "curve.json", curve)
    report = metrics.SimilarityReport([attribute], alphas, sweep["similarity"][:, None, :], cfg.hash(), "sweep")
    metrics.write_report(report, out, "similarity")
    metrics.plot_strength_curves([report], out / "similarity.png")
    print(f"{len(alphas)} images written to {out}")
    return curve


def cmd_ablate(cfg, root: Path, args) -> dict:
    world = require_world(root, cfg)
    base = _base_model(cfg, root, world)
    models = {}
    for topology in (TRIPLET, CONCAT):
        model = pipeline.adapter_model(base, cfg, topology)
        shared = {k: v for k, v in base.state_dict().items() if "attr" not in k}
        own = model.state_dict()
        if any(not torch.equal(v, own[k]) for k, v in shared.items() if k in own):
            raise ValidationError(f"{topology} model does not start from the shared backbone")
        trainer = pipeline.adapter_trainer(model, cfg, world, metrics_path=root / f"metrics_ablate_{topology}.jsonl")
        _train_stage(trainer, cfg, root / f"ablate_{topology}.ckpt", cfg.train.steps, f"ablate_{topology}")
        models[topology] = model.eval()
    refs = pipeline.eval_references(cfg, world)
    attrs = cfg.metrics.attributes or world.bank.attribute_names
    alphas = list(cfg.metrics.alphas)

    def grid(model):
        vals = np.stack([pipeline.sweep_responses(model, cfg, world, refs, a, alphas)["similarity"] for a in attrs],
                        axis=1)
        return vals

    reports = [metrics.SimilarityReport(list(attrs), alphas, grid(models[t]), cfg.hash(), t) for t in (TRIPLET, CONCAT)]
    ab = metrics.paired_deltas(*reports)
    out = root / "ablation"
    metrics.write_report(ab, out, "ablation")
    metrics.plot_strength_curves(reports, out / "strength_curves.png")
    metrics.plot_per_attribute(reports, out / "per_attribute.png")
    print(ab.to_text())
    return ab.to_dict()


def cmd_report(cfg, root: Path, args) -> dict:
    found = sorted(root.glob("ablation/*.json")) + sorted(root.glob("sweeps/*/similarity.json"))
    if not found:
        raise UsageError(f"no reports under {root}")
    out = {}
    for path in found:
        data = json.loads(path.read_text())
        if "a" in data:
            rep = metrics.paired_deltas(*(metrics.SimilarityReport(d["attributes"], d["alphas"], d["values"],
                                                                   d["config_hash"], d["label"])
                                          for d in (data["a"], data["b"])))
        else:
            rep = metrics.SimilarityReport(data["attributes"], data["alphas"], data["values"], data["config_hash"],
                                           data["label"])
        print(rep.to_text())
        out[str(path)] = rep.to_dict()
    return out


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "sweep": cmd_sweep, "ablate": cmd_ablate,
            "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attrdiff", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--checkpoint", help="checkpoint to resume from (train) or to load (sweep)")
    p.add_argument("--attribute", help="attribute to sweep")
    p.add_argument("--alphas", help="strengths, e.g. '0,0.5,1' or '0:2.5:0.5'")
    p.add_argument("--out", help=f"output root (else ${ENV_OUT}, else the config's out_dir)")
    p.add_argument("--topology", choices=(TRIPLET, CONCAT), default=TRIPLET, help=argparse.SUPPRESS)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = load_config(args)
        root = output_root(args, cfg)
        root.mkdir(parents=True, exist_ok=True)
        try:
            with FileLock(str(root / ".lock"), timeout=0):
                COMMANDS[args.command](cfg, root, args)
        except Timeout:
            raise AttrDiffError(f"another command holds the lock on {root}") from None
    except AttrDiffError as e:
        kind = {2: "error", 3: "validation failed"}.get(e.exit_code, "aborted")
        print(f"{kind}: {e}", file=sys.stderr)
        return e.exit_code
    except (RuntimeError, OSError) as e:
        print(f"aborted: {e}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
