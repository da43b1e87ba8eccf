"""Sweep one attribute for several references with a trained adapter.

Expects an output root produced by ``attrdiff prepare`` and ``attrdiff train``
with the same config, e.g. the reduced end-to-end config::

    python -c "import attrdiff.config as c; print(c.dump(c.reduced()))" > reduced.yaml
    attrdiff prepare --config reduced.yaml --out runs/r
    attrdiff train   --config reduced.yaml --out runs/r
    python demos/strength_sweep.py reduced.yaml runs/r glasses
"""
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from attrdiff import config, pipeline
from attrdiff.cli import model_from_checkpoint
from attrdiff.inference import to_image

cfg_path, root = sys.argv[1], Path(sys.argv[2])
attribute = sys.argv[3] if len(sys.argv) > 3 else "glasses"

cfg = config.load(cfg_path)
world = pipeline.load_world(root / "world", cfg)
model, _ = model_from_checkpoint(cfg, root / "triplet.ckpt")
refs = pipeline.eval_references(cfg, world, 4)
alphas = [0.0, 0.5, 1.0, 1.5, 2.0, 2.5]

result = pipeline.sweep_responses(model, cfg, world, refs, attribute, alphas)
s = pipeline.summary(result)
print("alpha     " + " ".join(f"{a:6.2f}" for a in alphas))
print("response  " + " ".join(f"{v:6.2f}" for v in s["mean_response"]))
print("identity  " + " ".join(f"{v:6.3f}" for v in s["mean_similarity"]))
print(f"spearman rho {s['spearman']:.3f}")

rows = [np.concatenate([to_image(img) for img in per_ref], axis=1) for per_ref in result["images"]]
grid = np.round(np.concatenate(rows, axis=0) * 255).astype(np.uint8)
out = root / f"sweep_grid_{attribute}.png"
Image.fromarray(grid).resize((grid.shape[1] * 8, grid.shape[0] * 8), Image.NEAREST).save(out)
print("wrote", out)
