"""Extract an attribute direction from paired latents and edit a face with it.

Run: python demos/edit_latents.py [attribute] [out.png]
"""
import sys

import numpy as np
from PIL import Image

from attrdiff.latent_space import apply_edit, cosine, extract_direction
from attrdiff.world import sample_params, render
from attrdiff.world.latent_map import LatentMap

attribute = sys.argv[1] if len(sys.argv) > 1 else "smile"
out = sys.argv[2] if len(sys.argv) > 2 else "edit_strip.png"

rng = np.random.default_rng(0)
lm = LatentMap.from_seed(0)

# 50 faces, each with a random positive push on one attribute, observed through a noisy encoder
thetas = sample_params(rng, 50)
edited, unedited = lm.paired_latents(thetas, attribute, rng.uniform(0.3, 1.0, 50), rng=rng, noise=0.01)
d = extract_direction(edited, unedited, attribute)
print(f"cosine to the true direction: {cosine(d.delta, lm.analytic_direction(attribute).delta):.5f}")

# edit one face; the renderer shows what the edited latent decodes to
face = thetas[0]
w = lm.embed(face)
alphas = [0.0, 0.5, 1.0, 1.5, 2.0]
frames = []
for a in alphas:
    theta = lm.recover(apply_edit(w, d, a))
    print(f"alpha {a:.1f}: {attribute} factor {theta.get(attribute):+.3f}")
    frames.append(render(theta, 32))

strip = np.concatenate(frames, axis=1)
Image.fromarray(np.round(strip * 255).astype(np.uint8)).resize((strip.shape[1] * 4, strip.shape[0] * 4),
                                                                Image.NEAREST).save(out)
print("wrote", out)
