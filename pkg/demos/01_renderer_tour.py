"""
A tour of the lesion renderer
=============================

Every image comes from an 8 x 6 latent matrix ``w[dim, layer]``.  Coarse
layers place and shape the lesion, fine layers paint patterns inside it.
Six of the coordinates are concepts: a concept is present when its
coordinate is positive.

Run from the repository root::

    python3 demos/01_renderer_tour.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from gencbm.formats import write_image
from gencbm.grounding import quantize
from gencbm.renderer import DEFAULT_VOCAB, LatentSpec, derive_params, lesion_support, render, true_concepts

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/renderer")
out.mkdir(parents=True, exist_ok=True)
spec = LatentSpec()

# The all-zero latent sits in the middle of every parameter range.
w0 = np.zeros(spec.shape)
print(derive_params(w0))
write_image(out / "zero.ppm", quantize(render(w0, spec)))

# Push each concept coordinate to -2 and +2 and keep everything else at zero.
# The pair of images shows what the concept looks like and where it lives.
for c in DEFAULT_VOCAB.concepts:
    pair = []
    for sign, tag in ((-1, "off"), (1, "on")):
        w = w0.copy()
        w[c.dim, c.layer] = 2.0 * sign
        pair.append(render(w, spec))
        write_image(out / f"{c.name}_{tag}.ppm", quantize(pair[-1]))
    changed = np.abs(pair[1] - pair[0]).max(axis=-1) > 4 / 255
    print(f"{c.name:>16}: coordinate (layer {c.layer}, dim {c.dim}), {int(changed.sum())} pixels change visibly")

# A random latent carries a random subset of the concepts.
rng = np.random.default_rng(0)
w = rng.standard_normal(spec.shape)
labels = true_concepts(w)
print("random latent has:", [n for n, y in zip(DEFAULT_VOCAB.names, labels) if y])
print("lesion support:", int(lesion_support(w, spec).sum()), "of", spec.image_size ** 2, "pixels")
write_image(out / "random.ppm", quantize(render(w, spec)))
print("images written to", out)
