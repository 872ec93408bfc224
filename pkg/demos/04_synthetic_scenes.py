"""
Synthetic digits, mask pairs, and detection scenes
==================================================

Training data is generated, not downloaded: a bank of stroke-rendered
digit instances feeds two generators, one producing mask pairs for the
matcher and one producing cluttered scenes with ground-truth boxes for
the localizer.
"""

import pathlib

import numpy as np

from warpfit.data import (gen_composites, gen_mask_pairs, load_masks_dir,
                          synth_digit_bank, tile_to_canvas)
from warpfit.imaging import write_png_gray

out_dir = pathlib.Path("demo_out/scenes")
out_dir.mkdir(parents=True, exist_ok=True)
rng = np.random.default_rng(42)

# Each call renders fresh instances: per-class stroke skeletons with
# random rotation, scale, shear, translation, jitter, and stroke width.
digits, labels = synth_digit_bank(per_class=4, rng=rng)
print("bank:", digits.shape, "labels 0..9 x4:", np.bincount(labels).tolist())
write_png_gray(out_dir / "digit_grid.png",
               np.concatenate([np.concatenate(list(digits[i::10][:4]), axis=1)
                               for i in range(0, 10, 3)], axis=0))

# Matcher data: same-class pairs rendered as binary masks, written as
# NNNNN_moving.png / NNNNN_fixed.png and reloaded with a 128 threshold.
n = gen_mask_pairs(out_dir / "pairs", digits, labels, 6, rng)
pairs = load_masks_dir(out_dir / "pairs")
print("mask pairs written:", n, "reloaded:", len(pairs))

# Localizer data: the fixed image hides one instance of the target class
# among distractors of other classes; the moving channel tiles a
# different instance of the same class across the whole canvas, so any
# local window carries the full pattern to compare against.
scenes = gen_composites(out_dir / "loc", digits, labels, 4, rng,
                        distractors=(1, 3))
s = scenes[0]
print("scene: target class", s["target_class"], "box", s["box"])
write_png_gray(out_dir / "scene_fixed.png", s["fixed"])
write_png_gray(out_dir / "scene_moving.png", s["moving"])

# The same tiling is applied at inference time to whatever template the
# caller provides.
tiled = tile_to_canvas(digits[0], 112)
print("tiled conditioning canvas:", tiled.shape)
print("wrote", sorted(p.name for p in out_dir.iterdir()))
