"""
Filling a missing count with max-overlay images
===============================================

A classifier trained on counts {1, 5, 10, ...} can never answer 14.  Here we
render a few plates, drop count 14 from training, and build replacement
images by overlaying plates whose counts sum to 14.

Run with ``python demos/overlay_augmentation.py [output_dir]``.
"""

# %%
# Setup
# -----
import sys
import tempfile
from pathlib import Path

import numpy as np

from cellcount.augment import augment_missing_counts, load_formula_fixtures, parse_formula, pools_for_round
from cellcount.imaging import Stain, average_intensity, pixelwise_max, write_pgm
from cellcount.synth import Provenance, delete_counts, generate_dataset, render_plate

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="overlay_demo_"))
out.mkdir(parents=True, exist_ok=True)

# %%
# One overlay by hand
# -------------------
# Overlaying a 5-cell and a 10-cell plate gives an image we label 15.  The
# overlay can only brighten pixels, so its mean intensity is at least that of
# either donor.
five = render_plate(5, Stain.NUCLEI, 1, rng_seed=1)
ten = render_plate(10, Stain.NUCLEI, 1, rng_seed=2)
fifteen = pixelwise_max([five, ten])
for name, img in (("five", five), ("ten", ten), ("fifteen", fifteen)):
    write_pgm(img, out / f"{name}.pgm")
    print(f"{name:>8}: mean intensity {average_intensity(img):6.2f}")

real = render_plate(15, Stain.NUCLEI, 1, rng_seed=3)
print(f"real 15 : mean intensity {average_intensity(real):6.2f}")

# %%
# Blur makes overlays look dimmer than real plates
# ------------------------------------------------
# Each cell's blur halo spreads over its neighbours.  A real plate adds
# those halos up; a max overlay keeps only the brighter one, and cells of
# different donors may also sit on top of each other.  A synthetic 83 reads
# darker than a real 83, and the gap grows with blur.
for blur in (1, 23, 48):
    donors = [render_plate(c, Stain.BODY, blur, rng_seed=10 + k) for k, c in enumerate((40, 23, 10, 10))]
    synth = pixelwise_max(donors)
    reals = [average_intensity(render_plate(83, Stain.BODY, blur, rng_seed=s)) for s in range(20, 25)]
    print(f"blur {blur:>2}: overlay 83 -> {average_intensity(synth):6.2f}, real 83 -> {np.mean(reals):6.2f}")

# %%
# The packaged formula pools
# --------------------------
# Each deleted count has a pool of alternative decompositions.  A synthetic
# image draws one uniformly.
pools = pools_for_round(load_formula_fixtures("exp2"), 1)
for f in pools[14].formulae:
    print("  ", f)
print("parsed by hand:", parse_formula("15 = 5x(1) + 10x(1)").terms)

# %%
# Augmenting a dataset
# --------------------
# 25 plates per count leave 17 train images per count and group, enough
# distinct donors for every formula of round 1.
ds = out / "dataset"
manifest = generate_dataset(ds, images_per_count_per_group=25, rng_seed=0)
trimmed = delete_counts(manifest, {14, 35, 57, 66, 83})
print("missing from training:", sorted(set(manifest.count_grid) - trimmed.train_labels()))
augmented = augment_missing_counts(trimmed, pools, 6, rng_seed=0)
added = [r for r in augmented.records if r.provenance is Provenance.SYNTH_DA]
print(f"added {len(added)} synthetic images; missing now:",
      sorted(set(manifest.count_grid) - augmented.train_labels()))
print("images written under", out)
