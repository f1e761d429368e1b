"""
How wide is a belief interval, and how often does it hold?
==========================================================

Within one stain/blur group the cell count rises with the mean intensity.
The belief interval brackets a test image's count between two least-squares
curves: one through each count's dimmest training image (upper bound) and
one through each count's brightest (lower bound).

Its coverage depends mostly on how many training images each count has,
because a fresh image lands inside its count's training range only if it
is neither the dimmest nor the brightest of the lot.
"""

# %%
# Setup
# -----
import tempfile
from pathlib import Path

import numpy as np

from cellcount.ensemble import fit_belief_model
from cellcount.imaging import average_intensity, read_pgm
from cellcount.synth import GROUPS, generate_dataset, read_manifest

root = Path(tempfile.mkdtemp(prefix="belief_demo_"))

# %%
# Coverage against the number of training images per count
# --------------------------------------------------------
# Each setting renders its own dataset with a 2:1 split.
for per_count in (5, 10, 25):
    manifest = generate_dataset(root / f"n{per_count}", images_per_count_per_group=per_count, rng_seed=0)
    intensity = {r.image_path: average_intensity(read_pgm(manifest.path_of(r))) for r in manifest.records}
    hits, widths = [], []
    for group in GROUPS:
        train = [r for r in manifest.train() if r.group == group]
        test = [r for r in manifest.test() if r.group == group]
        model = fit_belief_model([intensity[r.image_path] for r in train], [r.count for r in train], *group)
        for r in test:
            lo, hi = model.interval_at(intensity[r.image_path])
            hits.append(lo <= r.count <= hi)
            widths.append(hi - lo)
    n_train = len(manifest.train()) // (len(GROUPS) * len(manifest.count_grid))
    print(f"{n_train:>2} train images per count: coverage {np.mean(hits):5.1%}, "
          f"median width {np.median(widths):5.2f} counts")

# %%
# The same effect without images
# ------------------------------
# Draw n noisy intensities per count, fit the envelopes, and ask how often a
# fresh draw falls inside.  If every count kept its own min and max, the
# answer would be (n - 1) / (n + 1): the chance that a new draw is neither
# the smallest nor the largest of n + 1.  One curve fitted across all counts
# smooths those extremes and buys a few points more, but not enough to reach
# 90% before n is in the mid-teens.
rng = np.random.default_rng(0)
grid = np.array(read_manifest(root / "n5").count_grid, dtype=float)
for n in (3, 5, 9, 17):
    hits = []
    for _ in range(200):
        counts = np.repeat(grid, n)
        model = fit_belief_model(counts + rng.normal(0, 2, counts.size), counts, "nuclei", 1)
        test = rng.choice(grid, 200)
        for c, x in zip(test, test + rng.normal(0, 2, test.size)):
            lo, hi = model.interval_at(x)
            hits.append(lo <= c <= hi)
    print(f"n = {n:>2}: simulated coverage {np.mean(hits):5.1%}, (n-1)/(n+1) = {(n - 1) / (n + 1):5.1%}")
