"""
How stable is FEM under growing noise?
======================================

Runs the noise protocol (k = 25 ... 200, three draws per level) on ten
held-out shapes and prints the Lipschitz estimate per level together with the
percentage change between neighbouring levels.
"""

import sys
import tempfile

import numpy as np

from xstab.distortions import NOISE_LEVELS
from xstab.metrics import stability_series
from xstab.pipeline import RunConfig, make_desk_corpus, run_evaluation

work = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp()
paths = make_desk_corpus(work, n_images=10, seed=1234)

cfg = RunConfig.from_dict(
    dict(
        **paths,
        train_toy=5,
        explainers=["fem", "gradcam"],
        distortions=[{"family": "noise", "levels": list(NOISE_LEVELS), "variants": 3}],
        seed=42,
    )
)
report = run_evaluation(cfg)

# L per image is the worst ratio over the three draws of a level
for name in cfg.explainers:
    L = []
    for li in range(len(NOISE_LEVELS)):
        per_image = {}
        for r in report.results.records:
            if r.explainer == name and r.level_index == li:
                per_image[r.image_id] = max(per_image.get(r.image_id, 0.0), r.ratio)
        L.append(np.mean(list(per_image.values())))
    s = stability_series(L)
    print(name)
    for k, value in zip(NOISE_LEVELS, L):
        print(f"  k = {k:3d}  L = {value:.3e}")
    print("  s% between levels:", " ".join(f"{x:.1f}" for x in s))

# how many draws kept their label
for row in report.data["counts"]:
    print(f"k = {row['level']:5.0f}: well {row['well']:2d}, badly {row['badly']:2d}")
