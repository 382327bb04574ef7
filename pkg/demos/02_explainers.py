"""
Explaining a toy classifier
===========================

Trains the small numpy CNN on synthetic shapes for a few epochs, then asks
three explainers why it predicted what it did for one held-out image. The
maps are compared with a density map built from points clicked on the shape.
"""

import sys
from pathlib import Path

import numpy as np

from xstab.core import save_image
from xstab.errors import ZeroMassError, ZeroVarianceError
from xstab.explainers import FusionWeights, fem, gradcam, mlfem, mlfem_layer_maps, overlay
from xstab.metrics import pcc, sim
from xstab.model import ToyCNN, synth_dataset, synth_fixations, train
from xstab.reference import FixationSet, gfdm

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "explainers"
out.mkdir(parents=True, exist_ok=True)

# five epochs of plain SGD; the loss should drift down
history = []
model = train(ToyCNN(), synth_dataset(300, seed=0), epochs=5, seed=0, history=history)
print("loss per epoch:", np.round(history, 3))

# one image the model has not seen, with its object mask
img, label, mask = synth_dataset(1, seed=99, return_masks=True)[0]
cache = model.forward(img)
print(f"true label {label}, predicted {cache.label} (p = {cache.score:.2f})")

# observers "click" inside the shape; a Gaussian on each click gives the reference map
clicks = synth_fixations(mask, 15, np.random.default_rng(0))
ref = gfdm(FixationSet("demo", clicks, 64, 64))

last = model.n_layers - 1
grad = model.grad_wrt_activation(cache, cache.label, last)
maps = {
    "fem": fem(cache.activations[last], out_w=64, out_h=64),
    "gradcam": gradcam(cache.activations[last], grad, 64, 64),
    # uniform layer weights here; the evaluation pipeline fits them to gaze maps
    "mlfem": mlfem(mlfem_layer_maps(cache), FusionWeights.uniform(model.n_layers)),
}

save_image(img, out / "image.png")
save_image(overlay(img, ref), out / "gfdm.png")
for name, m in maps.items():
    save_image(overlay(img, m), out / f"{name}.png")
    try:
        print(f"{name:8s} PCC {pcc(m, ref):+.3f}  SIM {sim(m, ref):.3f}")
    except (ZeroVarianceError, ZeroMassError) as exc:  # a flat map has no correlation
        print(f"{name:8s} {exc}")
print("overlays written to", out)
