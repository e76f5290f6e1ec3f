"""Train the colorizer on eight 64x64 photos for a handful of steps.

A short version of the overfit smoke test: the full network (24M weights),
one batch of 8 crops, ADAM. Pass a step count to go further, e.g.
    python demos/03_overfit_tiny.py 40
Each step takes several seconds on one core. Reconstructions are written to
overfit_strip.png: original / naive fill / network, one row per image.
"""
import os
import sys
import tempfile

import numpy as np
from PIL import Image
import skimage.data

from crayon.crayon_net import build_crayon
from crayon.dataset import center_crop, read_image, sample_from_rgb
from crayon.grid_codec import GridSpec, encode, naive_fill_decode
from crayon.metrics import psnr, reconstruct
from crayon.training import TrainConfig, train_samples

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 5
n = 6
root = os.path.dirname(skimage.data.__file__)
names = ["astronaut.png", "coffee.png", "chelsea.png", "rocket.jpg",
         "motorcycle_left.png", "hubble_deep_field.jpg", "retina.jpg", "ihc.png"]
crops = [center_crop(read_image(os.path.join(root, k)), 64) for k in names]
samples = [sample_from_rgb(c, GridSpec(n), k) for c, k in zip(crops, names)]

model = build_crayon(seed=0)
cfg = TrainConfig(n=n, epochs=steps, lr=1e-4, batch_size=8, crop=64, checkpoint_dir=tempfile.mkdtemp())
ckpt, reports, model = train_samples(cfg, samples, samples, model)
for r in reports:
    print(f"step {r.epoch:>3}  loss {r.train_loss:.5f}  psnr {r.val_psnr:.2f}{'  *' if r.canonical else ''}")

rows = []
for s, c in zip(samples, crops):
    naive = naive_fill_decode(encode(c, GridSpec(n)))
    net = reconstruct(model.predict, s.l, s.hints.ab)
    print(f"{s.source_path:<22} naive {psnr(c, naive):6.2f} dB   network {psnr(c, net):6.2f} dB")
    rows.append(np.concatenate([c.data, naive.data, net.data], axis=1))
Image.fromarray(np.concatenate(rows, axis=0)).save("overfit_strip.png")
print("wrote overfit_strip.png; best checkpoint", ckpt)
