"""Encode one photo at several grid spacings and look at size and quality.

Run:  python demos/01_codec_tour.py [image]   (defaults to a scikit-image sample)
"""
import os
import sys

import numpy as np

from crayon.dataset import center_crop, read_image
from crayon.grid_codec import CgcFile, GridSpec, encode, naive_fill_decode, relative_size_bound
from crayon.metrics import csim, psnr

if len(sys.argv) > 1:
    path = sys.argv[1]
else:
    import skimage.data
    path = os.path.join(os.path.dirname(skimage.data.__file__), "coffee.png")

img = center_crop(read_image(path), 320)
raw = 3 * img.width * img.height
print(f"{os.path.basename(path)} -> {img.width}x{img.height}, {raw} raw RGB bytes")

# the file is a full L plane plus one (a, b) pair every n pixels in each direction
print(f"{'n':>4} {'bytes':>8} {'ratio':>8} {'bound':>8} {'psnr':>7} {'csim':>6}")
for n in (1, 6, 20, 50, 100):
    cgc = encode(img, GridSpec(n))
    blob = cgc.to_bytes()
    back = naive_fill_decode(CgcFile.from_bytes(blob))  # nearest-sample chroma, no network
    print(f"{n:>4} {len(blob):>8} {len(blob) / raw:>8.4f} {relative_size_bound(n):>8.4f} "
          f"{psnr(img, back):>7.2f} {csim(img, back):>6.3f}")

# n=1 keeps every chroma sample: 3 bytes per pixel again, so no saving (the bound says 4/3)
# past n~20 the ratio is essentially the 1/3 of the L plane alone

# the grid itself: which pixels carry colour at n=20
cgc = encode(img, GridSpec(20))
print("samples grid:", cgc.ab_samples.shape[:2], "first row a-128:", cgc.ab_samples[0, :6, 0].astype(int) - 128)
