"""What the agent sees in one glimpse.

A glimpse covers a 3x3 block neighbourhood. The center block arrives at full
resolution, the ring of eight blocks at half resolution, so one glimpse costs
16*16 + 8*8*8 = 768 samples per channel instead of 48*48 = 2304.
"""

from pathlib import Path

import numpy as np
from PIL import Image

from panoexplore.dataset import SynthSpec, synth_sample, to_uint8
from panoexplore.glimpse import FULL_GRID, BlockIndex, coverage_fraction, extract_retina, footprint

out = Path("demo_out")
out.mkdir(exist_ok=True)

pano = synth_sample(SynthSpec(count=1, seed=7), 0)
print(f"panorama {pano.id}: {pano.pixels.shape}, class {pano.label}")

# an interior glimpse and one hanging over the top edge
for center in (BlockIndex(8, 4), BlockIndex(0, 0)):
    g = extract_retina(pano, center)
    blocks = footprint(center)
    valid = sum(ok for _, ok in blocks)
    print(f"center {tuple(center)}: {valid}/9 blocks valid, {g.sample_count} sensor samples")
    print("   footprint cols", sorted({b.col for b, _ in blocks}), "rows", sorted({b.row for b, _ in blocks}))
    Image.fromarray(to_uint8(g.canvas)).resize((192, 192), Image.NEAREST).save(out / f"retina_{center.col}_{center.row}.png")

# the pixel budget: T glimpses against the whole panorama
for T in (1, 5, 6, 8):
    print(f"T={T}: {100 * coverage_fraction(T):.2f}% of the panorama's pixels")
print(f"per glimpse: {FULL_GRID.samples_per_glimpse} samples")

Image.fromarray(to_uint8(pano.pixels)).save(out / "panorama.png")
print(f"images written to {out}/")
