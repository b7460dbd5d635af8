"""The two spatial memories, filled with perfect glimpses.

With ground-truth crops in place of the local reconstructor, the fit-in
matrix reproduces the panorama exactly wherever it has been written, and the
multi-scale views the upsampler reads are plain area averages of it.
"""

import numpy as np
import torch

from panoexplore.dataset import SynthSpec, stack_samples, synth_generate
from panoexplore.glimpse import FULL_GRID, block_of, crop_batch
from panoexplore.memory import FitInFeatureVector, FitInMatrix, matrix_views, matrix_write, slot_of, vector_write

pano, _ = stack_samples(synth_generate(SynthSpec(count=1, seed=3)), 128, 256)
m = FitInMatrix.zeros(1)
v = FitInFeatureVector.zeros(1)
rng = np.random.default_rng(0)

for t, p in enumerate(rng.choice(128, 6, replace=False), start=1):
    center = torch.tensor([int(p)])
    crop, valid = crop_batch(pano, center, FULL_GRID)
    m = matrix_write(m, crop, center, valid)
    # a stand-in descriptor: the mean colour of the glimpse, repeated
    v = vector_write(v, crop.mean((2, 3)).repeat(1, 43)[:, :128], center)
    b = block_of(int(p))
    occ = m.occupancy.float().mean().item()
    print(f"step {t}: patch {int(p):3d} (col {b.col:2d}, row {b.row}) -> slot {slot_of(b):2d}; {100 * occ:.1f}% of pixels observed")

occ = m.occupancy.expand_as(pano)
print("matrix equals panorama on observed pixels:", torch.equal(m.data[occ], pano[occ]))
print("occupied slots:", torch.nonzero(v.occupied[0]).flatten().tolist())

SCALES = [(16, 32), (32, 64), (64, 128), (128, 256)]
for (data, frac), (h, w) in zip(matrix_views(m, SCALES), SCALES):
    print(f"view {h}x{w}: {int((frac > 0).sum())} cells touched, {int((frac == 1).sum())} fully observed")
