"""Train the explorer on synthetic panoramas and compare glimpse policies.

Uses the 32x64 SMALL profile so a run fits on a laptop CPU (about 20 s per
epoch on one core). Reported numbers are RMSE on the 0-255 scale after each
glimpse, averaged over 200 test panoramas and 5 seeds.
"""

import sys
import time

import torch

from panoexplore.dataset import SynthSpec, iter_synth, stack_samples
from panoexplore.harness import evaluate, format_table
from panoexplore.trainer import TrainConfig, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 12
torch.set_num_threads(1)

imgs, labels = stack_samples(iter_synth(SynthSpec(2200, seed=1)), 32, 64)
train_imgs, test_imgs = imgs[:2000], imgs[2000:]

start = time.time()
cfg = TrainConfig(glimpses=6, batch_size=32, epochs=epochs, lr=1e-3, profile="small")
result = train(cfg, train_imgs)
print(f"trained {result.iteration} iterations in {time.time() - start:.0f}s")

reports = []
for policy in ("gt-oracle", "learned", "middle-random", "random", "neighborhood"):
    rep = evaluate(result.model, test_imgs, policy, T=6, seeds=range(5))
    reports.append(rep)
    print(f"{policy:>14}: " + " ".join(f"{x:6.2f}" for x in rep.rmse_curve))

print()
print(format_table(reports, reference=True))
