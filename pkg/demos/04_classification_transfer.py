"""Scene classification from what the agent has seen.

A full-image VGG gives the upper bound. The transfer setting starts from a
trained explorer, puts a VGG on its final reconstruction and fine-tunes the
whole network with the classification loss added.
"""

import sys

import torch

from panoexplore.dataset import SynthSpec, iter_synth, stack_samples
from panoexplore.harness import classification_accuracy
from panoexplore.trainer import TrainConfig, train, transfer

pre_epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 8
ft_epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 6
torch.set_num_threads(1)

imgs, labels = stack_samples(iter_synth(SynthSpec(2200, seed=1)), 32, 64)
tr, te, ytr, yte = imgs[:2000], imgs[2000:], labels[:2000], labels[2000:]

upper = train(TrainConfig(batch_size=32, epochs=8, lr=1e-3, profile="small", classification="upper-bound"), tr, ytr)
print(f"full-image upper bound: {classification_accuracy(upper.model, te, yte, 'upper-bound'):.3f}")

base = train(TrainConfig(glimpses=6, batch_size=32, epochs=pre_epochs, lr=1e-3, profile="small"), tr).model
# a lower rate for fine-tuning: at 1e-3 the joint run is slow and unstable
cfg = TrainConfig(glimpses=8, batch_size=32, epochs=ft_epochs, lr=3e-4, profile="small", classification="from-recon")
tuned = train(cfg, tr, ytr, model=transfer(base, "from-recon")).model
for T in (2, 4, 8):
    acc = classification_accuracy(tuned, te, yte, "from-recon", T=T, seeds=range(3))
    print(f"from reconstruction after {T} glimpses: {acc:.3f}")
