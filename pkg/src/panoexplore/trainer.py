"""Episode rollout, losses and end-to-end training.

An episode takes T glimpses of each panorama in a batch. At every step the
retina canvas is reconstructed by the local U-Net, pasted into the fit-in
matrix, and its descriptor is stored in the fit-in feature vector. The local
L1 loss is charged every step; the multi-scale reconstruction losses and the
attention loss are charged after the last step only.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from .dataset import downsample_area
from .glimpse import GridGeometry, crop_batch, retina_batch, sensor_input
from .memory import EpisodeMemory, matrix_views, matrix_write, reset, vector_write
from .nets import CLASSIFICATION_MODES, Explorer, VGGClassifier, get_profile, make_vgg

log = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "iteration",
    "epoch",
    "L_local_mean",
    "L_16x32",
    "L_32x64",
    "L_64x128",
    "L_128x256",
    "L_attention",
    "L_class",
    "total",
]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    glimpses: int = 8
    batch_size: int = 16
    epochs: int = 1
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    profile: str = "full"
    classification: str = "off"  # off | from-recon | from-vector | upper-bound
    attention_target: str = "sparse"  # sparse | distribution
    augment: bool = True
    checkpoint_every: int = 0
    num_classes: int = 26

    def __post_init__(self):
        if self.glimpses < 1:
            raise ValueError("glimpses must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.classification not in (*CLASSIFICATION_MODES, "upper-bound"):
            raise ValueError(f"unknown classification mode {self.classification!r}")
        if self.attention_target not in ("sparse", "distribution"):
            raise ValueError("attention_target must be 'sparse' or 'distribution'")
        get_profile(self.profile)


# ---------------------------------------------------------------------------
# losses


def local_loss(recon: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Masked L1 per example: mean |recon - gt| over valid pixels and channels."""
    if recon.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(recon.shape)} vs {tuple(gt.shape)}")
    m = mask.to(recon.dtype).expand_as(recon)
    total = ((recon - gt).abs() * m).flatten(1).sum(1)
    count = m.flatten(1).sum(1)
    return torch.where(count > 0, total / count.clamp_min(1), torch.zeros_like(total))


def scale_losses(recons: list[torch.Tensor], panorama: torch.Tensor) -> torch.Tensor:
    """(B, len(recons)) L1 losses against the area-downsampled panorama."""
    out = []
    for r in recons:
        target = downsample_area(panorama, *r.shape[-2:])
        if target.shape != r.shape:
            raise ValueError(f"shape mismatch {tuple(r.shape)} vs {tuple(target.shape)}")
        out.append((r - target).abs().flatten(1).mean(1))
    return torch.stack(out, dim=1)


def patch_errors(recon: torch.Tensor, panorama: torch.Tensor, grid: GridGeometry) -> torch.Tensor:
    """Summed absolute error per grid patch, (B, patch_count), row-major ids."""
    err = (recon.double() - panorama.double()).abs().sum(1)
    B = err.shape[0]
    err = err.view(B, grid.rows, grid.block, grid.cols, grid.block).sum((2, 4))
    return err.flatten(1)


@dataclass
class AttentionTarget:
    label: torch.Tensor  # (B,) long
    distribution: torch.Tensor  # (B, patches) float64


def attention_target(final_recon: torch.Tensor, panorama: torch.Tensor, grid: GridGeometry) -> AttentionTarget:
    err = patch_errors(final_recon.detach(), panorama, grid)
    total = err.sum(1, keepdim=True)
    uniform = torch.full_like(err, 1.0 / err.shape[1])
    dist = torch.where(total > 0, err / total.clamp_min(1e-300), uniform)
    return AttentionTarget(dist.argmax(1), dist)


def attention_loss(logits: torch.Tensor, target: AttentionTarget, kind: str = "sparse") -> torch.Tensor:
    if kind == "sparse":
        return F.cross_entropy(logits, target.label, reduction="none")
    return -(target.distribution.to(logits.dtype) * F.log_softmax(logits, 1)).sum(1)


@dataclass
class LossBreakdown:
    local: torch.Tensor  # (T,)
    scales: torch.Tensor  # (4,)
    attention: torch.Tensor  # scalar
    classification: torch.Tensor | None = None

    def as_floats(self) -> dict:
        c = self.classification
        return {
            "local": self.local.detach().tolist(),
            "scales": self.scales.detach().tolist(),
            "attention": self.attention.item(),
            "classification": None if c is None else c.item(),
        }


def total_loss(b: LossBreakdown):
    """Unweighted sum of every present loss term."""
    total = sum(b.local) + sum(b.scales) + b.attention
    if b.classification is not None:
        total = total + b.classification
    return total


# ---------------------------------------------------------------------------
# glimpse selection


def masked_probs(logits: torch.Tensor, visited: torch.Tensor) -> torch.Tensor:
    """Softmax restricted to unvisited patches (float64)."""
    z = logits.detach().double().masked_fill(visited, -math.inf)
    return torch.softmax(z, dim=1)


def sample_from(probs: torch.Tensor, allowed: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """One inverse-CDF draw per row of a (B, N) probability table."""
    p = probs.numpy() if isinstance(probs, torch.Tensor) else np.asarray(probs)
    cdf = np.cumsum(p, axis=1)
    u = rng.random(p.shape[0]) * cdf[:, -1]
    idx = (cdf <= u[:, None]).sum(1)
    # guard the u ~ total edge against round-off: fall back to the last allowed id
    ok = allowed.numpy() if isinstance(allowed, torch.Tensor) else np.asarray(allowed)
    last = ok.shape[1] - 1 - np.argmax(ok[:, ::-1], axis=1)
    idx = np.minimum(idx, last)
    bad = ~ok[np.arange(len(idx)), idx]
    idx[bad] = last[bad]
    return torch.from_numpy(idx.astype(np.int64))


def select_next(logits: torch.Tensor, visited: torch.Tensor, mode: str, rng: np.random.Generator | None) -> torch.Tensor:
    if bool(visited.all(1).any()):
        raise ValueError("every patch has already been visited")
    probs = masked_probs(logits, visited)
    if mode == "eval":
        return probs.argmax(1)
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return sample_from(probs, ~visited, rng)


# ---------------------------------------------------------------------------
# episodes


@dataclass
class EpisodeState:
    t: int
    visited: torch.Tensor  # (B, patches) bool
    memory: EpisodeMemory
    rng: np.random.Generator
    trajectory: list[torch.Tensor] = field(default_factory=list)

    @property
    def current(self) -> torch.Tensor | None:
        return self.trajectory[-1] if self.trajectory else None

    def visited_ids(self, b: int) -> set[int]:
        return set(torch.nonzero(self.visited[b]).flatten().tolist())


@dataclass
class StepContext:
    panorama: torch.Tensor
    logits: torch.Tensor | None  # attention logits after the latest step
    recon: torch.Tensor | None  # latest full-scale reconstruction
    mode: str
    grid: GridGeometry


Policy = Callable[[EpisodeState, StepContext], torch.Tensor]


def learned_policy(state: EpisodeState, ctx: StepContext) -> torch.Tensor:
    return select_next(ctx.logits, state.visited, ctx.mode, state.rng)


@dataclass
class EpisodeResult:
    trajectory: torch.Tensor  # (B, T)
    breakdown: LossBreakdown
    recons: list[torch.Tensor]  # final reconstructions at every scale
    target: AttentionTarget
    step_recons: list[torch.Tensor] = field(default_factory=list)  # full scale, per step
    step_probs: list[torch.Tensor] = field(default_factory=list)  # distribution each step was drawn from
    step_local: list[torch.Tensor] = field(default_factory=list)  # (B,) local loss per step
    class_logits: torch.Tensor | None = None
    memory: EpisodeMemory | None = None
    final_logits: torch.Tensor | None = None  # attention after step T


def full_reconstruction(model: Explorer, memory: EpisodeMemory) -> list[torch.Tensor]:
    bg = model.background(memory.vector.flat)
    return model.upsampler(bg, matrix_views(memory.matrix, model.profile.scales))


def run_episode(
    model: Explorer,
    panorama: torch.Tensor,
    T: int,
    rng: np.random.Generator,
    policy: Policy | None = None,
    mode: str = "train",
    labels: torch.Tensor | None = None,
    record: bool = False,
    attention_kind: str = "sparse",
    first: torch.Tensor | None = None,
) -> EpisodeResult:
    """Roll out T glimpses on a (B, 3, H, W) batch.

    The first center is drawn uniformly from all patches with `rng` unless
    given in `first`; later centers come from `policy` (default: the learned
    attention head via `select_next`).
    """
    p = model.profile
    grid = p.grid
    if panorama.shape[-2:] != p.image_size:
        raise ValueError(f"panorama must be {p.image_size}, got {tuple(panorama.shape[-2:])}")
    if T > grid.patch_count:
        raise ValueError("T exceeds the number of patches")
    policy = policy or learned_policy
    B = panorama.shape[0]
    use_class_vector = model.classification == "from-vector"
    memory = reset(B, grid, p.features, with_class=use_class_vector, dtype=panorama.dtype)
    state = EpisodeState(0, torch.zeros(B, grid.patch_count, dtype=torch.bool), memory, rng)
    needs_recon = record or getattr(policy, "needs_recon", False)
    uniform = torch.full((B, grid.patch_count), 1.0 / grid.patch_count, dtype=torch.float64)

    logits = recon_full = None
    local_terms, step_recons, step_probs = [], [], []
    recons = None
    for t in range(1, T + 1):
        ctx = StepContext(panorama, logits, recon_full, mode, grid)
        if t == 1:
            centers = first if first is not None else torch.from_numpy(rng.integers(0, grid.patch_count, B))
            probs = uniform
        else:
            if record:
                probs = _policy_probs(policy, state, ctx)
            centers = policy(state, ctx)
        centers = torch.as_tensor(centers, dtype=torch.long)
        if bool(state.visited[torch.arange(B), centers].any()):
            raise RuntimeError("policy returned an already visited patch")

        canvas, full, valid = retina_batch(panorama, centers, grid)
        gt, _ = crop_batch(panorama, centers, grid)
        glimpse_recon, bottleneck = model.local(sensor_input(canvas, full, valid))
        local_terms.append(local_loss(glimpse_recon, gt, valid))

        matrix_write(memory.matrix, glimpse_recon, centers, valid, grid)
        vector_write(memory.vector, model.descriptor(bottleneck), centers, grid)
        if use_class_vector:
            # classification features never train the reconstruction path
            vector_write(memory.class_vector, model.class_features(bottleneck.detach()), centers, grid)

        state.t = t
        state.visited = state.visited.clone()
        state.visited[torch.arange(B), centers] = True
        state.trajectory.append(centers)
        logits = model.attention(memory.vector.flat)

        if t == T:
            recons = full_reconstruction(model, memory)
            recon_full = recons[-1]
        elif needs_recon:
            with torch.no_grad():
                recon_full = full_reconstruction(model, memory)[-1]
        if record:
            step_recons.append(recon_full.detach())
            step_probs.append(probs)

    target = attention_target(recons[-1], panorama, grid)
    att = attention_loss(logits, target, attention_kind)
    cls_logits = cls_loss = None
    if model.classification == "from-recon":
        cls_logits = model.recon_classifier(recons[-1])
    elif use_class_vector:
        cls_logits = model.vector_classifier(memory.class_vector.flat)
    if cls_logits is not None and labels is not None:
        cls_loss = F.cross_entropy(cls_logits, labels).reshape(())

    breakdown = LossBreakdown(
        torch.stack([x.mean() for x in local_terms]),
        scale_losses(recons, panorama).mean(0),
        att.mean(),
        cls_loss,
    )
    return EpisodeResult(
        torch.stack(state.trajectory, dim=1),
        breakdown,
        recons,
        target,
        step_recons,
        step_probs,
        [x.detach() for x in local_terms],
        cls_logits,
        memory,
        logits.detach(),
    )


def _policy_probs(policy, state, ctx) -> torch.Tensor:
    probs = getattr(policy, "probs", None)
    if probs is not None:
        return probs(state, ctx)
    if ctx.logits is None:
        raise ValueError("learned policy needs attention logits")
    return masked_probs(ctx.logits, state.visited)


# ---------------------------------------------------------------------------
# training


def build_model(config: TrainConfig):
    profile = get_profile(config.profile, config.num_classes)
    torch.manual_seed(config.seed)
    if config.classification == "upper-bound":
        return make_vgg(profile)
    return Explorer(profile, config.classification)


_CLASS_HEADS = ("recon_classifier.", "class_features.", "vector_classifier.")


def transfer(model: Explorer, classification: str, seed: int = 0) -> Explorer:
    """A new explorer with `model`'s reconstruction weights and freshly initialised classification layers."""
    if not isinstance(model, Explorer):
        raise ValueError("transfer needs an exploration model")
    torch.manual_seed(seed)
    out = Explorer(model.profile, classification)
    shared = {k: v for k, v in model.state_dict().items() if not k.startswith(_CLASS_HEADS)}
    out.load_state_dict(shared, strict=False)
    return out


def wrap_batch(images: torch.Tensor, offsets) -> torch.Tensor:
    return torch.stack([torch.roll(x, int(o), dims=-1) for x, o in zip(images, offsets)])


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, torch.Tensor):
        x = x.detach().item()
    return f"{x:.9g}"


def metric_row(iteration: int, epoch: int, b: LossBreakdown | None, total, class_loss=None) -> dict:
    if b is None:
        scales = [None] * 4
        local = att = None
    else:
        scales = list(b.scales)
        local, att = b.local.mean(), b.attention
        class_loss = b.classification
    return dict(
        zip(
            METRIC_COLUMNS,
            [str(iteration), str(epoch), _fmt(local), *map(_fmt, scales), _fmt(att), _fmt(class_loss), _fmt(total)],
        )
    )


def make_optimizer(model, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=config.lr, betas=(config.beta1, config.beta2), eps=config.eps)


def checkpoint_header(model, config: TrainConfig, iteration: int, epoch: int, batch: int, rng_epoch, rng) -> dict:
    profile = model.profile if isinstance(model, Explorer) else get_profile(config.profile, config.num_classes)
    return {
        "kind": "upper-bound" if isinstance(model, VGGClassifier) else "explorer",
        "profile": profile.name,
        "num_classes": profile.num_classes,
        "classification": config.classification,
        "iteration": iteration,
        "epoch": epoch,
        "batch_in_epoch": batch,
        "rng_epoch_state": rng_epoch,
        "rng_state": rng,
        "config": asdict(config),
    }


def load_model(path):
    """Rebuild a model from a checkpoint; returns (model, header, tensors)."""
    header, tensors = ckpt.read_checkpoint(path)
    profile = get_profile(header["profile"], header.get("num_classes"))
    if header.get("kind") == "upper-bound":
        model = make_vgg(profile)
    else:
        model = Explorer(profile, header.get("classification", "off"))
    ckpt.load_into(model, tensors)
    return model, header, tensors


@dataclass
class TrainResult:
    model: torch.nn.Module
    optimizer: torch.optim.Optimizer
    iteration: int
    rows: list[dict]
    checkpoints: list[Path]


def train(
    config: TrainConfig,
    images: torch.Tensor,
    labels: torch.Tensor | None = None,
    out_dir=None,
    resume=None,
    model=None,
) -> TrainResult:
    """Train on (N, 3, H, W) images at the profile's resolution.

    With `out_dir`, metrics are appended to ``metrics.csv`` and checkpoints are
    written every `checkpoint_every` iterations plus a final one.
    """
    N = images.shape[0]
    if N == 0:
        raise ValueError("training split is empty")
    needs_labels = config.classification != "off"
    if needs_labels and (labels is None or bool((labels < 0).any())):
        raise ValueError(f"classification mode {config.classification!r} needs labels for every image")

    rng = np.random.default_rng(config.seed)
    iteration, start_epoch, skip = 0, 0, 0
    epoch_state = rng.bit_generator.state
    if resume is not None:
        model, header, tensors = load_model(resume)
        optimizer = make_optimizer(model, config)
        ckpt.restore_optimizer(optimizer, model, header, tensors)
        iteration = header["iteration"]
        start_epoch, skip = header["epoch"], header["batch_in_epoch"]
        epoch_state = header["rng_epoch_state"]
        rng.bit_generator.state = header["rng_state"]
    else:
        model = model or build_model(config)
        optimizer = make_optimizer(model, config)
    model.train()

    is_ub = isinstance(model, VGGClassifier)
    profile = get_profile(config.profile, config.num_classes)
    if images.shape[-2:] != profile.image_size:
        raise ValueError(f"images must be {profile.image_size} for profile {profile.name}")
    W = images.shape[-1]
    out_dir = Path(out_dir) if out_dir is not None else None
    writer = metrics_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "metrics.csv"
        fresh = resume is None or not path.exists()
        metrics_file = open(path, "w" if fresh else "a", newline="")
        writer = csv.DictWriter(metrics_file, METRIC_COLUMNS, lineterminator="\n")
        if fresh:
            writer.writeheader()

    n_batches = math.ceil(N / config.batch_size)
    rows, saved = [], []

    def save(name, epoch, batch):
        if out_dir is None:
            return
        path = out_dir / name
        hdr = checkpoint_header(model, config, iteration, epoch, batch, epoch_state, rng.bit_generator.state)
        ckpt.save_checkpoint(path, model, hdr, optimizer)
        saved.append(path)

    try:
        for epoch in range(start_epoch, config.epochs):
            if epoch != start_epoch or resume is None:
                epoch_state = rng.bit_generator.state
                perm = rng.permutation(N)
                first_batch = 0
            else:
                current = rng.bit_generator.state
                rng.bit_generator.state = epoch_state
                perm = rng.permutation(N)
                rng.bit_generator.state = current
                first_batch = skip
            for b in range(first_batch, n_batches):
                idx = torch.from_numpy(perm[b * config.batch_size : (b + 1) * config.batch_size])
                batch = images[idx]
                if config.augment:
                    batch = wrap_batch(batch, rng.integers(0, W, len(idx)))
                batch_labels = labels[idx] if labels is not None else None
                if is_ub:
                    loss = F.cross_entropy(model(batch), batch_labels)
                    breakdown = None
                else:
                    res = run_episode(
                        model, batch, config.glimpses, rng, mode="train", labels=batch_labels,
                        attention_kind=config.attention_target,
                    )
                    breakdown = res.breakdown
                    loss = total_loss(breakdown)
                if not torch.isfinite(loss):
                    detail = breakdown.as_floats() if breakdown else {"classification": loss.item()}
                    raise TrainingDiverged(f"non-finite loss at iteration {iteration + 1}: {detail}")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                iteration += 1
                row = metric_row(iteration, epoch, breakdown, loss.detach(), loss.detach() if is_ub else None)
                rows.append(row)
                if writer:
                    writer.writerow(row)
                if config.checkpoint_every and iteration % config.checkpoint_every == 0:
                    save(f"checkpoint_{iteration:06d}.pxck", epoch, b + 1)
            log.info("epoch %d done at iteration %d", epoch, iteration)
        if config.epochs > start_epoch:
            final_epoch, final_batch = config.epochs - 1, n_batches
        else:
            final_epoch, final_batch = start_epoch, skip
        save("checkpoint_final.pxck", final_epoch, final_batch)
    finally:
        if metrics_file:
            metrics_file.close()
    model.eval()
    return TrainResult(model, optimizer, iteration, rows, saved)


@torch.no_grad()
def eval_losses(model: Explorer, images: torch.Tensor, T: int, seed: int, labels=None) -> dict:
    """Loss breakdown of eval-mode episodes on a fixed batch."""
    model.eval()
    res = run_episode(model, images, T, np.random.default_rng(seed), mode="eval", labels=labels)
    out = res.breakdown.as_floats()
    out["total"] = float(total_loss(res.breakdown))
    return out
