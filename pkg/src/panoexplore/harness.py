"""Baseline policies, reconstruction metrics and evaluation runs."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .glimpse import GridGeometry, block_of, footprint, patch_index
from .nets import Explorer, VGGClassifier
from .trainer import EpisodeState, StepContext, masked_probs, patch_errors, run_episode, sample_from, select_next

POLICY_KINDS = ("learned", "random", "middle-random", "neighborhood", "gt-oracle")
POLICY_TITLES = {
    "learned": "Learned attention",
    "random": "with Random Selection",
    "middle-random": "with Middle Rows Random Selection",
    "neighborhood": "with Neighbourhood Selection",
    "gt-oracle": "with GT Error Attendance (upper bound)",
}
MIDDLE_ROWS = (3, 4)

# published (MSE [0-1]x1000, RMSE [0-255]) of earlier RL-based systems, quoted as constants
REFERENCE_RESULTS = {
    "Side-kick Policy Learning": (23.36, 39.0),
    "Learning to Look Around": (23.16, 38.8),
}


def neighbour_table(grid: GridGeometry) -> torch.Tensor:
    """(P, P) bool: q is one of the 8 x-wrapped, in-range neighbours of p."""
    n = grid.patch_count
    table = torch.zeros(n, n, dtype=torch.bool)
    for p in range(n):
        center = block_of(p, grid)
        for b, valid in footprint(center, grid):
            if valid and b != center:
                table[p, patch_index(b, grid)] = True
    return table


def row_mask(grid: GridGeometry, rows) -> torch.Tensor:
    ids = torch.arange(grid.patch_count)
    return torch.isin(ids // grid.cols, torch.tensor(rows))


class Policy:
    """Chooses the next glimpse center for a batch of episodes.

    Stochastic kinds draw from the episode's random stream, so a fixed seed
    fixes the whole trajectory.
    """

    def __init__(self, kind: str):
        if kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy {kind!r}; expected one of {POLICY_KINDS}")
        self.kind = kind
        self.needs_recon = kind == "gt-oracle"
        self._neighbours = {}

    def allowed(self, state: EpisodeState, ctx: StepContext) -> torch.Tensor:
        free = ~state.visited
        if self.kind == "middle-random":
            cand = free & row_mask(ctx.grid, MIDDLE_ROWS)
        elif self.kind == "neighborhood":
            if ctx.grid not in self._neighbours:
                self._neighbours[ctx.grid] = neighbour_table(ctx.grid)
            cand = free & self._neighbours[ctx.grid][state.current]
        else:
            return free
        empty = ~cand.any(1, keepdim=True)
        return torch.where(empty, free, cand)

    def probs(self, state: EpisodeState, ctx: StepContext) -> torch.Tensor:
        if self.kind == "learned":
            return masked_probs(ctx.logits, state.visited)
        if self.kind == "gt-oracle":
            choice = self._oracle(state, ctx)
            return torch.nn.functional.one_hot(choice, ctx.grid.patch_count).double()
        allowed = self.allowed(state, ctx).double()
        return allowed / allowed.sum(1, keepdim=True)

    def _oracle(self, state, ctx):
        if ctx.recon is None:
            raise ValueError("gt-oracle policy needs the current reconstruction")
        err = patch_errors(ctx.recon, ctx.panorama, ctx.grid)
        return err.masked_fill(state.visited, -math.inf).argmax(1)

    def __call__(self, state: EpisodeState, ctx: StepContext) -> torch.Tensor:
        if bool(state.visited.all(1).any()):
            raise ValueError("every patch has already been visited")
        if self.kind == "learned":
            return select_next(ctx.logits, state.visited, ctx.mode, state.rng)
        if self.kind == "gt-oracle":
            return self._oracle(state, ctx)
        allowed = self.allowed(state, ctx)
        probs = allowed.double() / allowed.sum(1, keepdim=True)
        return sample_from(probs, allowed, state.rng)


def policy_next(policy: Policy, state: EpisodeState, ctx: StepContext) -> torch.Tensor:
    return policy(state, ctx)


# ---------------------------------------------------------------------------
# metrics


def mse_metric(recon: torch.Tensor, panorama: torch.Tensor) -> torch.Tensor:
    """Per-image mean squared error in [0-1] units, times 1000."""
    if recon.shape != panorama.shape:
        raise ValueError(f"shape mismatch {tuple(recon.shape)} vs {tuple(panorama.shape)}")
    d = recon.double() - panorama.double()
    return 1000.0 * (d * d).flatten(1).mean(1)


def rmse_from_mse(mse):
    if isinstance(mse, torch.Tensor):
        return 255.0 * torch.sqrt(mse / 1000.0)
    return 255.0 * math.sqrt(mse / 1000.0)


def rmse_metric(recon: torch.Tensor, panorama: torch.Tensor) -> torch.Tensor:
    """Per-image RMSE in [0-255] units."""
    return rmse_from_mse(mse_metric(recon, panorama))


@dataclass
class MetricReport:
    policy: str
    mse_curve: list[float]
    rmse_curve: list[float]
    n_samples: int
    seeds: list[int]
    accuracy: float | None = None
    per_image_final_mse: list[float] = field(default_factory=list, repr=False)

    @property
    def final_mse(self) -> float:
        return self.mse_curve[-1]

    @property
    def final_rmse(self) -> float:
        return self.rmse_curve[-1]


@torch.no_grad()
def evaluate(
    model: Explorer,
    images: torch.Tensor,
    policy: str | Policy,
    T: int,
    seeds=(0, 1, 2, 3, 4),
    batch_size: int = 100,
) -> MetricReport:
    """Eval-mode episodes for every (image, seed); MSE averaged per image, then over all runs.

    RMSE figures derive from the averaged MSE so the two columns stay consistent.
    """
    if images.shape[0] == 0:
        raise ValueError("evaluation split is empty")
    policy = policy if isinstance(policy, Policy) else Policy(policy)
    model.eval()
    sums = np.zeros(T)
    finals = []
    count = 0
    for seed in seeds:
        for k in range(0, images.shape[0], batch_size):
            batch = images[k : k + batch_size]
            rng = np.random.default_rng([seed, k])
            res = run_episode(model, batch, T, rng, policy=policy, mode="eval", record=True)
            per_step = torch.stack([mse_metric(r, batch) for r in res.step_recons], dim=1)
            sums += per_step.sum(0).numpy()
            finals.extend(per_step[:, -1].tolist())
            count += batch.shape[0]
    mse = (sums / count).tolist()
    return MetricReport(policy.kind, mse, [rmse_from_mse(m) for m in mse], count, list(seeds), per_image_final_mse=finals)


def accuracy(logits: torch.Tensor, labels: torch.Tensor) -> float:
    if labels.numel() == 0 or bool((labels < 0).any()):
        raise ValueError("accuracy needs labels for every sample")
    return float((logits.argmax(1) == labels).double().mean())


@torch.no_grad()
def classification_accuracy(
    model, images: torch.Tensor, labels: torch.Tensor, mode: str, T: int = 8, seeds=(0,), batch_size: int = 100
) -> float:
    """Top-1 accuracy after T glimpses, or of the full-image classifier for ``upper-bound``."""
    if labels is None or labels.numel() == 0 or bool((labels < 0).any()):
        raise ValueError("classification accuracy needs a labeled split")
    model.eval()
    if mode == "upper-bound":
        if not isinstance(model, VGGClassifier):
            raise ValueError("upper-bound accuracy needs the full-image classifier")
        logits = torch.cat([model(images[k : k + batch_size]) for k in range(0, len(images), batch_size)])
        return accuracy(logits, labels)
    if getattr(model, "classification", None) != mode:
        raise ValueError(f"model was not built for {mode!r} classification")
    hits = total = 0
    for seed in seeds:
        for k in range(0, images.shape[0], batch_size):
            rng = np.random.default_rng([seed, k])
            res = run_episode(model, images[k : k + batch_size], T, rng, mode="eval")
            y = labels[k : k + batch_size]
            hits += int((res.class_logits.argmax(1) == y).sum())
            total += len(y)
    return hits / total


# ---------------------------------------------------------------------------
# report output

CURVE_COLUMNS = ["policy", "step", "mse", "rmse", "samples"]


def write_curves(reports: list[MetricReport], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for r in reports:
            for t, (m, e) in enumerate(zip(r.mse_curve, r.rmse_curve), start=1):
                w.writerow([r.policy, t, f"{m:.9g}", f"{e:.9g}", r.n_samples])


def read_curves(path) -> list[MetricReport]:
    rows: dict[str, list] = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            rows.setdefault(row["policy"], []).append(row)
    out = []
    for kind, rs in rows.items():
        rs.sort(key=lambda r: int(r["step"]))
        out.append(
            MetricReport(kind, [float(r["mse"]) for r in rs], [float(r["rmse"]) for r in rs], int(rs[0]["samples"]), [])
        )
    return out


def format_table(reports: list[MetricReport], reference: bool = False) -> str:
    """Fixed-width table: method, MSE [0-1]x1000, RMSE [0-255]."""
    rows = []
    if reference:
        rows += [(name, mse, rmse) for name, (mse, rmse) in REFERENCE_RESULTS.items()]
    rows += [(POLICY_TITLES.get(r.policy, r.policy), r.final_mse, r.final_rmse) for r in reports]
    width = max(len("Method"), *(len(r[0]) for r in rows))
    lines = [
        f"{'Method':<{width}}  {'MSE':>10}  {'RMSE':>8}",
        f"{'':<{width}}  {'[0-1]x1000':>10}  {'[0-255]':>8}",
        "-" * (width + 22),
    ]
    lines += [f"{name:<{width}}  {mse:>10.2f}  {rmse:>8.1f}" for name, mse, rmse in rows]
    return "\n".join(lines) + "\n"
