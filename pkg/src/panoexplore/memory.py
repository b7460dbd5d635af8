"""Spatial memory maps.

Two memories are kept per episode:

* the fit-in matrix, a panorama-sized canvas into which each reconstructed
  glimpse is pasted at its true (x-wrapped) location, with an occupancy mask;
* the fit-in feature vector, 32 spatial slots (each covering 2x2 blocks) that
  hold one per-glimpse descriptor each. The classification variant has the
  same layout.

All state is batched along a leading episode dimension and all writes are
differentiable with respect to the written values. Writes rebind the tensors
on the memory object rather than modifying them in place, so earlier states
stay valid for autograd. Overlapping writes resolve newest-wins.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .glimpse import FULL_GRID, BlockIndex, GridGeometry, footprint_coords

SLOT_COLS = 8
SLOT_ROWS = 4
SLOT_COUNT = SLOT_COLS * SLOT_ROWS


def slot_of(block: BlockIndex) -> int:
    col, row = block
    return (row // 2) * SLOT_COLS + col // 2


def slot_of_patch(patch: torch.Tensor, grid: GridGeometry = FULL_GRID) -> torch.Tensor:
    patch = torch.as_tensor(patch, dtype=torch.long)
    return (patch // grid.cols // 2) * SLOT_COLS + (patch % grid.cols) // 2


@dataclass
class FitInMatrix:
    data: torch.Tensor  # (B, 3, H, W)
    occupancy: torch.Tensor  # (B, 1, H, W) bool

    @classmethod
    def zeros(cls, batch: int, grid: GridGeometry = FULL_GRID, dtype=torch.float32) -> FitInMatrix:
        return cls(
            torch.zeros(batch, 3, grid.height, grid.width, dtype=dtype),
            torch.zeros(batch, 1, grid.height, grid.width, dtype=torch.bool),
        )


@dataclass
class FitInFeatureVector:
    slots: torch.Tensor  # (B, 32, F)
    occupied: torch.Tensor  # (B, 32) bool

    @classmethod
    def zeros(cls, batch: int, features: int = 128, dtype=torch.float32) -> FitInFeatureVector:
        return cls(
            torch.zeros(batch, SLOT_COUNT, features, dtype=dtype),
            torch.zeros(batch, SLOT_COUNT, dtype=torch.bool),
        )

    @property
    def flat(self) -> torch.Tensor:
        """Slot-major flattening, (B, 32 * F)."""
        return self.slots.flatten(1)


# the classification vector shares layout and write rule
FitInClassVector = FitInFeatureVector


@dataclass
class EpisodeMemory:
    matrix: FitInMatrix
    vector: FitInFeatureVector
    class_vector: FitInClassVector | None = None


def reset(
    batch: int,
    grid: GridGeometry = FULL_GRID,
    features: int = 128,
    with_class: bool = False,
    dtype=torch.float32,
) -> EpisodeMemory:
    return EpisodeMemory(
        FitInMatrix.zeros(batch, grid, dtype),
        FitInFeatureVector.zeros(batch, features, dtype),
        FitInFeatureVector.zeros(batch, features, dtype) if with_class else None,
    )


def matrix_write(
    m: FitInMatrix,
    recon: torch.Tensor,
    centers: torch.Tensor,
    mask: torch.Tensor,
    grid: GridGeometry = FULL_GRID,
) -> FitInMatrix:
    """Paste (B, 3, g, g) glimpse reconstructions at their footprints.

    Only cells where `mask` (B, 1, g, g) is true and the source row exists are
    written.
    """
    B, C, H, W = m.data.shape
    rows, cols = footprint_coords(centers, grid)
    flat = rows[:, :, None] * W + cols[:, None, :]  # (B, g, g)
    ok = mask[:, 0] & (rows >= 0)[:, :, None] & (rows < H)[:, :, None]
    trash = H * W
    idx = torch.where(ok, flat, torch.full_like(flat, trash)).flatten(1)  # (B, g*g)

    pad = torch.zeros(B, C, 1, dtype=m.data.dtype)
    data = torch.cat([m.data.flatten(2), pad], dim=2)
    data = data.scatter(2, idx[:, None, :].expand(-1, C, -1), recon.flatten(2).to(data.dtype))
    occ = torch.cat([m.occupancy.flatten(2), torch.zeros(B, 1, 1, dtype=torch.bool)], dim=2)
    occ = occ.scatter(2, idx[:, None, :], True)

    m.data = data[:, :, :trash].view(B, C, H, W)
    m.occupancy = occ[:, :, :trash].view(B, 1, H, W)
    return m


def matrix_views(m: FitInMatrix, scales) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """Area-averaged (data, occupancy fraction) at each (h, w) in `scales`."""
    H, W = m.data.shape[-2:]
    occ = m.occupancy.to(m.data.dtype)
    views = []
    for h, w in scales:
        if h <= 0 or w <= 0 or H % h or W % w:
            raise ValueError(f"scale ({h},{w}) does not divide ({H},{W})")
        k = (H // h, W // w)
        if k == (1, 1):
            views.append((m.data, occ))
        else:
            views.append((F.avg_pool2d(m.data, k), F.avg_pool2d(occ, k)))
    return views


def vector_write(
    v: FitInFeatureVector, feat: torch.Tensor, centers: torch.Tensor, grid: GridGeometry = FULL_GRID
) -> FitInFeatureVector:
    """Store (B, F) descriptors in the slot of each center; newest wins."""
    slot = slot_of_patch(centers, grid)
    hit = F.one_hot(slot, SLOT_COUNT).to(torch.bool)  # (B, 32)
    v.slots = torch.where(hit[:, :, None], feat[:, None, :].to(v.slots.dtype), v.slots)
    v.occupied = v.occupied | hit
    return v
