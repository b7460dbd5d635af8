"""Block grid and retina-like glimpse sensor.

A panorama is tiled by a 16x8 grid of square blocks. A glimpse is centered on
one block and covers its 3x3 block neighbourhood: the center block is read at
full resolution, the 8 ring blocks are 2x2 mean-pooled and re-expanded with
nearest-neighbour so the sensor always yields a square canvas.

Columns wrap around (the panorama is continuous along x); rows that fall off
the top or bottom are zero-filled and flagged invalid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

# resolution-map codes
INVALID = 0
DOWNSAMPLED = 1
FULL_RES = 2


@dataclass(frozen=True)
class GridGeometry:
    block: int = 16
    cols: int = 16
    rows: int = 8

    @property
    def height(self) -> int:
        return self.rows * self.block

    @property
    def width(self) -> int:
        return self.cols * self.block

    @property
    def patch_count(self) -> int:
        return self.cols * self.rows

    @property
    def glimpse(self) -> int:
        return 3 * self.block

    @property
    def samples_per_glimpse(self) -> int:
        """Distinct sensor samples per channel for an interior glimpse."""
        return self.block**2 + 8 * (self.block // 2) ** 2


FULL_GRID = GridGeometry(16)
MICRO_GRID = GridGeometry(4)


class BlockIndex(NamedTuple):
    col: int
    row: int


def patch_index(b: BlockIndex, grid: GridGeometry = FULL_GRID) -> int:
    col, row = b
    if not (0 <= col < grid.cols and 0 <= row < grid.rows):
        raise IndexError(f"block {tuple(b)} outside {grid.cols}x{grid.rows} grid")
    return row * grid.cols + col


def block_of(p: int, grid: GridGeometry = FULL_GRID) -> BlockIndex:
    if not 0 <= p < grid.patch_count:
        raise IndexError(f"patch id {p} outside [0, {grid.patch_count})")
    return BlockIndex(p % grid.cols, p // grid.cols)


def footprint(center: BlockIndex, grid: GridGeometry = FULL_GRID) -> list[tuple[BlockIndex, bool]]:
    """The 3x3 block neighbourhood of `center`, row-major.

    Columns are wrapped; out-of-range rows are kept with their raw index and
    flagged invalid.
    """
    col, row = center
    out = []
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            r = row + dr
            out.append((BlockIndex((col + dc) % grid.cols, r), 0 <= r < grid.rows))
    return out


def coverage_fraction(T: int, grid: GridGeometry = FULL_GRID) -> float:
    """Fraction of panorama pixels sampled by T interior glimpses (per channel)."""
    if T < 0:
        raise ValueError("T must be non-negative")
    return T * grid.samples_per_glimpse / (grid.height * grid.width)


# ---------------------------------------------------------------------------
# batched torch sensor (used by training and evaluation)


def footprint_coords(centers: torch.Tensor, grid: GridGeometry) -> tuple[torch.Tensor, torch.Tensor]:
    """Source row and (wrapped) column indices of each glimpse footprint.

    Returns rows (B, g) which may be out of range, and cols (B, g) in [0, W).
    """
    centers = torch.as_tensor(centers, dtype=torch.long)
    g = grid.glimpse
    offs = torch.arange(g) - grid.block
    rows = (centers // grid.cols)[:, None] * grid.block + offs
    cols = ((centers % grid.cols)[:, None] * grid.block + offs) % grid.width
    return rows, cols


def crop_batch(pano: torch.Tensor, centers: torch.Tensor, grid: GridGeometry) -> tuple[torch.Tensor, torch.Tensor]:
    """Full-resolution footprint crops.

    pano: (B, C, H, W). Returns crop (B, C, g, g) zeroed where invalid and a
    validity mask (B, 1, g, g).
    """
    rows, cols = footprint_coords(centers, grid)
    valid_rows = (rows >= 0) & (rows < grid.height)
    rows_c = rows.clamp(0, grid.height - 1)
    b = torch.arange(pano.shape[0])[:, None, None]
    crop = pano[b, :, rows_c[:, :, None], cols[:, None, :]]  # (B, g, g, C)
    crop = crop.permute(0, 3, 1, 2)
    valid = valid_rows[:, None, :, None].expand(-1, 1, -1, grid.glimpse)
    return crop * valid, valid


def _center_mask(grid: GridGeometry) -> torch.Tensor:
    m = torch.zeros(grid.glimpse, grid.glimpse, dtype=torch.bool)
    m[grid.block : 2 * grid.block, grid.block : 2 * grid.block] = True
    return m


def retina_batch(
    pano: torch.Tensor, centers: torch.Tensor, grid: GridGeometry
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Retina canvases for a batch of panoramas.

    Returns canvas (B, C, g, g), full-res mask (B, 1, g, g) and validity mask
    (B, 1, g, g).
    """
    crop, valid = crop_batch(pano, centers, grid)
    coarse = F.avg_pool2d(crop, 2)
    coarse = coarse.repeat_interleave(2, dim=2).repeat_interleave(2, dim=3)
    center = _center_mask(grid)
    canvas = torch.where(center, crop, coarse) * valid
    full = center.expand_as(valid) & valid
    return canvas, full, valid


def sensor_input(canvas: torch.Tensor, full: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Stack the canvas with its is-full-res and is-valid planes (5 channels)."""
    return torch.cat([canvas, full.to(canvas.dtype), valid.to(canvas.dtype)], dim=1)


# ---------------------------------------------------------------------------
# single-panorama convenience API


@dataclass
class RetinaGlimpse:
    center: BlockIndex
    canvas: np.ndarray  # (g, g, 3)
    resolution_map: np.ndarray  # (g, g) of INVALID / DOWNSAMPLED / FULL_RES

    @property
    def sample_count(self) -> int:
        full = int((self.resolution_map == FULL_RES).sum())
        down = int((self.resolution_map == DOWNSAMPLED).sum())
        return full + down // 4


def _pixels(p) -> np.ndarray:
    return np.asarray(getattr(p, "pixels", p), dtype=np.float32)


def _grid_for(pixels: np.ndarray) -> GridGeometry:
    return GridGeometry(pixels.shape[0] // 8)


def extract_retina(p, center: BlockIndex, grid: GridGeometry | None = None) -> RetinaGlimpse:
    pix = _pixels(p)
    grid = grid or _grid_for(pix)
    c = torch.tensor([patch_index(center, grid)])
    pano = torch.from_numpy(pix).permute(2, 0, 1)[None]
    canvas, full, valid = retina_batch(pano, c, grid)
    res = np.where(full[0, 0].numpy(), FULL_RES, np.where(valid[0, 0].numpy(), DOWNSAMPLED, INVALID))
    return RetinaGlimpse(BlockIndex(*center), canvas[0].permute(1, 2, 0).numpy(), res.astype(np.int8))


def ground_truth_crop(p, center: BlockIndex, grid: GridGeometry | None = None) -> tuple[np.ndarray, np.ndarray]:
    pix = _pixels(p)
    grid = grid or _grid_for(pix)
    c = torch.tensor([patch_index(center, grid)])
    pano = torch.from_numpy(pix).permute(2, 0, 1)[None]
    crop, valid = crop_batch(pano, c, grid)
    return crop[0].permute(1, 2, 0).numpy(), valid[0, 0].numpy()
