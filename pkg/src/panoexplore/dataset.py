"""Panorama ingestion, wrap augmentation and the synthetic corpus generator."""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

HEIGHT = 128
WIDTH = 256
NUM_CLASSES = 26
SPLITS = ("train", "test")


class ManifestError(ValueError):
    pass


@dataclass
class PanoramaSample:
    id: str
    pixels: np.ndarray  # (H, W, 3) float32 in [0, 1]
    label: int | None = None


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: int | None
    split: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    class_names: list[str]
    root: Path = field(default_factory=Path)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]


def load_manifest(path, classes_path=None) -> DatasetManifest:
    """Read a JSON-lines manifest plus its class-name sidecar.

    The sidecar defaults to ``classes.json`` next to the manifest; without one,
    labels are checked against the default 26 classes.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    classes_path = Path(classes_path) if classes_path else path.with_name("classes.json")
    if classes_path.is_file():
        class_names = json.loads(classes_path.read_text())
        if not isinstance(class_names, list) or not all(isinstance(c, str) for c in class_names):
            raise ManifestError(f"{classes_path}: expected a JSON list of class names")
    else:
        class_names = [f"class_{i:02d}" for i in range(NUM_CLASSES)]

    entries, seen = [], set()
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(obj, dict) or not isinstance(obj.get("path"), str):
            raise ManifestError(f"{path}:{lineno}: entry needs a string 'path'")
        label = obj.get("label")
        if label is not None and (not isinstance(label, int) or isinstance(label, bool)):
            raise ManifestError(f"{path}:{lineno}: label must be an integer or null")
        if label is not None and not 0 <= label < len(class_names):
            raise ManifestError(f"{path}:{lineno}: label {label} outside [0, {len(class_names)})")
        split = obj.get("split")
        if split not in SPLITS:
            raise ManifestError(f"{path}:{lineno}: split must be one of {SPLITS}")
        if obj["path"] in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate path {obj['path']!r}")
        seen.add(obj["path"])
        entries.append(ManifestEntry(obj["path"], label, split))
    return DatasetManifest(entries, class_names, path.parent)


def resize_bilinear(pixels: np.ndarray, height: int = HEIGHT, width: int = WIDTH) -> np.ndarray:
    if pixels.shape[:2] == (height, width):
        return pixels
    t = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float32)).permute(2, 0, 1)[None]
    t = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False)
    return t[0].permute(1, 2, 0).numpy().clip(0.0, 1.0)


def load_panorama(entry: ManifestEntry | str, root=None) -> PanoramaSample:
    path = entry.path if isinstance(entry, ManifestEntry) else str(entry)
    full = Path(root) / path if root is not None else Path(path)
    try:
        with Image.open(full) as im:
            im.load()
            if im.width == 0 or im.height == 0:
                raise ValueError("zero-sized image")
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot decode image {full}: {exc}") from None
    label = entry.label if isinstance(entry, ManifestEntry) else None
    return PanoramaSample(path, resize_bilinear(arr), label)


def augment_wrap(sample: PanoramaSample, offset: int) -> PanoramaSample:
    """Cut-and-paste along x: column c moves to (c + offset) mod W."""
    shift = int(offset) % sample.pixels.shape[1]
    return PanoramaSample(sample.id, np.roll(sample.pixels, shift, axis=1), sample.label)


# ---------------------------------------------------------------------------
# synthetic panoramas


@dataclass(frozen=True)
class SynthSpec:
    count: int
    seed: int = 0
    class_count: int = NUM_CLASSES
    horizon_range: tuple[float, float] = (0.45, 0.65)
    palette_jitter: float = 0.015
    shape_count: tuple[int, int] = (3, 6)
    height: int = HEIGHT
    width: int = WIDTH

    def __post_init__(self):
        if self.count <= 0:
            raise ValueError("count must be positive")
        if self.class_count < 2:
            raise ValueError("class_count must be at least 2")


def _class_palette(label: int, class_count: int) -> tuple[float, float, float]:
    """(sky hue, ground hue, ground value) for a class."""
    half = (class_count + 1) // 2
    sky_hue = (label % half) / half
    ground_hue = (0.08 + 0.37 * (label % 3) + 0.5 * (label // half)) % 1.0
    ground_val = 0.35 if label // half == 0 else 0.65
    return sky_hue, ground_hue, ground_val


def _hsv(h, s, v) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def synth_sample(spec: SynthSpec, index: int) -> PanoramaSample:
    """Sample `index` of the corpus described by `spec`.

    Every sample is drawn from its own (seed, index) stream and is periodic in x.
    """
    rng = np.random.default_rng([spec.seed, index])
    H, W = spec.height, spec.width
    label = index % spec.class_count
    sky_hue, ground_hue, ground_val = _class_palette(label, spec.class_count)
    j = spec.palette_jitter

    y = (np.arange(H) + 0.5)[:, None] / H
    x = (np.arange(W) + 0.5)[None, :] / W
    phase = rng.uniform(0, 2 * np.pi, 2)
    base = rng.uniform(*spec.horizon_range)
    amp = rng.uniform([0.02, 0.0], [0.06, 0.03])

    def horizon_at(u):
        return base + amp[0] * np.sin(2 * np.pi * u + phase[0]) + amp[1] * np.sin(4 * np.pi * u + phase[1])

    horizon = horizon_at(x)

    sky_top = _hsv(sky_hue + rng.uniform(-j, j), 0.7, 0.55)
    sky_low = _hsv(sky_hue + rng.uniform(-j, j), 0.3, 0.95)
    ground = _hsv(ground_hue + rng.uniform(-j, j), 0.6, ground_val)

    w = np.clip(y / np.maximum(horizon, 1e-3), 0, 1)[..., None]
    img = sky_top * (1 - w) + sky_low * w
    shade = 1.0 - 0.35 * np.clip((y - horizon) / 0.5, 0, 1)
    texture = 1.0 + 0.05 * np.sin(2 * np.pi * (3 * x + 6 * y) + phase[1])
    below = (y >= horizon)[..., None]
    img = np.where(below, ground * (shade * texture)[..., None], img)

    n = rng.integers(spec.shape_count[0], spec.shape_count[1] + 1)
    for _ in range(n):
        cx = rng.uniform(0, 1)
        dx = np.abs((x - cx + 0.5) % 1.0 - 0.5)  # periodic x distance
        color = _hsv(rng.uniform(0, 1), rng.uniform(0.5, 1.0), rng.uniform(0.3, 1.0))
        hz = horizon_at(cx)
        if rng.uniform() < 0.5:
            half_w = rng.uniform(3, 12) / W
            top = hz - rng.uniform(8, 28) / H
            mask = (dx <= half_w) & (y >= top) & (y <= hz + 4 / H)
        else:
            r = rng.uniform(4, 10) / H
            cy = hz - rng.uniform(0, 12) / H
            mask = (dx * W / H) ** 2 + (y - cy) ** 2 <= r**2
        img = np.where(mask[..., None], color, img)

    pixels = np.clip(img, 0.0, 1.0).astype(np.float32)
    return PanoramaSample(f"synth_{spec.seed}_{index:06d}", pixels, label)


def iter_synth(spec: SynthSpec, start: int = 0) -> Iterator[PanoramaSample]:
    for i in range(start, spec.count):
        yield synth_sample(spec, i)


def synth_generate(spec: SynthSpec) -> list[PanoramaSample]:
    return list(iter_synth(spec))


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0, 1) * 255).astype(np.uint8)


def write_corpus(out_dir, spec: SynthSpec, test_every: int = 10) -> DatasetManifest:
    """Write images/ + manifest.jsonl + classes.json; every `test_every`-th sample is test."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    class_names = [f"class_{i:02d}" for i in range(spec.class_count)]
    entries = []
    for i, s in enumerate(iter_synth(spec)):
        rel = f"images/{s.id}.png"
        Image.fromarray(to_uint8(s.pixels)).save(out_dir / rel)
        split = "test" if test_every and i % test_every == test_every - 1 else "train"
        entries.append(ManifestEntry(rel, s.label, split))
    with open(out_dir / "manifest.jsonl", "w") as f:
        for e in entries:
            f.write(json.dumps({"path": e.path, "label": e.label, "split": e.split}) + "\n")
    (out_dir / "classes.json").write_text(json.dumps(class_names, indent=1) + "\n")
    return DatasetManifest(entries, class_names, out_dir)


# ---------------------------------------------------------------------------
# tensors for training


def downsample_area(pixels: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Area-average (B, C, H, W) down to (height, width); sizes must divide."""
    H, W = pixels.shape[-2:]
    if H % height or W % width:
        raise ValueError(f"({height},{width}) does not divide ({H},{W})")
    if (H, W) == (height, width):
        return pixels
    return F.avg_pool2d(pixels, (H // height, W // width))


def stack_samples(samples, height: int = HEIGHT, width: int = WIDTH) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack samples into a (N, 3, height, width) tensor and a label tensor (-1 = unlabeled)."""
    imgs, labels = [], []
    for s in samples:
        t = torch.from_numpy(np.ascontiguousarray(s.pixels)).permute(2, 0, 1)[None]
        imgs.append(downsample_area(t, height, width)[0])
        labels.append(-1 if s.label is None else s.label)
    return torch.stack(imgs), torch.tensor(labels, dtype=torch.long)
