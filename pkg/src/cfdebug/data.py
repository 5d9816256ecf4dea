"""Synthetic 10-class shape dataset for desk-scale experiments.

Each class is a parametric pattern (disks, rings, frames, stripes, ...).
Shape parameters, colors, placement, and pixel noise are sampled per image,
with deliberate overlap between related classes (ring vs circle, frame vs
square, dots vs checker) so a small CNN reaches high train accuracy but
leaves a usable residue of test misclassifications to detect and debug.

Images are written as PNGs in a class-per-subdirectory layout:

    root/train/<class_name>/<class_name>_0000.png
    root/test/<class_name>/...
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .exceptions import UsageError

logger = logging.getLogger(__name__)

CLASS_NAMES = (
    "checker",
    "circle",
    "cross",
    "diag_stripes",
    "dots",
    "frame",
    "h_stripes",
    "ring",
    "square",
    "v_stripes",
)


def _coords(size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    cy = size / 2 + rng.uniform(-4, 4)
    cx = size / 2 + rng.uniform(-4, 4)
    yy, xx = np.mgrid[0:size, 0:size]
    return yy - cy, xx - cx


def _shape_mask(name: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = _coords(size, rng)
    if name == "circle":
        r = rng.uniform(6, 11)
        return xx**2 + yy**2 <= r**2
    if name == "ring":
        outer = rng.uniform(7, 12)
        inner = max(2.5, outer * rng.uniform(0.3, 0.6))
        rr = xx**2 + yy**2
        return (rr <= outer**2) & (rr >= inner**2)
    if name == "square":
        a = rng.uniform(5, 9)
        return (np.abs(xx) <= a) & (np.abs(yy) <= a)
    if name == "frame":
        a = rng.uniform(6, 10)
        t = rng.uniform(1, 2.5)
        outer = (np.abs(xx) <= a) & (np.abs(yy) <= a)
        inner = (np.abs(xx) <= a - t) & (np.abs(yy) <= a - t)
        return outer & ~inner
    if name == "cross":
        arm = rng.uniform(6, 11)
        w = rng.uniform(1.5, 3.5)
        horiz = (np.abs(yy) <= w) & (np.abs(xx) <= arm)
        vert = (np.abs(xx) <= w) & (np.abs(yy) <= arm)
        return horiz | vert
    if name == "h_stripes":
        period = rng.uniform(4, 8)
        phase = rng.uniform(0, period)
        return ((yy + phase) % period) < period / 2
    if name == "v_stripes":
        period = rng.uniform(4, 8)
        phase = rng.uniform(0, period)
        return ((xx + phase) % period) < period / 2
    if name == "diag_stripes":
        period = rng.uniform(5, 10)
        phase = rng.uniform(0, period)
        return ((xx + yy + phase) % period) < period / 2
    if name == "checker":
        cell = rng.uniform(3, 6)
        py, px = rng.uniform(0, cell, size=2)
        return (((yy + py) // cell) + ((xx + px) // cell)) % 2 == 0
    if name == "dots":
        spacing = rng.uniform(5, 8)
        radius = rng.uniform(1.2, 2.4)
        py, px = rng.uniform(0, spacing, size=2)
        dy = ((yy + py) % spacing) - spacing / 2
        dx = ((xx + px) % spacing) - spacing / 2
        return dx**2 + dy**2 <= radius**2
    raise UsageError(f"unknown class name {name!r}")


def render_sample(class_name: str, rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """One uint8 HxWx3 image of the given class."""
    bg = rng.uniform(0.0, 1.0, size=3)
    fg = rng.uniform(0.0, 1.0, size=3)
    while np.linalg.norm(fg - bg) < 0.35:
        fg = rng.uniform(0.0, 1.0, size=3)
    mask = _shape_mask(class_name, size, rng)
    img = np.empty((size, size, 3), dtype=np.float64)
    img[:] = bg
    img[mask] = fg
    img += rng.normal(0.0, rng.uniform(0.05, 0.16), size=img.shape)
    return (np.clip(img, 0.0, 1.0) * 255).round().astype(np.uint8)


def generate_dataset(
    root: str | Path,
    per_class_train: int = 300,
    per_class_test: int = 100,
    seed: int = 0,
    size: int = 32,
) -> Path:
    """Write the train/test PNG tree. Each image's RNG stream depends only on
    (seed, split, class, index), so regeneration is order-independent."""
    root = Path(root)
    for split_idx, (split, per_class) in enumerate(
        [("train", per_class_train), ("test", per_class_test)]
    ):
        for class_idx, name in enumerate(CLASS_NAMES):
            out_dir = root / split / name
            out_dir.mkdir(parents=True, exist_ok=True)
            for i in range(per_class):
                rng = np.random.default_rng(
                    np.random.SeedSequence([seed, split_idx, class_idx, i])
                )
                img = render_sample(name, rng, size)
                Image.fromarray(img).save(out_dir / f"{name}_{i:04d}.png")
    logger.info("wrote dataset under %s", root)
    return root


@dataclass
class ImageSplit:
    """One dataset split fully loaded into memory."""

    x: torch.Tensor  # (N, 3, S, S) float32 in [0, 1]
    y: torch.Tensor  # (N,) int64
    image_ids: list[str]
    class_names: list[str]

    def __len__(self) -> int:
        return len(self.image_ids)


def load_split(split_dir: str | Path) -> ImageSplit:
    """Load a class-per-subdirectory split; class index = sorted dir order."""
    split_dir = Path(split_dir)
    if not split_dir.is_dir():
        raise UsageError(f"dataset split {split_dir} does not exist")
    class_dirs = sorted(p for p in split_dir.iterdir() if p.is_dir())
    if not class_dirs:
        raise UsageError(f"dataset split {split_dir} has no class subdirectories")
    images, labels, ids = [], [], []
    for class_idx, class_dir in enumerate(class_dirs):
        files = sorted(p for p in class_dir.iterdir() if p.is_file())
        loaded_any = False
        for path in files:
            try:
                with Image.open(path) as im:
                    arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            except Exception as exc:  # unreadable file: skip, keep going
                logger.warning("skipping unreadable image %s: %s", path, exc)
                continue
            images.append(arr.transpose(2, 0, 1))
            labels.append(class_idx)
            ids.append(f"{class_dir.name}/{path.name}")
            loaded_any = True
        if not loaded_any:
            raise UsageError(f"class directory {class_dir} contains no readable images")
    return ImageSplit(
        x=torch.from_numpy(np.stack(images)),
        y=torch.tensor(labels, dtype=torch.int64),
        image_ids=ids,
        class_names=[p.name for p in class_dirs],
    )
