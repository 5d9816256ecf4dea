"""Gradient-weighted class activation heatmaps over the final conv layer."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .exceptions import UsageError
from .model import ClassifierHandle

logger = logging.getLogger(__name__)


def gradcam_heatmap(handle: ClassifierHandle, image, class_index: int) -> np.ndarray:
    """Heatmap in [0, 1] at input resolution for one class's score.

    Filter weights are the spatial means of the class-score gradients w.r.t.
    the final feature maps; the weighted, ReLU-rectified sum is min-max
    normalized. A gradient that vanishes everywhere (constant output) yields
    a uniform 0.5 map with a warning.
    """
    if not 0 <= class_index < handle.label_count:
        raise UsageError(f"class index {class_index} outside [0, {handle.label_count})")
    net = handle.net
    net.eval()
    x = handle._as_batch(image)
    fmaps = net.features(x)
    gap = fmaps.mean(dim=(2, 3))
    score = net.head(gap)[0, class_index]
    grads = torch.autograd.grad(score, fmaps)[0]

    weights = grads.mean(dim=(2, 3))[0]
    cam = torch.relu((weights.view(-1, 1, 1) * fmaps[0]).sum(dim=0)).detach().numpy()
    size = handle.net.image_size
    if float(grads.abs().max()) == 0.0 or cam.max() == cam.min():
        logger.warning("zero gradient everywhere; returning uniform heatmap")
        return np.full((size, size), 0.5)
    cam = (cam - cam.min()) / (cam.max() - cam.min())
    resized = Image.fromarray((cam * 255).astype(np.uint8)).resize((size, size), Image.BILINEAR)
    return np.asarray(resized, dtype=np.float64) / 255.0


def _heat_colors(heat: np.ndarray) -> np.ndarray:
    """Map [0,1] heat to a blue->green->red ramp, shape (H, W, 3)."""
    h = np.clip(heat, 0.0, 1.0)
    r = np.clip(1.5 - np.abs(4 * h - 3), 0, 1)
    g = np.clip(1.5 - np.abs(4 * h - 2), 0, 1)
    b = np.clip(1.5 - np.abs(4 * h - 1), 0, 1)
    return np.stack([r, g, b], axis=-1)


def saliency_overlay(
    handle: ClassifierHandle,
    image,
    class_index: int,
    out_path: str | Path,
    alpha: float = 0.45,
) -> Path:
    """Blend the class heatmap onto the input and write a PNG."""
    heat = gradcam_heatmap(handle, image, class_index)
    img = torch.as_tensor(image, dtype=torch.float32)
    if img.dim() == 4:
        img = img[0]
    rgb = img.numpy().transpose(1, 2, 0)
    blended = np.clip((1 - alpha) * rgb + alpha * _heat_colors(heat), 0, 1)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((blended * 255).round().astype(np.uint8)).save(out_path)
    return out_path
