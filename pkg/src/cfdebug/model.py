"""Classifier wrapper: prediction, pooled final-conv features, and per-filter masking.

The networks here all share one structural contract: a convolutional feature
stack whose last layer has ``filter_count`` output channels (post-ReLU), a
multiplicative per-filter gate at that point, global average pooling, and a
linear classification head. Everything downstream of this module (filter
extraction, profiling, detection, retraining) only relies on that contract.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .exceptions import FormatError, InputError, NumericError

RECORD_VERSION = 1
CHECKPOINT_VERSION = 1


class MaskableCNN(nn.Module):
    """Small CNN with a per-filter gate between the last conv layer and GAP.

    Architecture:
        [Conv3x3 -> BatchNorm -> ReLU -> MaxPool2] x len(widths)
        Conv3x3(filter_count) -> ReLU          <- gate applies here
        GAP -> Linear(label_count)

    The gate multiplies the post-ReLU channel outputs, so a zero mask entry
    silences that filter's contribution entirely and the pooled feature of a
    gated channel is exactly ``mask[k] * gap[k]``.
    """

    def __init__(
        self,
        label_count: int,
        filter_count: int = 64,
        widths: Sequence[int] = (32, 64),
        in_channels: int = 3,
        image_size: int = 32,
    ) -> None:
        super().__init__()
        if label_count < 2:
            raise ValueError("label_count must be >= 2")
        if filter_count < 1:
            raise ValueError("filter_count must be >= 1")
        self.label_count = label_count
        self.filter_count = filter_count
        self.in_channels = in_channels
        self.image_size = image_size
        self.widths = tuple(widths)

        blocks: list[nn.Module] = []
        ch = in_channels
        for w in self.widths:
            blocks.extend(
                [
                    nn.Conv2d(ch, w, kernel_size=3, padding=1),
                    nn.BatchNorm2d(w),
                    nn.ReLU(inplace=True),
                    nn.MaxPool2d(2),
                ]
            )
            ch = w
        blocks.extend(
            [
                nn.Conv2d(ch, filter_count, kernel_size=3, padding=1),
                nn.ReLU(inplace=True),
            ]
        )
        self.features = nn.Sequential(*blocks)
        self.head = nn.Linear(filter_count, label_count)

    def arch_config(self) -> dict:
        return {
            "label_count": self.label_count,
            "filter_count": self.filter_count,
            "widths": list(self.widths),
            "in_channels": self.in_channels,
            "image_size": self.image_size,
        }

    def forward_parts(
        self, x: torch.Tensor, mask: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Return (logits, gap, feature_maps) for a batch, optionally gated."""
        fmaps = self.features(x)
        if mask is not None:
            fmaps = fmaps * mask.view(1, -1, 1, 1)
        gap = fmaps.mean(dim=(2, 3))
        return self.head(gap), gap, fmaps

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        logits, _, _ = self.forward_parts(x, mask)
        return logits


@dataclass
class PredictionRecord:
    """One inference event.

    ``gap_features`` is the pooled final-conv feature vector (length n,
    non-negative), ``activation_map`` the thresholded binary map derived from
    it. ``true_class`` is None for unlabeled inputs.
    """

    image_id: str
    inferred_class: int
    confidence: float
    gap_features: np.ndarray
    activation_map: np.ndarray
    true_class: int | None = None

    def to_dict(self) -> dict:
        return {
            "record_version": RECORD_VERSION,
            "image_id": self.image_id,
            "inferred_class": int(self.inferred_class),
            "confidence": float(self.confidence),
            "true_class": None if self.true_class is None else int(self.true_class),
            "gap_features": [float(v) for v in self.gap_features],
            "activation_map": [int(v) for v in self.activation_map],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PredictionRecord":
        version = d.get("record_version")
        if version != RECORD_VERSION:
            raise FormatError(f"unsupported record_version {version!r}, expected {RECORD_VERSION}")
        return cls(
            image_id=d["image_id"],
            inferred_class=int(d["inferred_class"]),
            confidence=float(d["confidence"]),
            true_class=None if d["true_class"] is None else int(d["true_class"]),
            gap_features=np.asarray(d["gap_features"], dtype=np.float32),
            activation_map=np.asarray(d["activation_map"], dtype=np.uint8),
        )


def binary_activation_map(gap_features: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Binarize pooled features: bit k is 1 iff sigmoid(g[k]) > threshold.

    Strict ">" at the boundary, so g = 0 with threshold 0.5 yields 0.
    """
    if not 0.0 < threshold < 1.0:
        raise InputError(f"threshold must lie in (0, 1), got {threshold}")
    g = np.asarray(gap_features, dtype=np.float64)
    if g.ndim != 1:
        raise InputError(f"gap_features must be 1-D, got shape {g.shape}")
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gap features")
    sig = 1.0 / (1.0 + np.exp(-g))
    return (sig > threshold).astype(np.uint8)


class ClassifierHandle:
    """Inference facade over a MaskableCNN.

    All read-only methods run under no_grad on a net in eval mode and are safe
    to call concurrently over a frozen classifier. Mutating the wrapped net
    (training) requires exclusive access.
    """

    def __init__(self, net: MaskableCNN, activation_threshold: float = 0.5) -> None:
        self.net = net
        self.activation_threshold = activation_threshold
        self.net.eval()

    @property
    def label_count(self) -> int:
        return self.net.label_count

    @property
    def filter_count(self) -> int:
        return self.net.filter_count

    def _as_batch(self, image: torch.Tensor | np.ndarray) -> torch.Tensor:
        x = torch.as_tensor(image, dtype=torch.float32)
        expected = (self.net.in_channels, self.net.image_size, self.net.image_size)
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise InputError(f"expected image shape {expected}, got {tuple(image.shape)}")
        if not torch.isfinite(x).all():
            raise NumericError("non-finite values in input image")
        return x

    def _check_finite(self, logits: torch.Tensor) -> None:
        if not torch.isfinite(logits).all():
            raise NumericError("non-finite activations in forward pass")

    def predict(
        self,
        image: torch.Tensor | np.ndarray,
        image_id: str = "",
        true_class: int | None = None,
    ) -> PredictionRecord:
        """Run one forward pass; class is the argmax of softmax probabilities.

        Ties break toward the smallest class index. The pooled features and
        activation map come from the same pass.
        """
        return self.predict_batch(self._as_batch(image), [image_id], [true_class])[0]

    def predict_batch(
        self,
        images: torch.Tensor,
        image_ids: Sequence[str] | None = None,
        true_classes: Sequence[int | None] | None = None,
    ) -> list[PredictionRecord]:
        x = self._as_batch(images)
        b = x.shape[0]
        if image_ids is None:
            image_ids = [""] * b
        if true_classes is None:
            true_classes = [None] * b
        with torch.no_grad():
            logits, gap, _ = self.net.forward_parts(x)
        self._check_finite(logits)
        probs = torch.softmax(logits, dim=1).numpy().astype(np.float64)
        gap_np = gap.numpy().astype(np.float32)
        records = []
        for i in range(b):
            cls = int(np.argmax(probs[i]))  # first max wins
            records.append(
                PredictionRecord(
                    image_id=image_ids[i],
                    inferred_class=cls,
                    confidence=float(probs[i, cls]),
                    true_class=true_classes[i],
                    gap_features=gap_np[i],
                    activation_map=binary_activation_map(gap_np[i], self.activation_threshold),
                )
            )
        return records

    def logits(self, image: torch.Tensor | np.ndarray) -> np.ndarray:
        x = self._as_batch(image)
        with torch.no_grad():
            out = self.net(x)
        self._check_finite(out)
        return out[0].numpy().astype(np.float64)

    def gap_features(self, image: torch.Tensor | np.ndarray) -> np.ndarray:
        x = self._as_batch(image)
        with torch.no_grad():
            _, gap, _ = self.net.forward_parts(x)
        return gap[0].numpy().astype(np.float32)

    def masked_logits(self, image: torch.Tensor | np.ndarray, mask: np.ndarray | torch.Tensor) -> np.ndarray:
        """Logits with final-conv channels gated element-wise by ``mask``.

        Pure function of (parameters, image, mask); mask entries are expected
        in [0, 1], length n.
        """
        m = torch.as_tensor(mask, dtype=torch.float32).reshape(-1)
        if m.numel() != self.filter_count:
            raise InputError(f"mask length {m.numel()} != filter count {self.filter_count}")
        x = self._as_batch(image)
        with torch.no_grad():
            out = self.net(x, mask=m)
        self._check_finite(out)
        return out[0].numpy().astype(np.float64)

    def head_weights(self) -> tuple[np.ndarray, np.ndarray]:
        """Classification-head (weight, bias) as float64 arrays."""
        w = self.net.head.weight.detach().numpy().astype(np.float64)
        b = self.net.head.bias.detach().numpy().astype(np.float64)
        return w, b


def save_classifier(handle: ClassifierHandle, path: str | Path) -> None:
    torch.save(
        {
            "format": "cfdebug-checkpoint",
            "version": CHECKPOINT_VERSION,
            "arch": handle.net.arch_config(),
            "state_dict": handle.net.state_dict(),
            "activation_threshold": handle.activation_threshold,
        },
        str(path),
    )


def load_classifier(path: str | Path) -> ClassifierHandle:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    blob = torch.load(str(path), map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != "cfdebug-checkpoint":
        raise FormatError(f"{path} is not a classifier checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {blob.get('version')!r}")
    net = MaskableCNN(**blob["arch"])
    net.load_state_dict(blob["state_dict"])
    return ClassifierHandle(net, activation_threshold=blob.get("activation_threshold", 0.5))


def dump_json_line(obj: dict) -> str:
    """Canonical single-line JSON used for all JSONL artifacts."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_records(records: Iterable[PredictionRecord], path: str | Path) -> int:
    n = 0
    with open(path, "w") as fh:
        for rec in records:
            fh.write(dump_json_line(rec.to_dict()) + "\n")
            n += 1
    return n


def read_records(path: str | Path) -> list[PredictionRecord]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(PredictionRecord.from_dict(json.loads(line)))
    return out
