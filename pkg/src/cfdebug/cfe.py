"""Minimum-correct (MC) filter identification.

For one prediction, the MC filter set is a small subset of final-conv filters
whose retention alone keeps the classifier's argmax on the inferred class.
``identify_mc_filters`` finds one by relaxed mask optimization; for small
filter counts ``brute_force_mc_oracle`` finds the true minimum by exhaustive
search and serves as the independent reference in tests.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from .exceptions import FormatError, UsageError
from .model import ClassifierHandle, dump_json_line

ORACLE_MAX_FILTERS = 16


@dataclass(frozen=True)
class MCFilterSet:
    """Filter indices sufficient to keep a prediction, with their magnitudes.

    ``magnitudes[k]`` is the pooled activation of filter k for the image the
    set was extracted from. ``degenerate`` marks sets produced under abnormal
    conditions (all-zero pooled features, or an unrepairable mask).
    """

    class_label: int
    indices: tuple[int, ...]
    magnitudes: dict[int, float]
    filter_count: int
    degenerate: bool = False

    def to_bits(self) -> np.ndarray:
        bits = np.zeros(self.filter_count, dtype=np.uint8)
        for k in self.indices:
            bits[k] = 1
        return bits

    def to_dict(self) -> dict:
        return {
            "class_label": int(self.class_label),
            "indices": [int(k) for k in self.indices],
            "magnitudes": {str(k): float(v) for k, v in self.magnitudes.items()},
            "n": int(self.filter_count),
            "degenerate": bool(self.degenerate),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MCFilterSet":
        return cls(
            class_label=int(d["class_label"]),
            indices=tuple(int(k) for k in d["indices"]),
            magnitudes={int(k): float(v) for k, v in d["magnitudes"].items()},
            filter_count=int(d["n"]),
            degenerate=bool(d.get("degenerate", False)),
        )


@dataclass
class CfeConfig:
    """Settings for the relaxed-mask search.

    ``sparsity_weight`` is the L1 pressure on the mask; with 0 there is no
    drive toward small sets and the full active set comes back unchanged.
    When ``logits_loss_enabled`` the preservation term is the squared distance
    between masked and unmasked logits, otherwise cross-entropy to the target
    class. The greedy shrink pass only runs when sparsity is requested.
    """

    sparsity_weight: float = 2.0
    logits_loss_enabled: bool = True
    max_iterations: int = 200
    mask_init: float = 1.0
    convergence_tolerance: float = 1e-9
    learning_rate: float = 0.05
    greedy_prune: bool = True

    def __post_init__(self) -> None:
        if self.sparsity_weight < 0:
            raise UsageError("sparsity_weight must be >= 0")
        if self.max_iterations < 1:
            raise UsageError("max_iterations must be >= 1")
        if not 0.0 <= self.mask_init <= 1.0:
            raise UsageError("mask_init must lie in [0, 1]")
        if self.convergence_tolerance < 0:
            raise UsageError("convergence_tolerance must be >= 0")


def indicator_mask(indices: Iterable[int], filter_count: int) -> np.ndarray:
    mask = np.zeros(filter_count, dtype=np.float32)
    for k in indices:
        mask[k] = 1.0
    return mask


def _head_argmax(weight: np.ndarray, bias: np.ndarray, pooled: np.ndarray) -> int:
    return int(np.argmax(weight @ pooled + bias))


def _real_argmax(handle: ClassifierHandle, image, indices: Iterable[int]) -> int:
    mask = indicator_mask(indices, handle.filter_count)
    return int(np.argmax(handle.masked_logits(image, mask)))


def _optimize_mask(
    gap: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray,
    target_class: int,
    config: CfeConfig,
) -> np.ndarray:
    """Minimize preservation + sparsity over a relaxed mask in [0, 1]^n.

    Because the gate sits after the final ReLU and pooling/head are linear,
    gated logits equal ``W (mask * g) + b`` exactly, so the search runs in
    this reduced space instead of re-running the conv stack per step.
    """
    g = torch.from_numpy(gap.astype(np.float64))
    w = torch.from_numpy(weight)
    b = torch.from_numpy(bias)
    full_logits = w @ g + b
    mask = torch.full_like(g, float(config.mask_init), requires_grad=True)
    optimizer = torch.optim.Adam([mask], lr=config.learning_rate)
    target = torch.tensor([target_class])

    prev_obj = None
    for _ in range(config.max_iterations):
        optimizer.zero_grad()
        masked_logits = w @ (mask * g) + b
        if config.logits_loss_enabled:
            preservation = ((masked_logits - full_logits) ** 2).sum()
        else:
            preservation = torch.nn.functional.cross_entropy(
                masked_logits.unsqueeze(0), target
            )
        objective = preservation + config.sparsity_weight * mask.abs().sum()
        objective.backward()
        optimizer.step()
        with torch.no_grad():
            mask.clamp_(0.0, 1.0)
        obj = float(objective.detach())
        if prev_obj is not None and abs(prev_obj - obj) < config.convergence_tolerance:
            break
        prev_obj = obj
    return mask.detach().numpy()


def identify_mc_filters(
    handle: ClassifierHandle,
    image,
    target_class: int,
    config: CfeConfig | None = None,
) -> MCFilterSet:
    """Find a small filter subset whose retention preserves the inferred class.

    Pipeline: relaxed-mask optimization (preservation + L1 sparsity), mask
    binarization at 0.5, then a greedy repair pass that re-adds filters in
    non-increasing magnitude order until a real gated forward pass confirms
    the argmax, and (under sparsity) a greedy shrink pass that drops filters
    in ascending magnitude order while the argmax survives. The returned set
    is always verified with a gated forward pass before returning.

    ``target_class`` must equal the unmasked inferred class.
    """
    config = config or CfeConfig()
    record = handle.predict(image)
    if record.inferred_class != target_class:
        raise UsageError(
            f"MC filters are defined w.r.t. the inferred class "
            f"({record.inferred_class}), got target {target_class}"
        )
    gap = record.gap_features.astype(np.float64)
    n = handle.filter_count
    active = [k for k in range(n) if gap[k] > 0]
    if not active:
        # All-zero pooled features: every mask yields identical logits.
        return MCFilterSet(target_class, (), {}, n, degenerate=True)

    weight, bias = handle.head_weights()
    relaxed = _optimize_mask(gap, weight, bias, target_class, config)
    keep = [k for k in active if relaxed[k] > 0.5]

    by_magnitude_desc = sorted(active, key=lambda k: (-gap[k], k))
    if _real_argmax(handle, image, keep) != target_class:
        for k in by_magnitude_desc:
            if k in keep:
                continue
            keep.append(k)
            if _real_argmax(handle, image, keep) == target_class:
                break
        else:
            # Unreachable with this architecture (full active set always
            # reproduces the unmasked argmax), kept as a defensive fallback.
            return MCFilterSet(
                target_class,
                tuple(sorted(active)),
                {k: float(gap[k]) for k in sorted(active)},
                n,
                degenerate=True,
            )

    if config.greedy_prune and config.sparsity_weight > 0:
        # Shrink trials run in the reduced head space (exact, cheap); the
        # final verification below still uses a real gated forward pass.
        for k in sorted(keep, key=lambda k: (gap[k], k)):
            if len(keep) <= 1:
                break
            trial = [j for j in keep if j != k]
            pooled = np.zeros(n)
            pooled[trial] = gap[trial]
            if _head_argmax(weight, bias, pooled) == target_class:
                keep = trial

    if not keep:
        keep = [by_magnitude_desc[0]]
    while _real_argmax(handle, image, keep) != target_class:
        missing = [k for k in by_magnitude_desc if k not in keep]
        if not missing:
            break
        keep.append(missing[0])

    indices = tuple(sorted(keep))
    assert _real_argmax(handle, image, indices) == target_class
    return MCFilterSet(
        class_label=target_class,
        indices=indices,
        magnitudes={k: float(gap[k]) for k in indices},
        filter_count=n,
    )


def brute_force_mc_oracle(
    handle: ClassifierHandle,
    image,
    target_class: int,
) -> MCFilterSet:
    """Exhaustively find a minimum-cardinality filter subset preserving argmax.

    Enumerates subsets of the active filters in (cardinality, lexicographic)
    order and evaluates each with the real gated forward-pass semantics, so it
    shares nothing with the optimizer's search. Limited to small filter counts
    (2^n candidate masks). May return the empty set when the head's bias alone
    already selects the target class on zeroed features.
    """
    n = handle.filter_count
    if n > ORACLE_MAX_FILTERS:
        raise UsageError(f"exhaustive search limited to n <= {ORACLE_MAX_FILTERS}, got {n}")
    record = handle.predict(image)
    if record.inferred_class != target_class:
        raise UsageError(
            f"oracle target {target_class} differs from inferred class "
            f"{record.inferred_class}"
        )

    x = handle._as_batch(image)
    with torch.no_grad():
        fmaps = handle.net.features(x)  # (1, n, H, W); mask-independent prefix
    gap = fmaps.mean(dim=(2, 3))[0].numpy().astype(np.float64)
    active = [k for k in range(n) if gap[k] > 0]

    chunk_size = 2048
    for size in range(len(active) + 1):
        combos = itertools.combinations(active, size)
        while True:
            chunk = list(itertools.islice(combos, chunk_size))
            if not chunk:
                break
            masks = torch.zeros(len(chunk), n)
            for row, combo in enumerate(chunk):
                for k in combo:
                    masks[row, k] = 1.0
            with torch.no_grad():
                gated = fmaps * masks.unsqueeze(-1).unsqueeze(-1)
                pooled = gated.mean(dim=(2, 3))
                logits = handle.net.head(pooled).numpy()
            hits = np.flatnonzero(np.argmax(logits, axis=1) == target_class)
            if hits.size:
                indices = tuple(chunk[int(hits[0])])
                assert _real_argmax(handle, image, indices) == target_class
                return MCFilterSet(
                    class_label=target_class,
                    indices=indices,
                    magnitudes={k: float(gap[k]) for k in indices},
                    filter_count=n,
                )
    raise UsageError("no subset preserves the target class; inconsistent classifier state")


def write_mc_sets(entries: Iterable[tuple[str, MCFilterSet]], path: str | Path) -> int:
    """Write (image_id, MCFilterSet) pairs as JSON lines."""
    count = 0
    with open(path, "w") as fh:
        for image_id, mc in entries:
            fh.write(dump_json_line({"image_id": image_id, **mc.to_dict()}) + "\n")
            count += 1
    return count


def read_mc_sets(path: str | Path) -> dict[str, MCFilterSet]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    out: dict[str, MCFilterSet] = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            if "image_id" not in d:
                raise FormatError("MC set line missing image_id")
            out[d["image_id"]] = MCFilterSet.from_dict(d)
    return out
