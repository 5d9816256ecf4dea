"""Per-class MC filter statistics and frequency-thresholded global sets."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cfe import MCFilterSet
from .exceptions import FormatError, UsageError
from .model import PredictionRecord

PROFILE_VERSION = 1

logger = logging.getLogger(__name__)


@dataclass
class ClassFilterProfile:
    """Accumulator of MC filter occurrences over one class's training images."""

    class_label: int
    counts: np.ndarray
    magnitude_sums: np.ndarray
    samples_accumulated: int = 0

    @classmethod
    def empty(cls, class_label: int, filter_count: int) -> "ClassFilterProfile":
        return cls(
            class_label=class_label,
            counts=np.zeros(filter_count, dtype=np.int64),
            magnitude_sums=np.zeros(filter_count, dtype=np.float64),
        )

    @property
    def filter_count(self) -> int:
        return len(self.counts)

    def normalized_magnitude(self, k: int) -> float:
        """Mean accumulated magnitude of filter k; 0 when never seen."""
        if self.counts[k] == 0:
            return 0.0
        return float(self.magnitude_sums[k] / self.counts[k])


@dataclass(frozen=True)
class GlobalFilterSet:
    """Frequency-thresholded class-level filter set."""

    class_label: int
    bits: np.ndarray
    normalized_freq: np.ndarray

    @property
    def indices(self) -> tuple[int, ...]:
        return tuple(int(k) for k in np.flatnonzero(self.bits))


def qualifies(record: PredictionRecord, tau: float) -> tuple[bool, str | None]:
    """Confident-correct gate: accumulate only if correct and confidence > tau."""
    if record.true_class is None:
        return False, "no_true_class"
    if record.inferred_class != record.true_class:
        return False, "misclassified"
    if not record.confidence > tau:
        return False, "low_confidence"
    return True, None


def accumulate(
    profile: ClassFilterProfile,
    record: PredictionRecord,
    mc: MCFilterSet,
    tau: float,
) -> ClassFilterProfile:
    """Fold one prediction's MC set into the class profile, gated by tau.

    Non-qualifying records (misclassified, or confidence <= tau) leave the
    profile unchanged; the skip is logged. Updates in place and returns the
    profile.
    """
    if record.true_class is None:
        raise UsageError("accumulate requires a record with true_class")
    if mc.class_label != record.inferred_class:
        raise UsageError(
            f"MC set class {mc.class_label} != record inferred class {record.inferred_class}"
        )
    if profile.class_label != record.inferred_class:
        raise UsageError(
            f"profile class {profile.class_label} != record inferred class "
            f"{record.inferred_class}"
        )
    ok, reason = qualifies(record, tau)
    if not ok:
        logger.debug("skip %s: %s", record.image_id, reason)
        return profile
    for k in mc.indices:
        profile.counts[k] += 1
        profile.magnitude_sums[k] += mc.magnitudes.get(k, 0.0)
    profile.samples_accumulated += 1
    return profile


def derive_global_set(profile: ClassFilterProfile, freq_threshold: float) -> GlobalFilterSet:
    """Threshold normalized activation frequencies into a binary filter set.

    Frequencies are normalized by the class's maximum per-filter count, and a
    filter enters the set when its normalized frequency is >= the threshold.
    A threshold of exactly 0 therefore admits every filter.
    """
    if profile.samples_accumulated < 1:
        raise UsageError(f"profile for class {profile.class_label} has no accumulated samples")
    if not 0.0 <= freq_threshold <= 1.0:
        raise UsageError("freq_threshold must lie in [0, 1]")
    max_count = int(profile.counts.max())
    if max_count == 0:
        normalized = np.zeros_like(profile.counts, dtype=np.float64)
    else:
        normalized = profile.counts.astype(np.float64) / max_count
    bits = (normalized >= freq_threshold).astype(np.uint8)
    return GlobalFilterSet(profile.class_label, bits, normalized)


def merge(a: ClassFilterProfile, b: ClassFilterProfile) -> ClassFilterProfile:
    """Element-wise sum of two partial profiles (associative, commutative)."""
    if a.class_label != b.class_label:
        raise UsageError(f"cannot merge profiles for classes {a.class_label} and {b.class_label}")
    if a.filter_count != b.filter_count:
        raise UsageError(f"filter count mismatch: {a.filter_count} vs {b.filter_count}")
    return ClassFilterProfile(
        class_label=a.class_label,
        counts=a.counts + b.counts,
        magnitude_sums=a.magnitude_sums + b.magnitude_sums,
        samples_accumulated=a.samples_accumulated + b.samples_accumulated,
    )


def save_profiles(profiles: dict[int, ClassFilterProfile], path: str | Path) -> None:
    payload = {
        str(label): {
            "profile_version": PROFILE_VERSION,
            "counts": [int(c) for c in p.counts],
            "magnitude_sums": [float(m) for m in p.magnitude_sums],
            "samples_accumulated": int(p.samples_accumulated),
            "n": p.filter_count,
        }
        for label, p in sorted(profiles.items())
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_profiles(path: str | Path) -> dict[int, ClassFilterProfile]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt profile file {path}: {exc}") from exc
    profiles: dict[int, ClassFilterProfile] = {}
    for label_str, entry in payload.items():
        version = entry.get("profile_version")
        if version != PROFILE_VERSION:
            raise FormatError(
                f"unsupported profile_version {version!r} for class {label_str}, "
                f"expected {PROFILE_VERSION}"
            )
        counts = np.asarray(entry["counts"], dtype=np.int64)
        sums = np.asarray(entry["magnitude_sums"], dtype=np.float64)
        if len(counts) != entry["n"] or len(sums) != entry["n"]:
            raise FormatError(f"profile for class {label_str} has inconsistent lengths")
        profiles[int(label_str)] = ClassFilterProfile(
            class_label=int(label_str),
            counts=counts,
            magnitude_sums=sums,
            samples_accumulated=int(entry["samples_accumulated"]),
        )
    return profiles
