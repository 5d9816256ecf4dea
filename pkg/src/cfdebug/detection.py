"""Misclassification detection from filter-agreement scores.

A test prediction is scored by comparing its locally activated filters (by
default the MC filters extracted for that prediction) against the global
filter set of the inferred class. Low agreement relative to the class's mean
training-set score marks the prediction as a likely misclassification.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cfe import MCFilterSet
from .exceptions import UsageError
from .model import PredictionRecord
from .profiles import GlobalFilterSet

logger = logging.getLogger(__name__)

METRIC_AVG_RECALL = "avg_recall"
METRIC_AVG_F1 = "avg_f1"
METRIC_RECALL_FLOOR = "recall_floor"
METRICS = (METRIC_AVG_RECALL, METRIC_AVG_F1, METRIC_RECALL_FLOOR)

REASON_BELOW_CLASS_MEAN = "below_class_mean"
REASON_BELOW_RECALL_FLOOR = "below_recall_floor"
REASON_SKIPPED_HIGH_CONFIDENCE = "skipped_high_confidence"
REASON_NOT_FLAGGED = "not_flagged"
FLAGGED_REASONS = (REASON_BELOW_CLASS_MEAN, REASON_BELOW_RECALL_FLOOR)

LOCAL_SOURCE_MC = "mc"
LOCAL_SOURCE_ACTIVATION_MAP = "activation_map"

TABLE_HEADER = [
    "Model",
    "Total errors",
    "Skip threshold",
    "Freq. threshold",
    "Metric",
    "Errors detected",
    "New errors",
]


@dataclass
class DetectionConfig:
    skip_threshold: float = 0.90
    freq_threshold: float = 0.15
    metric: str = METRIC_AVG_RECALL
    recall_floor_value: float = 0.3
    local_source: str = LOCAL_SOURCE_MC
    per_class_thresholds: bool = True  # False: one global training mean

    def __post_init__(self) -> None:
        if not 0.0 <= self.skip_threshold <= 1.0:
            raise UsageError("skip_threshold must lie in [0, 1]")
        if self.metric not in METRICS:
            raise UsageError(f"unknown metric {self.metric!r}, expected one of {METRICS}")
        if self.local_source not in (LOCAL_SOURCE_MC, LOCAL_SOURCE_ACTIVATION_MAP):
            raise UsageError(f"unknown local_source {self.local_source!r}")

    def metric_label(self) -> str:
        if self.metric == METRIC_AVG_RECALL:
            return "Avg. Recall"
        if self.metric == METRIC_AVG_F1:
            return "Avg. F1 score"
        return f"Recall < {self.recall_floor_value:g}"


@dataclass
class DetectionResult:
    image_id: str
    inferred_class: int
    agreement_score: float
    flagged: bool
    reason: str

    def __post_init__(self) -> None:
        if self.flagged and self.reason not in FLAGGED_REASONS:
            raise UsageError(f"flagged result cannot carry reason {self.reason!r}")

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "inferred_class": int(self.inferred_class),
            "agreement_score": float(self.agreement_score),
            "flagged": bool(self.flagged),
            "reason": self.reason,
        }


def _as_index_set(bits: np.ndarray) -> set[int]:
    return set(int(k) for k in np.flatnonzero(np.asarray(bits)))


def agreement_recall(local_bits: np.ndarray, global_set: GlobalFilterSet) -> float:
    """|local AND global| / |global|. Errors on an empty global set."""
    local = _as_index_set(local_bits)
    glob = _as_index_set(global_set.bits)
    if len(local_bits) != len(global_set.bits):
        raise UsageError("local and global bit vectors differ in length")
    if not glob:
        raise UsageError(f"global set for class {global_set.class_label} is empty")
    return len(local & glob) / len(glob)


def agreement_f1(local_bits: np.ndarray, global_set: GlobalFilterSet) -> float:
    """Harmonic mean of set precision and recall; 0 on any degenerate side."""
    local = _as_index_set(local_bits)
    glob = _as_index_set(global_set.bits)
    if len(local_bits) != len(global_set.bits):
        raise UsageError("local and global bit vectors differ in length")
    inter = len(local & glob)
    if not local or not glob or inter == 0:
        return 0.0
    precision = inter / len(local)
    recall = inter / len(glob)
    return 2 * precision * recall / (precision + recall)


def _score(local_bits: np.ndarray, global_set: GlobalFilterSet, metric: str) -> float:
    if metric == METRIC_AVG_F1:
        return agreement_f1(local_bits, global_set)
    return agreement_recall(local_bits, global_set)


def local_bits_for(
    record: PredictionRecord,
    mc: MCFilterSet | None,
    config: DetectionConfig,
) -> np.ndarray | None:
    if config.local_source == LOCAL_SOURCE_ACTIVATION_MAP:
        return record.activation_map
    if mc is None:
        return None
    return mc.to_bits()


def score_records(
    records: list[PredictionRecord],
    mc_sets: dict[str, MCFilterSet],
    global_sets: dict[int, GlobalFilterSet],
    config: DetectionConfig,
) -> list[dict]:
    """Agreement score of each labeled record against its true-class set.

    Records without a usable local source (no MC set under the MC source) are
    skipped. Returns one entry per scored record; this is the raw material for
    threshold calibration and is serialized so thresholds can be re-derived.
    """
    entries = []
    for record in records:
        if record.true_class is None:
            continue
        global_set = global_sets.get(record.true_class)
        if global_set is None:
            raise UsageError(f"no global filter set for class {record.true_class}")
        bits = local_bits_for(record, mc_sets.get(record.image_id), config)
        if bits is None:
            continue
        entries.append(
            {
                "image_id": record.image_id,
                "class": int(record.true_class),
                "score": _score(bits, global_set, config.metric),
            }
        )
    return entries


def calibrate_class_thresholds(
    records: list[PredictionRecord],
    mc_sets: dict[str, MCFilterSet],
    global_sets: dict[int, GlobalFilterSet],
    config: DetectionConfig,
) -> dict[int, float]:
    """Per-class mean training agreement score, the flagging threshold.

    With ``per_class_thresholds`` off, every class shares the overall mean.
    Classes with no scored records are excluded with a warning.
    """
    entries = score_records(records, mc_sets, global_sets, config)
    return thresholds_from_scores(entries, global_sets, config)


def thresholds_from_scores(
    entries: list[dict],
    global_sets: dict[int, GlobalFilterSet],
    config: DetectionConfig,
) -> dict[int, float]:
    if not config.per_class_thresholds:
        if not entries:
            return {}
        overall = float(np.mean([e["score"] for e in entries]))
        return {label: overall for label in global_sets}
    by_class: dict[int, list[float]] = {}
    for e in entries:
        by_class.setdefault(e["class"], []).append(e["score"])
    thresholds = {}
    for label in global_sets:
        scores = by_class.get(label)
        if not scores:
            logger.warning("class %d has no scored training records; excluded", label)
            continue
        thresholds[label] = float(np.mean(scores))
    return thresholds


def flag(
    record: PredictionRecord,
    mc: MCFilterSet | None,
    global_sets: dict[int, GlobalFilterSet],
    thresholds: dict[int, float],
    config: DetectionConfig,
) -> DetectionResult:
    """Decide whether one prediction is a likely misclassification.

    High-confidence predictions (confidence > skip threshold) are trusted and
    never flagged; a skip threshold of exactly 0 disables the skip entirely
    (every prediction is evaluated). Otherwise the agreement score against the
    inferred class's global set is compared either to the class's mean
    training score (strict "<") or, under the recall-floor metric, to the
    fixed floor.
    """
    global_set = global_sets.get(record.inferred_class)
    if global_set is None:
        raise UsageError(f"no global filter set for inferred class {record.inferred_class}")
    bits = local_bits_for(record, mc, config)
    if bits is None:
        raise UsageError(f"record {record.image_id!r} has no MC set for scoring")
    score = _score(bits, global_set, config.metric)

    if config.skip_threshold > 0 and record.confidence > config.skip_threshold:
        return DetectionResult(
            record.image_id, record.inferred_class, score, False, REASON_SKIPPED_HIGH_CONFIDENCE
        )
    if config.metric == METRIC_RECALL_FLOOR:
        if score < config.recall_floor_value:
            return DetectionResult(
                record.image_id, record.inferred_class, score, True, REASON_BELOW_RECALL_FLOOR
            )
        return DetectionResult(
            record.image_id, record.inferred_class, score, False, REASON_NOT_FLAGGED
        )
    if record.inferred_class not in thresholds:
        raise UsageError(f"no calibrated threshold for class {record.inferred_class}")
    if score < thresholds[record.inferred_class]:
        return DetectionResult(
            record.image_id, record.inferred_class, score, True, REASON_BELOW_CLASS_MEAN
        )
    return DetectionResult(record.image_id, record.inferred_class, score, False, REASON_NOT_FLAGGED)


@dataclass
class DetectionSummary:
    model: str
    total_errors: int
    skip_threshold: float
    freq_threshold: float
    metric_label: str
    errors_detected: int
    detected_pct: int
    new_errors: int

    def csv_row(self) -> list[str]:
        return [
            self.model,
            str(self.total_errors),
            f"{self.skip_threshold * 100:g}%",
            f"{self.freq_threshold * 100:g}%",
            self.metric_label,
            f"{self.errors_detected} ({self.detected_pct}%)",
            str(self.new_errors),
        ]


def detection_report(
    results: list[DetectionResult],
    records: list[PredictionRecord],
    config: DetectionConfig,
    model_name: str = "model",
) -> DetectionSummary:
    """Count detected vs newly introduced errors against ground truth."""
    truth = {r.image_id: r for r in records if r.true_class is not None}
    total_errors = sum(1 for r in truth.values() if r.inferred_class != r.true_class)
    detected = 0
    new_errors = 0
    for res in results:
        rec = truth.get(res.image_id)
        if rec is None or not res.flagged:
            continue
        if rec.inferred_class != rec.true_class:
            detected += 1
        else:
            new_errors += 1
    pct = round(100 * detected / total_errors) if total_errors else 0
    return DetectionSummary(
        model=model_name,
        total_errors=total_errors,
        skip_threshold=config.skip_threshold,
        freq_threshold=config.freq_threshold,
        metric_label=config.metric_label(),
        errors_detected=detected,
        detected_pct=pct,
        new_errors=new_errors,
    )


def write_summary_csv(summaries: list[DetectionSummary], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TABLE_HEADER)
        for summary in summaries:
            writer.writerow(summary.csv_row())
