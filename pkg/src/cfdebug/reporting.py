"""Result comparison reports: per-class recall deltas between two models."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from .exceptions import UsageError
from .model import PredictionRecord

RECALL_DELTA_HEADER = ["Class", "Original recall", "Debugged recall", "Change"]


@dataclass(frozen=True)
class RecallDelta:
    class_label: int
    class_name: str
    before: float
    after: float

    @property
    def change(self) -> float:
        return self.after - self.before


def _per_class_recall(records: list[PredictionRecord]) -> dict[int, float]:
    totals: dict[int, int] = {}
    correct: dict[int, int] = {}
    for r in records:
        if r.true_class is None:
            raise UsageError(f"record {r.image_id!r} has no ground truth")
        totals[r.true_class] = totals.get(r.true_class, 0) + 1
        if r.inferred_class == r.true_class:
            correct[r.true_class] = correct.get(r.true_class, 0) + 1
    return {c: correct.get(c, 0) / n for c, n in totals.items()}


def class_recall_delta(
    base_records: list[PredictionRecord],
    debugged_records: list[PredictionRecord],
    class_names: list[str] | None = None,
) -> list[RecallDelta]:
    """Per-class recall before/after, sorted by change (most improved first).

    Both record sets must cover the same images.
    """
    base_ids = {r.image_id for r in base_records}
    debug_ids = {r.image_id for r in debugged_records}
    if base_ids != debug_ids:
        raise UsageError(
            f"result sets cover different images "
            f"({len(base_ids ^ debug_ids)} ids differ)"
        )
    before = _per_class_recall(base_records)
    after = _per_class_recall(debugged_records)
    if set(before) != set(after):
        raise UsageError("result sets cover different classes")
    rows = []
    for label in sorted(before):
        name = class_names[label] if class_names else str(label)
        rows.append(RecallDelta(label, name, before[label], after[label]))
    return sorted(rows, key=lambda r: (-r.change, r.class_label))


def top_sections(rows: list[RecallDelta], k: int = 3) -> dict[str, list[RecallDelta]]:
    return {
        "improved": rows[:k],
        "worsened": sorted(rows, key=lambda r: (r.change, r.class_label))[:k],
    }


def write_recall_delta_csv(rows: list[RecallDelta], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RECALL_DELTA_HEADER)
        for r in rows:
            writer.writerow([r.class_name, f"{r.before:.2f}", f"{r.after:.2f}", f"{r.change:.2f}"])
