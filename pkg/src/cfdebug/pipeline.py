"""Batch pipeline commands: extract, accumulate, detect, debug, report.

Each command reads/writes files under an output directory and records a
manifest with a config snapshot and checksums of everything it wrote, so any
run can be replayed (``rerun_from_manifest``) and verified for bit-identical
artifacts. Commands communicate only through files.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .cfe import CfeConfig, identify_mc_filters, read_mc_sets, write_mc_sets
from .data import load_split
from .debugging import (
    DebugConfig,
    debug_train,
    lambda_sweep,
    write_sweep_csv,
)
from .detection import (
    DetectionConfig,
    METRIC_AVG_F1,
    METRIC_AVG_RECALL,
    METRIC_RECALL_FLOOR,
    detection_report,
    flag,
    score_records,
    thresholds_from_scores,
    write_summary_csv,
)
from .exceptions import UsageError
from .manifest import RunManifest, compare_artifacts, start_manifest
from .model import (
    ClassifierHandle,
    dump_json_line,
    load_classifier,
    read_records,
    save_classifier,
    write_records,
)
from .profiles import (
    ClassFilterProfile,
    accumulate,
    derive_global_set,
    load_profiles,
    qualifies,
    save_profiles,
)
from .reporting import class_recall_delta, top_sections, write_recall_delta_csv
from .saliency import saliency_overlay

logger = logging.getLogger(__name__)

PREDICT_CHUNK = 256


def _write_jsonl(rows: list[dict], path: Path) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(dump_json_line(row) + "\n")


def canonical_table_configs(local_source: str = "mc") -> list[DetectionConfig]:
    """The three standard detection settings reported side by side."""
    return [
        DetectionConfig(0.90, 0.15, METRIC_AVG_RECALL, local_source=local_source),
        DetectionConfig(0.90, 0.15, METRIC_AVG_F1, local_source=local_source),
        DetectionConfig(
            0.0, 0.0, METRIC_RECALL_FLOOR, recall_floor_value=0.3, local_source=local_source
        ),
    ]


def cmd_extract(
    dataset_dir: str | Path,
    checkpoint: str | Path,
    out_dir: str | Path,
    tau: float = 0.90,
    skip_nonqualifying: bool = True,
    records_only: bool = False,
    cfe_config: CfeConfig | None = None,
    activation_threshold: float = 0.5,
) -> RunManifest:
    """Predict every image in a split and extract MC filter sets.

    With ``skip_nonqualifying`` (training mode) MC extraction runs only on
    confident correct predictions and skips are logged; detection mode
    (``skip_nonqualifying=False``) extracts for every prediction.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfe_config = cfe_config or CfeConfig()
    manifest = start_manifest(
        "extract",
        params={
            "tau": tau,
            "skip_nonqualifying": skip_nonqualifying,
            "records_only": records_only,
            "activation_threshold": activation_threshold,
            "cfe": asdict(cfe_config),
        },
        inputs={"dataset": dataset_dir, "checkpoint": checkpoint},
    )
    split = load_split(dataset_dir)
    handle = load_classifier(checkpoint)
    handle.activation_threshold = activation_threshold

    records = []
    for start in range(0, len(split), PREDICT_CHUNK):
        chunk = slice(start, start + PREDICT_CHUNK)
        records.extend(
            handle.predict_batch(
                split.x[chunk],
                split.image_ids[chunk],
                [int(c) for c in split.y[chunk]],
            )
        )

    mc_entries = []
    skips = []
    if not records_only:
        for i, record in enumerate(records):
            if skip_nonqualifying:
                ok, reason = qualifies(record, tau)
                if not ok:
                    skips.append({"image_id": record.image_id, "reason": reason})
                    continue
            mc = identify_mc_filters(handle, split.x[i], record.inferred_class, cfe_config)
            mc_entries.append((record.image_id, mc))

    write_records(records, out_dir / "records.jsonl")
    write_mc_sets(mc_entries, out_dir / "mcsets.jsonl")
    _write_jsonl(skips, out_dir / "skips.jsonl")
    manifest.add_output("records", out_dir / "records.jsonl")
    manifest.add_output("mcsets", out_dir / "mcsets.jsonl")
    manifest.add_output("skips", out_dir / "skips.jsonl")
    manifest.write(out_dir)
    logger.info(
        "extract: %d records, %d MC sets, %d skipped", len(records), len(mc_entries), len(skips)
    )
    return manifest


def cmd_accumulate(
    records_path: str | Path,
    mcsets_path: str | Path,
    out_dir: str | Path,
    tau: float = 0.90,
) -> RunManifest:
    """Fold extracted MC sets into per-class filter profiles."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = start_manifest(
        "accumulate",
        params={"tau": tau},
        inputs={"records": records_path, "mcsets": mcsets_path},
    )
    records = read_records(records_path)
    mc_sets = read_mc_sets(mcsets_path)

    profiles: dict[int, ClassFilterProfile] = {}
    skips = []
    for record in records:
        ok, reason = qualifies(record, tau)
        if not ok:
            skips.append({"image_id": record.image_id, "reason": reason})
            continue
        mc = mc_sets.get(record.image_id)
        if mc is None:
            skips.append({"image_id": record.image_id, "reason": "no_mc_set"})
            continue
        label = record.inferred_class
        if label not in profiles:
            profiles[label] = ClassFilterProfile.empty(label, len(record.gap_features))
        accumulate(profiles[label], record, mc, tau)

    save_profiles(profiles, out_dir / "profiles.json")
    _write_jsonl(skips, out_dir / "accumulate_skips.jsonl")
    manifest.add_output("profiles", out_dir / "profiles.json")
    manifest.add_output("accumulate_skips", out_dir / "accumulate_skips.jsonl")
    manifest.write(out_dir)
    return manifest


def cmd_detect(
    records_path: str | Path,
    mcsets_path: str | Path,
    train_records_path: str | Path,
    train_mcsets_path: str | Path,
    profiles_path: str | Path,
    out_dir: str | Path,
    configs: list[DetectionConfig],
    model_name: str = "model",
) -> RunManifest:
    """Flag likely misclassifications under one or more detection settings.

    Emits per-image results and a summary CSV with one row per setting.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = start_manifest(
        "detect",
        params={"model_name": model_name, "configs": [asdict(c) for c in configs]},
        inputs={
            "records": records_path,
            "mcsets": mcsets_path,
            "train_records": train_records_path,
            "train_mcsets": train_mcsets_path,
            "profiles": profiles_path,
        },
    )
    test_records = read_records(records_path)
    test_mcsets = read_mc_sets(mcsets_path)
    train_records = read_records(train_records_path)
    train_mcsets = read_mc_sets(train_mcsets_path)
    profiles = load_profiles(profiles_path)

    summaries = []
    thresholds_blob = {}
    for i, config in enumerate(configs):
        global_sets = {
            label: derive_global_set(p, config.freq_threshold) for label, p in profiles.items()
        }
        train_scores = score_records(train_records, train_mcsets, global_sets, config)
        thresholds = thresholds_from_scores(train_scores, global_sets, config)
        results = [
            flag(r, test_mcsets.get(r.image_id), global_sets, thresholds, config)
            for r in test_records
        ]
        row_tag = f"row{i}_{config.metric}"
        _write_jsonl([r.to_dict() for r in results], out_dir / f"results_{row_tag}.jsonl")
        _write_jsonl(train_scores, out_dir / f"train_scores_{row_tag}.jsonl")
        manifest.add_output(f"results_{row_tag}", out_dir / f"results_{row_tag}.jsonl")
        manifest.add_output(f"train_scores_{row_tag}", out_dir / f"train_scores_{row_tag}.jsonl")
        thresholds_blob[row_tag] = {str(k): v for k, v in sorted(thresholds.items())}
        summaries.append(detection_report(results, test_records, config, model_name))

    with open(out_dir / "thresholds.json", "w") as fh:
        json.dump(thresholds_blob, fh, sort_keys=True, indent=1)
        fh.write("\n")
    write_summary_csv(summaries, out_dir / "summary.csv")
    manifest.add_output("thresholds", out_dir / "thresholds.json")
    manifest.add_output("summary", out_dir / "summary.csv")
    manifest.write(out_dir)
    return manifest


def _write_training_log(outcome, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss_ce", "loss_mc", "loss_nonmc", "test_accuracy"])
        for e in range(len(outcome.epoch_ce)):
            writer.writerow(
                [
                    e,
                    repr(outcome.epoch_ce[e]),
                    repr(outcome.epoch_mc[e]),
                    repr(outcome.epoch_nonmc[e]),
                    repr(outcome.epoch_test_accuracy[e]),
                ]
            )


def cmd_debug(
    dataset_root: str | Path,
    checkpoint: str | Path,
    profiles_path: str | Path,
    out_dir: str | Path,
    config: DebugConfig | None = None,
    freq_threshold: float = 0.15,
    sweep: bool = False,
) -> RunManifest:
    """Retrain the classifier against the frozen global filter sets.

    ``sweep`` runs the full loss-weight grid plus base and fine-tuned
    reference arms and keeps the best grid point's checkpoint.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config = config or DebugConfig()
    manifest = start_manifest(
        "debug",
        params={"config": asdict(config), "freq_threshold": freq_threshold, "sweep": sweep},
        inputs={"dataset": dataset_root, "checkpoint": checkpoint, "profiles": profiles_path},
        seed=config.seed,
    )
    root = Path(dataset_root)
    train = load_split(root / "train")
    test = load_split(root / "test")
    handle = load_classifier(checkpoint)
    profiles = load_profiles(profiles_path)
    global_sets = {
        label: derive_global_set(p, freq_threshold) for label, p in profiles.items()
    }

    if sweep:
        rows, debugged, outcome = lambda_sweep(
            handle, train.x, train.y, test.x, test.y, global_sets, config
        )
        write_sweep_csv(rows, out_dir / "sweep.csv")
        manifest.add_output("sweep", out_dir / "sweep.csv")
    else:
        outcome, debugged = debug_train(
            handle, train.x, train.y, test.x, test.y, global_sets, config
        )

    save_classifier(debugged, out_dir / "debugged.pt")
    _write_training_log(outcome, out_dir / "training_log.csv")
    with open(out_dir / "outcome.json", "w") as fh:
        json.dump(outcome.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")
    manifest.add_output("checkpoint", out_dir / "debugged.pt")
    manifest.add_output("training_log", out_dir / "training_log.csv")
    manifest.add_output("outcome", out_dir / "outcome.json")
    manifest.write(out_dir)
    return manifest


def cmd_report(
    out_dir: str | Path,
    base_records_path: str | Path | None = None,
    debugged_records_path: str | Path | None = None,
    dataset_dir: str | Path | None = None,
    checkpoint: str | Path | None = None,
    saliency_images: list[str | Path] | None = None,
    saliency_class: int | None = None,
) -> RunManifest:
    """Comparison reports: per-class recall deltas and saliency overlays."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = start_manifest(
        "report",
        params={"saliency_class": saliency_class},
        inputs={
            k: v
            for k, v in {
                "base_records": base_records_path,
                "debugged_records": debugged_records_path,
                "dataset": dataset_dir,
                "checkpoint": checkpoint,
                "saliency_images": ",".join(str(p) for p in saliency_images or []),
            }.items()
            if v
        },
    )
    if base_records_path and debugged_records_path:
        class_names = None
        if dataset_dir:
            class_names = [p.name for p in sorted(Path(dataset_dir).iterdir()) if p.is_dir()]
        rows = class_recall_delta(
            read_records(base_records_path), read_records(debugged_records_path), class_names
        )
        write_recall_delta_csv(rows, out_dir / "recall_delta.csv")
        sections = top_sections(rows)
        with open(out_dir / "recall_delta_top.json", "w") as fh:
            json.dump(
                {
                    side: [
                        {
                            "class": r.class_name,
                            "before": r.before,
                            "after": r.after,
                            "change": r.change,
                        }
                        for r in rows_
                    ]
                    for side, rows_ in sections.items()
                },
                fh,
                sort_keys=True,
                indent=1,
            )
            fh.write("\n")
        manifest.add_output("recall_delta", out_dir / "recall_delta.csv")
        manifest.add_output("recall_delta_top", out_dir / "recall_delta_top.json")

    if checkpoint and saliency_images:
        from PIL import Image

        handle = load_classifier(checkpoint)
        for img_path in saliency_images:
            img_path = Path(img_path)
            with Image.open(img_path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0
            image = torch.from_numpy(arr)
            cls = saliency_class
            if cls is None:
                cls = handle.predict(image).inferred_class
            out_path = out_dir / f"saliency_{img_path.stem}_class{cls}.png"
            saliency_overlay(handle, image, cls, out_path)
            manifest.add_output(f"saliency_{img_path.stem}", out_path)

    manifest.write(out_dir)
    return manifest


def rerun_from_manifest(
    manifest_path: str | Path, out_dir: str | Path
) -> tuple[RunManifest, dict[str, bool]]:
    """Re-execute a recorded command into a fresh directory and compare the
    checksums of each shared artifact name. Returns (new manifest, comparison)."""
    old = RunManifest.load(manifest_path)
    params, inputs = old.params, old.inputs
    if old.command == "extract":
        new = cmd_extract(
            inputs["dataset"],
            inputs["checkpoint"],
            out_dir,
            tau=params["tau"],
            skip_nonqualifying=params["skip_nonqualifying"],
            records_only=params["records_only"],
            cfe_config=CfeConfig(**params["cfe"]),
            activation_threshold=params["activation_threshold"],
        )
    elif old.command == "accumulate":
        new = cmd_accumulate(inputs["records"], inputs["mcsets"], out_dir, tau=params["tau"])
    elif old.command == "detect":
        new = cmd_detect(
            inputs["records"],
            inputs["mcsets"],
            inputs["train_records"],
            inputs["train_mcsets"],
            inputs["profiles"],
            out_dir,
            configs=[DetectionConfig(**c) for c in params["configs"]],
            model_name=params["model_name"],
        )
    elif old.command == "debug":
        new = cmd_debug(
            inputs["dataset"],
            inputs["checkpoint"],
            inputs["profiles"],
            out_dir,
            config=DebugConfig(**params["config"]),
            freq_threshold=params["freq_threshold"],
            sweep=params["sweep"],
        )
    elif old.command == "report":
        new = cmd_report(
            out_dir,
            base_records_path=inputs.get("base_records"),
            debugged_records_path=inputs.get("debugged_records"),
            dataset_dir=inputs.get("dataset"),
            checkpoint=inputs.get("checkpoint"),
            saliency_images=[p for p in inputs.get("saliency_images", "").split(",") if p],
            saliency_class=params["saliency_class"],
        )
    else:
        raise UsageError(f"unknown command {old.command!r} in manifest")
    return new, compare_artifacts(old, new)
