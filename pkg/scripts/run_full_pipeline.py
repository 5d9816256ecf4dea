"""End-to-end desk-scale run: bootstrap -> extract -> accumulate -> detect ->
debug (sweep) -> report.

Usage:
    python scripts/run_full_pipeline.py --root runs/full --seed 0
"""

from __future__ import annotations

import argparse
from pathlib import Path

from cfdebug.bootstrap import train_base_classifier
from cfdebug.data import generate_dataset, load_split
from cfdebug.debugging import DebugConfig
from cfdebug.model import save_classifier
from cfdebug.pipeline import (
    canonical_table_configs,
    cmd_accumulate,
    cmd_debug,
    cmd_detect,
    cmd_extract,
    cmd_report,
)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--root", default="runs/full")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--per-class-train", type=int, default=300)
    parser.add_argument("--per-class-test", type=int, default=100)
    parser.add_argument("--base-epochs", type=int, default=60)
    parser.add_argument("--debug-epochs", type=int, default=5)
    args = parser.parse_args()

    root = Path(args.root)
    data_root = root / "dataset"
    base_ckpt = root / "base.pt"

    if not base_ckpt.exists():
        generate_dataset(
            data_root,
            per_class_train=args.per_class_train,
            per_class_test=args.per_class_test,
            seed=args.seed,
        )
        train = load_split(data_root / "train")
        test = load_split(data_root / "test")
        handle, stats = train_base_classifier(
            train, test, epochs=args.base_epochs, seed=args.seed
        )
        save_classifier(handle, base_ckpt)
        print(
            f"base accuracy: train {stats['train_accuracy']:.1%}, "
            f"test {stats['test_accuracy']:.1%}"
        )

    extract_train = root / "extract_train"
    extract_test = root / "extract_test"
    cmd_extract(data_root / "train", base_ckpt, extract_train, skip_nonqualifying=True)
    cmd_extract(data_root / "test", base_ckpt, extract_test, skip_nonqualifying=False)

    accum = root / "accumulate"
    cmd_accumulate(extract_train / "records.jsonl", extract_train / "mcsets.jsonl", accum)

    detect = root / "detect"
    cmd_detect(
        extract_test / "records.jsonl",
        extract_test / "mcsets.jsonl",
        extract_train / "records.jsonl",
        extract_train / "mcsets.jsonl",
        accum / "profiles.json",
        detect,
        configs=canonical_table_configs(),
        model_name="desk-cnn",
    )
    print(f"detection summary: {detect / 'summary.csv'}")

    debug_dir = root / "debug"
    cmd_debug(
        data_root,
        base_ckpt,
        accum / "profiles.json",
        debug_dir,
        config=DebugConfig(epochs=args.debug_epochs, seed=args.seed),
        sweep=True,
    )
    print(f"loss-weight sweep: {debug_dir / 'sweep.csv'}")

    debugged_extract = root / "extract_test_debugged"
    cmd_extract(
        data_root / "test",
        debug_dir / "debugged.pt",
        debugged_extract,
        records_only=True,
    )
    report = root / "report"
    sample_images = sorted((data_root / "test").glob("*/*.png"))[:3]
    cmd_report(
        report,
        base_records_path=extract_test / "records.jsonl",
        debugged_records_path=debugged_extract / "records.jsonl",
        dataset_dir=data_root / "test",
        checkpoint=debug_dir / "debugged.pt",
        saliency_images=sample_images,
    )
    print(f"report: {report / 'recall_delta.csv'}")


if __name__ == "__main__":
    main()
