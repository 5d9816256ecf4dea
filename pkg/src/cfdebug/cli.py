"""Command-line entry point.

Subcommands mirror the pipeline phases:

    cfdebug extract    predict a split and extract MC filter sets
    cfdebug accumulate fold MC sets into per-class profiles
    cfdebug detect     flag likely misclassifications, emit summary table
    cfdebug debug      retrain with alignment losses (optionally sweep)
    cfdebug report     recall-delta table and saliency overlays
"""

from __future__ import annotations

import argparse
import logging
import sys

from .cfe import CfeConfig
from .debugging import DebugConfig
from .detection import DetectionConfig, METRICS
from .pipeline import (
    canonical_table_configs,
    cmd_accumulate,
    cmd_debug,
    cmd_detect,
    cmd_extract,
    cmd_report,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfdebug", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="predict a dataset split and extract MC filter sets")
    p.add_argument("--dataset", required=True, help="split directory (class-per-subdirectory)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=float, default=0.90, help="confidence gate for MC extraction")
    p.add_argument("--threshold", type=float, default=0.5, help="activation map threshold t")
    p.add_argument(
        "--no-skip",
        action="store_true",
        help="extract MC sets for every prediction (detection mode)",
    )
    p.add_argument("--records-only", action="store_true", help="skip MC extraction entirely")
    p.add_argument("--sparsity-weight", type=float, default=2.0)
    p.add_argument("--max-iterations", type=int, default=200)
    p.add_argument(
        "--ce-preservation",
        action="store_true",
        help="use cross-entropy preservation instead of the logits loss",
    )

    p = sub.add_parser("accumulate", help="fold MC sets into per-class profiles")
    p.add_argument("--records", required=True)
    p.add_argument("--mcsets", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=float, default=0.90)

    p = sub.add_parser("detect", help="flag likely misclassifications")
    p.add_argument("--records", required=True, help="test-split records")
    p.add_argument("--mcsets", required=True, help="test-split MC sets")
    p.add_argument("--train-records", required=True)
    p.add_argument("--train-mcsets", required=True)
    p.add_argument("--profiles", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metric", default="all", choices=list(METRICS) + ["all"])
    p.add_argument("--skip-threshold", type=float, default=0.90)
    p.add_argument("--freq-threshold", type=float, default=0.15)
    p.add_argument("--recall-floor", type=float, default=0.3)
    p.add_argument("--local-source", default="mc", choices=["mc", "activation_map"])
    p.add_argument(
        "--global-mean",
        action="store_true",
        help="one overall training-mean threshold instead of per-class means",
    )
    p.add_argument("--model-name", default="model")

    p = sub.add_parser("debug", help="retrain with alignment losses")
    p.add_argument("--dataset", required=True, help="dataset root containing train/ and test/")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--profiles", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lambda1", type=float, default=0.001)
    p.add_argument("--lambda2", type=float, default=0.00005)
    p.add_argument("--tau", type=float, default=0.90)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--freq-threshold", type=float, default=0.15)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hard-activation", action="store_true")
    p.add_argument("--sweep", action="store_true", help="run the loss-weight grid")

    p = sub.add_parser("report", help="recall deltas and saliency overlays")
    p.add_argument("--out", required=True)
    p.add_argument("--base-records")
    p.add_argument("--debugged-records")
    p.add_argument("--dataset", help="split directory, used for class names")
    p.add_argument("--checkpoint", help="classifier for saliency overlays")
    p.add_argument("--image", action="append", default=[], help="image for a saliency overlay")
    p.add_argument("--class-index", type=int, default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)

    if args.command == "extract":
        cfe = CfeConfig(
            sparsity_weight=args.sparsity_weight,
            logits_loss_enabled=not args.ce_preservation,
            max_iterations=args.max_iterations,
        )
        manifest = cmd_extract(
            args.dataset,
            args.checkpoint,
            args.out,
            tau=args.tau,
            skip_nonqualifying=not args.no_skip,
            records_only=args.records_only,
            cfe_config=cfe,
            activation_threshold=args.threshold,
        )
    elif args.command == "accumulate":
        manifest = cmd_accumulate(args.records, args.mcsets, args.out, tau=args.tau)
    elif args.command == "detect":
        if args.metric == "all":
            configs = canonical_table_configs(args.local_source)
        else:
            configs = [
                DetectionConfig(
                    skip_threshold=args.skip_threshold,
                    freq_threshold=args.freq_threshold,
                    metric=args.metric,
                    recall_floor_value=args.recall_floor,
                    local_source=args.local_source,
                    per_class_thresholds=not args.global_mean,
                )
            ]
        manifest = cmd_detect(
            args.records,
            args.mcsets,
            args.train_records,
            args.train_mcsets,
            args.profiles,
            args.out,
            configs=configs,
            model_name=args.model_name,
        )
    elif args.command == "debug":
        config = DebugConfig(
            lambda1=args.lambda1,
            lambda2=args.lambda2,
            tau=args.tau,
            activation_threshold=args.threshold,
            epochs=args.epochs,
            batch_size=args.batch_size,
            learning_rate=args.lr,
            seed=args.seed,
            soft_activation=not args.hard_activation,
        )
        manifest = cmd_debug(
            args.dataset,
            args.checkpoint,
            args.profiles,
            args.out,
            config=config,
            freq_threshold=args.freq_threshold,
            sweep=args.sweep,
        )
    elif args.command == "report":
        manifest = cmd_report(
            args.out,
            base_records_path=args.base_records,
            debugged_records_path=args.debugged_records,
            dataset_dir=args.dataset,
            checkpoint=args.checkpoint,
            saliency_images=args.image,
            saliency_class=args.class_index,
        )
    else:  # pragma: no cover - argparse enforces choices
        raise SystemExit(2)

    print(f"wrote {len(manifest.outputs)} artifacts to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
