"""Generate the desk-scale shape dataset and train the base classifier.

Usage:
    python scripts/bootstrap_dataset.py --root runs/desk --seed 0
"""

from __future__ import annotations

import argparse
from pathlib import Path

from cfdebug.bootstrap import train_base_classifier
from cfdebug.data import generate_dataset, load_split
from cfdebug.model import save_classifier


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--root", default="runs/desk", help="output root directory")
    parser.add_argument("--per-class-train", type=int, default=300)
    parser.add_argument("--per-class-test", type=int, default=100)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--epochs", type=int, default=60)
    parser.add_argument("--polish-epochs", type=int, default=20)
    parser.add_argument("--lr", type=float, default=1.5e-3)
    parser.add_argument("--filter-count", type=int, default=64)
    args = parser.parse_args()

    root = Path(args.root)
    data_root = root / "dataset"
    generate_dataset(
        data_root,
        per_class_train=args.per_class_train,
        per_class_test=args.per_class_test,
        seed=args.seed,
    )
    train = load_split(data_root / "train")
    test = load_split(data_root / "test")
    handle, stats = train_base_classifier(
        train,
        test,
        filter_count=args.filter_count,
        epochs=args.epochs,
        learning_rate=args.lr,
        polish_epochs=args.polish_epochs,
        seed=args.seed,
    )
    ckpt = root / "base.pt"
    save_classifier(handle, ckpt)
    print(f"dataset: {data_root}")
    print(f"checkpoint: {ckpt}")
    print(
        f"base accuracy: train {stats['train_accuracy']:.1%}, "
        f"test {stats['test_accuracy']:.1%}"
    )


if __name__ == "__main__":
    main()
