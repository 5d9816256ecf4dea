"""Shared fixtures.

The desk-scale fixtures (dataset, trained base classifier, extracted
artifacts) are expensive and session-scoped. Set CFDEBUG_TEST_CACHE=1 to keep
them under /tmp between runs while iterating locally; CI and clean runs build
them fresh in the session tmp directory.
"""

from __future__ import annotations

import os
import shutil
from pathlib import Path

import pytest
import torch

from cfdebug.bootstrap import train_base_classifier
from cfdebug.data import generate_dataset, load_split
from cfdebug.model import ClassifierHandle, MaskableCNN, load_classifier, save_classifier
from cfdebug.pipeline import cmd_accumulate, cmd_extract

PER_CLASS_TRAIN = 120
PER_CLASS_TEST = 40
BASE_SEED = 0


@pytest.fixture(scope="session")
def desk_root(tmp_path_factory) -> Path:
    """Dataset + trained base checkpoint, the shared desk-scale testbed."""
    if os.environ.get("CFDEBUG_TEST_CACHE"):
        root = Path("/tmp/cfdebug-test-cache")
        if (root / "base.pt").exists():
            return root
        shutil.rmtree(root, ignore_errors=True)
    else:
        root = tmp_path_factory.mktemp("desk")
    data_root = root / "dataset"
    generate_dataset(
        data_root,
        per_class_train=PER_CLASS_TRAIN,
        per_class_test=PER_CLASS_TEST,
        seed=BASE_SEED,
    )
    train = load_split(data_root / "train")
    test = load_split(data_root / "test")
    handle, stats = train_base_classifier(train, test, seed=BASE_SEED)
    save_classifier(handle, root / "base.pt")
    (root / "base_stats.txt").write_text(repr(stats) + "\n")
    return root


@pytest.fixture(scope="session")
def desk_splits(desk_root):
    return load_split(desk_root / "dataset" / "train"), load_split(desk_root / "dataset" / "test")


@pytest.fixture(scope="session")
def desk_handle(desk_root) -> ClassifierHandle:
    return load_classifier(desk_root / "base.pt")


@pytest.fixture(scope="session")
def desk_artifacts(desk_root) -> dict:
    """Extraction + accumulation artifacts for the base classifier."""
    paths = {
        "dataset": desk_root / "dataset",
        "checkpoint": desk_root / "base.pt",
        "train_dir": desk_root / "extract_train",
        "test_dir": desk_root / "extract_test",
        "accum_dir": desk_root / "accumulate",
    }
    if not (paths["accum_dir"] / "profiles.json").exists():
        cmd_extract(
            paths["dataset"] / "train",
            paths["checkpoint"],
            paths["train_dir"],
            skip_nonqualifying=True,
        )
        cmd_extract(
            paths["dataset"] / "test",
            paths["checkpoint"],
            paths["test_dir"],
            skip_nonqualifying=False,
        )
        cmd_accumulate(
            paths["train_dir"] / "records.jsonl",
            paths["train_dir"] / "mcsets.jsonl",
            paths["accum_dir"],
        )
    paths["train_records"] = paths["train_dir"] / "records.jsonl"
    paths["train_mcsets"] = paths["train_dir"] / "mcsets.jsonl"
    paths["test_records"] = paths["test_dir"] / "records.jsonl"
    paths["test_mcsets"] = paths["test_dir"] / "mcsets.jsonl"
    paths["profiles"] = paths["accum_dir"] / "profiles.json"
    return paths


def make_tiny_handle(seed: int, label_count: int = 4, filter_count: int = 8) -> ClassifierHandle:
    """Random-weight tiny classifier (8x8 inputs) for oracle-scale tests."""
    torch.manual_seed(seed)
    net = MaskableCNN(
        label_count=label_count, filter_count=filter_count, widths=(8,), image_size=8
    )
    return ClassifierHandle(net)


def tiny_image(seed: int) -> torch.Tensor:
    return torch.rand(3, 8, 8, generator=torch.Generator().manual_seed(seed))


def make_trained_tiny_handle(seed: int, label_count: int = 4, filter_count: int = 8):
    """Tiny classifier trained on a blob-position task; returns (handle, x, y).

    Trained instances give non-degenerate minimum filter sets, unlike random
    weights where the head bias alone often fixes the argmax.
    """
    import torch.nn.functional as F

    torch.manual_seed(seed)
    net = MaskableCNN(
        label_count=label_count, filter_count=filter_count, widths=(8,), image_size=8
    )
    g = torch.Generator().manual_seed(seed + 9000)
    centers = [(2, 2), (2, 5), (5, 2), (5, 5)]
    xs, ys = [], []
    for c in range(label_count):
        for _ in range(40):
            img = 0.2 * torch.rand(3, 8, 8, generator=g)
            cy, cx = centers[c % len(centers)]
            img[:, cy - 1 : cy + 2, cx - 1 : cx + 2] += 0.2 + 0.8 * torch.rand(
                3, 1, 1, generator=g
            )
            xs.append(img.clamp(0, 1))
            ys.append(c)
    x, y = torch.stack(xs), torch.tensor(ys)
    optimizer = torch.optim.Adam(net.parameters(), lr=3e-3)
    net.train()
    for epoch in range(30):
        perm = torch.randperm(len(x), generator=torch.Generator().manual_seed(seed * 97 + epoch))
        for start in range(0, len(x), 32):
            idx = perm[start : start + 32]
            optimizer.zero_grad()
            F.cross_entropy(net(x[idx]), y[idx]).backward()
            optimizer.step()
    net.eval()
    return ClassifierHandle(net), x, y
