"""Minimal base-classifier bootstrap for desk-scale experiments."""

from __future__ import annotations

import torch

from .data import ImageSplit
from .debugging import evaluate_accuracy, loss_ce, _epoch_batches
from .exceptions import NumericError
from .model import ClassifierHandle, MaskableCNN


def fresh_classifier(
    label_count: int,
    filter_count: int = 64,
    widths: tuple[int, ...] = (32, 64),
    image_size: int = 32,
    seed: int = 0,
) -> ClassifierHandle:
    torch.manual_seed(seed)
    net = MaskableCNN(
        label_count=label_count,
        filter_count=filter_count,
        widths=widths,
        image_size=image_size,
    )
    return ClassifierHandle(net)


def train_base_classifier(
    train: ImageSplit,
    test: ImageSplit,
    filter_count: int = 64,
    widths: tuple[int, ...] = (32, 64),
    epochs: int = 60,
    learning_rate: float = 1.5e-3,
    polish_epochs: int = 20,
    polish_lr: float = 1e-4,
    batch_size: int = 64,
    seed: int = 0,
) -> tuple[ClassifierHandle, dict]:
    """Train a fresh classifier with plain cross-entropy to (near-)convergence.

    Two stages (main rate, then a low-rate polish) and deliberately keeps the
    final-epoch weights: the interesting regime for filter debugging is a
    confidently overfit base model with a train/test accuracy gap, not the
    best-generalizing checkpoint.
    """
    handle = fresh_classifier(
        label_count=len(train.class_names),
        filter_count=filter_count,
        widths=widths,
        image_size=train.x.shape[-1],
        seed=seed,
    )
    net = handle.net
    generator = torch.Generator().manual_seed(seed)
    for stage_lr, stage_epochs in [(learning_rate, epochs), (polish_lr, polish_epochs)]:
        if stage_epochs < 1:
            continue
        optimizer = torch.optim.Adam(net.parameters(), lr=stage_lr)
        for epoch in range(stage_epochs):
            net.train()
            for idx in _epoch_batches(len(train.x), batch_size, generator):
                if len(idx) < 2:
                    continue
                optimizer.zero_grad()
                ce = loss_ce(torch.softmax(net(train.x[idx]), dim=1), train.y[idx])
                if not torch.isfinite(ce):
                    raise NumericError(f"base training diverged at epoch {epoch}")
                ce.backward()
                optimizer.step()
    net.eval()
    stats = {
        "train_accuracy": evaluate_accuracy(net, train.x, train.y),
        "test_accuracy": evaluate_accuracy(net, test.x, test.y),
        "epochs": epochs + polish_epochs,
        "seed": seed,
    }
    return handle, stats
