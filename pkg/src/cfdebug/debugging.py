"""Classifier retraining with filter-alignment losses.

The combined objective is

    L_d = L_ce + lambda1 * L_mc + lambda2 * L_nonmc

where L_mc = -sum_k |bits_k * f_k| rewards activating the true class's global
filter set and L_nonmc = sum_k |(1 - bits_k) * f_k| penalizes activating the
rest. L_mc carries its own negative sign, so adding it weighted by lambda1
maximizes agreement. During training f is the soft sigmoid of the pooled
features (the hard thresholded map has zero gradient and is kept for
evaluation only).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .detection import agreement_recall
from .exceptions import NumericError, UsageError
from .model import ClassifierHandle, MaskableCNN
from .profiles import GlobalFilterSet

CE_EPS = 1e-7

DEFAULT_LAMBDA_GRID: tuple[tuple[float, float], ...] = (
    (0.0001, 0.00001),
    (0.0002, 0.00002),
    (0.0005, 0.00002),
    (0.0005, 0.00005),
    (0.001, 0.00002),
    (0.002, 0.00002),
    (0.001, 0.00005),
    (0.001, 0.0001),
)


@dataclass
class DebugConfig:
    lambda1: float = 0.001
    lambda2: float = 0.00005
    tau: float = 0.90
    activation_threshold: float = 0.5
    epochs: int = 5
    batch_size: int = 64
    learning_rate: float = 1e-4
    seed: int = 0
    soft_activation: bool = True
    # Training images sampled for the before/after MC-agreement measurement
    # (0 skips the measurement; it re-extracts MC sets, which is not free).
    agreement_sample: int = 150

    def __post_init__(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise UsageError("loss weights must be >= 0")
        if not 0.0 <= self.tau <= 1.0:
            raise UsageError("tau must lie in [0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise UsageError("epochs and batch_size must be >= 1")
        if self.agreement_sample < 0:
            raise UsageError("agreement_sample must be >= 0")


@dataclass
class TrainingOutcome:
    final_train_accuracy: float
    final_test_accuracy: float
    epoch_ce: list[float] = field(default_factory=list)
    epoch_mc: list[float] = field(default_factory=list)
    epoch_nonmc: list[float] = field(default_factory=list)
    epoch_test_accuracy: list[float] = field(default_factory=list)
    mc_agreement_before: float = 0.0
    mc_agreement_after: float = 0.0
    best_epoch: int = 0

    def to_dict(self) -> dict:
        return {
            "final_train_accuracy": self.final_train_accuracy,
            "final_test_accuracy": self.final_test_accuracy,
            "epoch_ce": self.epoch_ce,
            "epoch_mc": self.epoch_mc,
            "epoch_nonmc": self.epoch_nonmc,
            "epoch_test_accuracy": self.epoch_test_accuracy,
            "mc_agreement_before": self.mc_agreement_before,
            "mc_agreement_after": self.mc_agreement_after,
            "best_epoch": self.best_epoch,
        }


def _bits_tensor(global_set: GlobalFilterSet | np.ndarray | torch.Tensor) -> torch.Tensor:
    if isinstance(global_set, GlobalFilterSet):
        bits = global_set.bits
    else:
        bits = global_set
    return torch.as_tensor(np.asarray(bits), dtype=torch.float32)


def loss_mc(global_set, activations) -> torch.Tensor:
    """Agreement reward: -sum_k |bits_k * f_k|, averaged over any batch dims."""
    bits = _bits_tensor(global_set)
    f = torch.as_tensor(activations, dtype=bits.dtype) if not torch.is_tensor(activations) else activations
    if bits.shape[-1] != f.shape[-1]:
        raise UsageError(f"length mismatch: bits {bits.shape[-1]} vs activations {f.shape[-1]}")
    per_image = -(bits * f).abs().sum(dim=-1)
    return per_image.mean()


def loss_nonmc(global_set, activations) -> torch.Tensor:
    """Leakage penalty: sum_k |(1 - bits_k) * f_k|, averaged over batch dims."""
    bits = _bits_tensor(global_set)
    f = torch.as_tensor(activations, dtype=bits.dtype) if not torch.is_tensor(activations) else activations
    if bits.shape[-1] != f.shape[-1]:
        raise UsageError(f"length mismatch: bits {bits.shape[-1]} vs activations {f.shape[-1]}")
    per_image = ((1.0 - bits) * f).abs().sum(dim=-1)
    return per_image.mean()


def loss_ce(probabilities, labels) -> torch.Tensor:
    """Mean categorical cross-entropy on probabilities clamped to (0, 1)."""
    p = probabilities if torch.is_tensor(probabilities) else torch.as_tensor(probabilities)
    y = labels if torch.is_tensor(labels) else torch.as_tensor(labels)
    p = p.clamp(CE_EPS, 1.0 - CE_EPS)
    picked = p[torch.arange(p.shape[0]), y]
    return -picked.log().mean()


def loss_d(ce, mc, nonmc, lambda1: float, lambda2: float):
    """Combined objective; mc is already non-positive, so adding rewards it."""
    return ce + lambda1 * mc + lambda2 * nonmc


def soft_activation_map(gap: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(gap)


def hard_activation_map(gap: torch.Tensor, threshold: float) -> torch.Tensor:
    return (torch.sigmoid(gap) > threshold).to(gap.dtype)


def evaluate_accuracy(net: MaskableCNN, x: torch.Tensor, y: torch.Tensor, chunk: int = 512) -> float:
    net.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, len(x), chunk):
            logits = net(x[start : start + chunk]).numpy()
            preds = np.argmax(logits, axis=1)
            correct += int((preds == y[start : start + chunk].numpy()).sum())
    return correct / len(x)


def mean_activation_agreement(
    net: MaskableCNN,
    x: torch.Tensor,
    y: torch.Tensor,
    global_sets: dict[int, GlobalFilterSet],
    activation_threshold: float = 0.5,
    chunk: int = 512,
) -> float:
    """Mean agreement recall of hard activation maps vs true-class sets."""
    net.eval()
    scores = []
    with torch.no_grad():
        for start in range(0, len(x), chunk):
            _, gap, _ = net.forward_parts(x[start : start + chunk])
            bits = (torch.sigmoid(gap) > activation_threshold).numpy().astype(np.uint8)
            labels = y[start : start + chunk].numpy()
            for i in range(len(labels)):
                global_set = global_sets.get(int(labels[i]))
                if global_set is None:
                    raise UsageError(f"no global filter set for class {int(labels[i])}")
                scores.append(agreement_recall(bits[i], global_set))
    return float(np.mean(scores))


def mean_mc_agreement(
    handle: ClassifierHandle,
    x: torch.Tensor,
    y: torch.Tensor,
    global_sets: dict[int, GlobalFilterSet],
    sample: int = 0,
) -> float:
    """Mean agreement recall of per-prediction MC sets vs true-class sets.

    Extracts an MC set per image, so with ``sample > 0`` only an evenly
    strided (deterministic, class-balanced for class-ordered data) subset is
    measured.
    """
    from .cfe import identify_mc_filters

    if sample and sample < len(x):
        indices = np.linspace(0, len(x) - 1, sample).astype(int)
    else:
        indices = np.arange(len(x))
    scores = []
    for i in indices:
        i = int(i)
        global_set = global_sets.get(int(y[i]))
        if global_set is None:
            raise UsageError(f"no global filter set for class {int(y[i])}")
        record = handle.predict(x[i])
        mc = identify_mc_filters(handle, x[i], record.inferred_class)
        scores.append(agreement_recall(mc.to_bits(), global_set))
    return float(np.mean(scores))


def _epoch_batches(n: int, batch_size: int, generator: torch.Generator):
    perm = torch.randperm(n, generator=generator)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def fine_tune(
    handle: ClassifierHandle,
    train_x: torch.Tensor,
    train_y: torch.Tensor,
    test_x: torch.Tensor,
    test_y: torch.Tensor,
    config: DebugConfig,
) -> tuple[TrainingOutcome, ClassifierHandle]:
    """Plain cross-entropy retraining: the control arm for debug_train."""
    net = copy.deepcopy(handle.net)
    generator = torch.Generator().manual_seed(config.seed)
    optimizer = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    outcome = TrainingOutcome(0.0, 0.0)
    best_acc, best_state = -1.0, None
    for epoch in range(config.epochs):
        net.train()
        ce_sum, seen = 0.0, 0
        for idx in _epoch_batches(len(train_x), config.batch_size, generator):
            if len(idx) < 2:  # BatchNorm needs >1 sample in train mode
                continue
            optimizer.zero_grad()
            logits = net(train_x[idx])
            ce = loss_ce(torch.softmax(logits, dim=1), train_y[idx])
            if not torch.isfinite(ce):
                raise NumericError(f"training diverged at epoch {epoch}: ce={float(ce)}")
            ce.backward()
            optimizer.step()
            ce_sum += float(ce.detach()) * len(idx)
            seen += len(idx)
        outcome.epoch_ce.append(ce_sum / seen)
        outcome.epoch_mc.append(0.0)
        outcome.epoch_nonmc.append(0.0)
        test_acc = evaluate_accuracy(net, test_x, test_y)
        outcome.epoch_test_accuracy.append(test_acc)
        if test_acc > best_acc:
            best_acc, best_state = test_acc, copy.deepcopy(net.state_dict())
            outcome.best_epoch = epoch
    net.load_state_dict(best_state)
    outcome.final_train_accuracy = evaluate_accuracy(net, train_x, train_y)
    outcome.final_test_accuracy = evaluate_accuracy(net, test_x, test_y)
    return outcome, ClassifierHandle(net, handle.activation_threshold)


def debug_train(
    handle: ClassifierHandle,
    train_x: torch.Tensor,
    train_y: torch.Tensor,
    test_x: torch.Tensor,
    test_y: torch.Tensor,
    global_sets: dict[int, GlobalFilterSet],
    config: DebugConfig,
) -> tuple[TrainingOutcome, ClassifierHandle]:
    """Retrain with the combined objective, pairing each image with the global
    filter set of its true class.

    All training images participate (no confidence gate here). Global sets are
    frozen for the whole run. With both loss weights at zero the aux terms are
    skipped entirely and the loop performs the plain fine-tune protocol. The
    best-test-accuracy epoch's weights are returned.
    """
    present = sorted(set(int(c) for c in train_y.numpy()))
    missing = [c for c in present if c not in global_sets]
    if missing:
        raise UsageError(f"missing global filter sets for classes {missing}")

    n_filters = handle.filter_count
    bits_matrix = torch.zeros(handle.label_count, n_filters)
    for label, global_set in global_sets.items():
        bits_matrix[label] = _bits_tensor(global_set)

    use_aux = config.lambda1 != 0.0 or config.lambda2 != 0.0
    net = copy.deepcopy(handle.net)
    generator = torch.Generator().manual_seed(config.seed)
    optimizer = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    outcome = TrainingOutcome(0.0, 0.0)
    if config.agreement_sample:
        outcome.mc_agreement_before = mean_mc_agreement(
            handle, train_x, train_y, global_sets, config.agreement_sample
        )
    best_acc, best_state = -1.0, None
    for epoch in range(config.epochs):
        net.train()
        sums = {"ce": 0.0, "mc": 0.0, "nonmc": 0.0}
        seen = 0
        for idx in _epoch_batches(len(train_x), config.batch_size, generator):
            if len(idx) < 2:  # BatchNorm needs >1 sample in train mode
                continue
            optimizer.zero_grad()
            logits, gap, _ = net.forward_parts(train_x[idx])
            labels = train_y[idx]
            ce = loss_ce(torch.softmax(logits, dim=1), labels)
            if use_aux:
                if config.soft_activation:
                    f = soft_activation_map(gap)
                else:
                    f = hard_activation_map(gap, config.activation_threshold)
                bits = bits_matrix[labels]
                mc = loss_mc(bits, f)
                nonmc = loss_nonmc(bits, f)
                total = loss_d(ce, mc, nonmc, config.lambda1, config.lambda2)
            else:
                mc = nonmc = torch.tensor(0.0)
                total = ce
            if not torch.isfinite(total):
                raise NumericError(
                    f"training diverged at epoch {epoch}: "
                    f"ce={float(ce)}, mc={float(mc)}, nonmc={float(nonmc)}"
                )
            total.backward()
            optimizer.step()
            sums["ce"] += float(ce.detach()) * len(idx)
            sums["mc"] += float(mc.detach()) * len(idx)
            sums["nonmc"] += float(nonmc.detach()) * len(idx)
            seen += len(idx)
        outcome.epoch_ce.append(sums["ce"] / seen)
        outcome.epoch_mc.append(sums["mc"] / seen)
        outcome.epoch_nonmc.append(sums["nonmc"] / seen)
        test_acc = evaluate_accuracy(net, test_x, test_y)
        outcome.epoch_test_accuracy.append(test_acc)
        if test_acc > best_acc:
            best_acc, best_state = test_acc, copy.deepcopy(net.state_dict())
            outcome.best_epoch = epoch
    net.load_state_dict(best_state)
    outcome.final_train_accuracy = evaluate_accuracy(net, train_x, train_y)
    outcome.final_test_accuracy = evaluate_accuracy(net, test_x, test_y)
    debugged = ClassifierHandle(net, handle.activation_threshold)
    if config.agreement_sample:
        outcome.mc_agreement_after = mean_mc_agreement(
            debugged, train_x, train_y, global_sets, config.agreement_sample
        )
    return outcome, debugged


@dataclass
class SweepRow:
    model: str
    lambda1: float | None
    lambda2: float | None
    train_accuracy: float
    test_accuracy: float
    mc_agreement: float | None = None

    def csv_row(self) -> list[str]:
        fmt = lambda v: "-" if v is None else f"{v:g}"
        return [
            self.model,
            fmt(self.lambda1),
            fmt(self.lambda2),
            f"{self.train_accuracy * 100:.2f}",
            f"{self.test_accuracy * 100:.2f}",
        ]


def lambda_sweep(
    handle: ClassifierHandle,
    train_x: torch.Tensor,
    train_y: torch.Tensor,
    test_x: torch.Tensor,
    test_y: torch.Tensor,
    global_sets: dict[int, GlobalFilterSet],
    config: DebugConfig,
    grid: tuple[tuple[float, float], ...] = DEFAULT_LAMBDA_GRID,
) -> tuple[list[SweepRow], ClassifierHandle, TrainingOutcome]:
    """Grid over (lambda1, lambda2), plus base and fine-tuned reference rows.

    Every arm starts from the same base weights and seed. Returns the rows,
    the debugged classifier of the best test-accuracy grid point, and its
    outcome.
    """
    rows = [
        SweepRow(
            "base",
            None,
            None,
            evaluate_accuracy(handle.net, train_x, train_y),
            evaluate_accuracy(handle.net, test_x, test_y),
        )
    ]
    ft_outcome, _ = fine_tune(handle, train_x, train_y, test_x, test_y, config)
    rows.append(
        SweepRow(
            "fine-tuned",
            None,
            None,
            ft_outcome.final_train_accuracy,
            ft_outcome.final_test_accuracy,
        )
    )
    best: tuple[float, ClassifierHandle, TrainingOutcome] | None = None
    for lambda1, lambda2 in grid:
        arm_config = replace(config, lambda1=lambda1, lambda2=lambda2)
        outcome, debugged = debug_train(
            handle, train_x, train_y, test_x, test_y, global_sets, arm_config
        )
        rows.append(
            SweepRow(
                "debugged",
                lambda1,
                lambda2,
                outcome.final_train_accuracy,
                outcome.final_test_accuracy,
                mc_agreement=outcome.mc_agreement_after,
            )
        )
        if best is None or outcome.final_test_accuracy > best[0]:
            best = (outcome.final_test_accuracy, debugged, outcome)
    assert best is not None
    return rows, best[1], best[2]


SWEEP_HEADER = [
    "Model",
    "MC filters weight",
    "Non-MC filters weight",
    "Train acc. (%)",
    "Test acc. (%)",
]


def write_sweep_csv(rows: list[SweepRow], path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_HEADER)
        for row in rows:
            writer.writerow(row.csv_row())
