"""Counterfactual filter debugging for CNN image classifiers.

Extracts the minimum-correct filter sets behind individual predictions,
aggregates them into per-class activation profiles, flags likely
misclassifications on unseen inputs by filter-agreement scoring, and retrains
the classifier with alignment losses that favor class-relevant filters.
"""

from .cfe import CfeConfig, MCFilterSet, brute_force_mc_oracle, identify_mc_filters
from .debugging import (
    DebugConfig,
    TrainingOutcome,
    debug_train,
    fine_tune,
    lambda_sweep,
    loss_ce,
    loss_d,
    loss_mc,
    loss_nonmc,
)
from .detection import (
    DetectionConfig,
    DetectionResult,
    agreement_f1,
    agreement_recall,
    calibrate_class_thresholds,
    detection_report,
    flag,
)
from .model import (
    ClassifierHandle,
    MaskableCNN,
    PredictionRecord,
    binary_activation_map,
    load_classifier,
    save_classifier,
)
from .profiles import (
    ClassFilterProfile,
    GlobalFilterSet,
    accumulate,
    derive_global_set,
    load_profiles,
    merge,
    save_profiles,
)

__all__ = [
    "CfeConfig",
    "ClassFilterProfile",
    "ClassifierHandle",
    "DebugConfig",
    "DetectionConfig",
    "DetectionResult",
    "GlobalFilterSet",
    "MCFilterSet",
    "MaskableCNN",
    "PredictionRecord",
    "TrainingOutcome",
    "accumulate",
    "agreement_f1",
    "agreement_recall",
    "binary_activation_map",
    "brute_force_mc_oracle",
    "calibrate_class_thresholds",
    "debug_train",
    "derive_global_set",
    "detection_report",
    "fine_tune",
    "flag",
    "identify_mc_filters",
    "lambda_sweep",
    "load_classifier",
    "load_profiles",
    "loss_ce",
    "loss_d",
    "loss_mc",
    "loss_nonmc",
    "merge",
    "save_classifier",
    "save_profiles",
]
