"""Attention-based multi-instance learning and the perturbations that fool it.

The package trains compact attention-pooled bag classifiers, crafts per-bag
(customized) and dataset-wide (universal) additive perturbations against
them, measures fooling rates and accuracy decreases, and evaluates a simple
adversarial-training defence.
"""

from .attack import (
    AttackConfig,
    AttackReport,
    BagOutcome,
    CapResult,
    Perturbation,
    aggregate_gradient,
    baseline_perturbation,
    deepfool_step,
    fooling_rate,
    load_perturbation,
    mi_cap,
    mi_cap_dataset,
    mi_uap,
    project,
    save_perturbation,
    save_report,
)
from .data import (
    Bag,
    BagDataset,
    FormatError,
    GenerationConfig,
    NormalizationStats,
    apply_perturbation,
    bag_label_from_instances,
    build_image_bags,
    generate_synthetic_dataset,
    load_bags,
    load_idx_images,
    normalize,
    save_bags,
    save_idx_images,
)
from .evaluate import (
    AttentionSummary,
    DefenceRow,
    MetricRow,
    TransferMatrix,
    accuracy,
    adversarial_augment,
    attention_summary,
    decrease,
    defence_curve,
    recall,
    transfer_matrix,
    write_defence_csv,
    write_histogram_csv,
    write_kde_csv,
    write_metric_rows,
    write_transfer_csv,
    xi_sweep,
)
from .model import (
    AttentionMILModel,
    ForwardTrace,
    attention_argmax,
    collect_attention,
    init_model,
    load_model,
    save_model,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "AttackReport",
    "AttentionMILModel",
    "AttentionSummary",
    "Bag",
    "BagDataset",
    "BagOutcome",
    "CapResult",
    "ForwardTrace",
    "FormatError",
    "GenerationConfig",
    "MetricRow",
    "NormalizationStats",
    "Perturbation",
    "TransferMatrix",
    "accuracy",
    "adversarial_augment",
    "aggregate_gradient",
    "apply_perturbation",
    "attention_argmax",
    "attention_summary",
    "bag_label_from_instances",
    "baseline_perturbation",
    "build_image_bags",
    "collect_attention",
    "decrease",
    "deepfool_step",
    "defence_curve",
    "DefenceRow",
    "fooling_rate",
    "generate_synthetic_dataset",
    "init_model",
    "load_bags",
    "load_idx_images",
    "load_model",
    "load_perturbation",
    "mi_cap",
    "mi_cap_dataset",
    "mi_uap",
    "normalize",
    "project",
    "recall",
    "save_bags",
    "save_idx_images",
    "save_model",
    "save_perturbation",
    "save_report",
    "train",
    "transfer_matrix",
    "write_defence_csv",
    "write_histogram_csv",
    "write_kde_csv",
    "write_metric_rows",
    "write_transfer_csv",
    "xi_sweep",
]
