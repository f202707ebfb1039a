"""Metrics, magnitude sweeps, cross-model transfer, and adversarial training.

Evaluations are read-only over immutable models and datasets. A perturbation
argument may be a single vector (applied to every bag), a mapping from bag id
to per-bag vectors (customized attacks), or None for clean metrics.
"""

from __future__ import annotations

import csv
import json
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, replace

import numpy as np

from .attack import AttackConfig, baseline_perturbation, mi_cap, mi_cap_dataset, mi_uap
from .data import Bag, BagDataset
from .model import init_model, train
from .seeding import substream

METRIC_HEADER = ["dataset", "model", "perturbation", "xi", "mode", "acc", "recall", "decrease", "fooling_rate", "seed"]


@dataclass(frozen=True)
class MetricRow:
    """One evaluation: a (dataset, model, perturbation) triple and its metrics."""

    dataset_id: str
    model_id: str
    perturbation_id: str
    xi: float
    mode: str
    acc: float
    recall: float
    decrease: float
    fooling_rate: float
    seed: int


@dataclass(frozen=True)
class TransferMatrix:
    """Decrease of each target model (columns) under each source model's universal perturbation (rows)."""

    source_ids: tuple[str, ...]
    target_ids: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True)
        if values.shape != (len(self.source_ids), len(self.target_ids)):
            raise ValueError("values shape does not match source/target ids")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class AttentionSummary:
    """Plot-ready histogram and Gaussian KDE of attention values."""

    bin_centers: np.ndarray
    counts: np.ndarray
    kde_x: np.ndarray
    kde_density: np.ndarray
    bandwidth: float


def _bag_epsilon(bag: Bag, perturbation):
    if isinstance(perturbation, Mapping):
        perturbation = perturbation.get(bag.id)
        if perturbation is None:
            return None
    eps = np.asarray(getattr(perturbation, "epsilon", perturbation), dtype=np.float64)
    if eps.ndim == 1 and eps.shape != (bag.dimension,):
        raise ValueError(f"perturbation shape {eps.shape} does not match bag dimension {bag.dimension}")
    return eps


def _predictions(model, dataset: BagDataset, perturbation=None):
    """Labels, clean predictions, and perturbed predictions as int arrays."""
    labels, clean, perturbed = [], [], []
    for bag in dataset.bags:
        clean_pred = model.forward(bag.instances).predicted
        if perturbation is None:
            pert_pred = clean_pred
        else:
            eps = _bag_epsilon(bag, perturbation)
            pert_pred = clean_pred if eps is None else model.forward(bag.instances + eps).predicted
        labels.append(bag.label)
        clean.append(clean_pred)
        perturbed.append(pert_pred)
    return np.array(labels), np.array(clean), np.array(perturbed)


def accuracy(model, dataset: BagDataset) -> float:
    """Fraction of bags whose label the model predicts."""
    labels, clean, _ = _predictions(model, dataset)
    return float((labels == clean).mean())


def recall(model, dataset: BagDataset) -> float:
    """True-positive rate over positive bags."""
    labels, clean, _ = _predictions(model, dataset)
    positives = labels == 1
    if not positives.any():
        raise ValueError("recall needs at least one positive bag")
    return float((clean[positives] == 1).mean())


def decrease(model, dataset: BagDataset, perturbation) -> float:
    """Clean accuracy minus accuracy after adding the perturbation."""
    labels, clean, perturbed = _predictions(model, dataset, perturbation)
    return float((labels == clean).mean() - (labels == perturbed).mean())


def _perturbed_metrics(labels, clean, perturbed) -> tuple[float, float, float, float]:
    """(acc, recall, decrease, fooling_rate) of the perturbed predictions."""
    acc = float((labels == perturbed).mean())
    positives = labels == 1
    rec = float((perturbed[positives] == 1).mean()) if positives.any() else math.nan
    dec = float((labels == clean).mean()) - acc
    correct = labels == clean
    fr = float((perturbed[correct] != clean[correct]).mean()) if correct.any() else 0.0
    return acc, rec, dec, fr


def _generate(model, dataset: BagDataset, algorithm: str, mode: str, xi: float, config: AttackConfig):
    cfg = replace(config, xi=xi, mode=mode)
    if algorithm == "cap":
        return mi_cap_dataset(model, dataset, cfg)[0]
    if algorithm == "uap":
        return mi_uap(model, dataset, cfg)[0]
    if algorithm in ("random", "mean"):
        return baseline_perturbation(algorithm, dataset.dimension, xi, config.seed)
    raise ValueError(f"unknown algorithm {algorithm!r}")


def xi_sweep(
    model,
    dataset: BagDataset,
    algorithm: str,
    mode: str,
    xis: Sequence[float],
    config: AttackConfig | None = None,
    dataset_id: str = "dataset",
    model_id: str = "model",
) -> list[MetricRow]:
    """Metrics across a grid of perturbation magnitudes.

    ``xis`` must be sorted ascending; a leading 0 denotes the clean baseline
    row, which reproduces the clean metrics exactly (no perturbation is
    generated or applied for it).
    """
    xis = [float(v) for v in xis]
    if sorted(xis) != xis:
        raise ValueError("xis must be sorted ascending")
    if any(v < 0 for v in xis):
        raise ValueError("xi values must be non-negative")
    config = config or AttackConfig()
    rows = []
    for xi in xis:
        if xi == 0.0:
            labels, clean, perturbed = _predictions(model, dataset)
            pert_id = "none"
        else:
            perturbation = _generate(model, dataset, algorithm, mode, xi, config)
            labels, clean, perturbed = _predictions(model, dataset, perturbation)
            pert_id = algorithm
        acc, rec, dec, fr = _perturbed_metrics(labels, clean, perturbed)
        rows.append(
            MetricRow(
                dataset_id=dataset_id,
                model_id=model_id,
                perturbation_id=pert_id,
                xi=xi,
                mode=mode,
                acc=acc,
                recall=rec,
                decrease=dec,
                fooling_rate=fr,
                seed=config.seed,
            )
        )
    return rows


def transfer_matrix(
    models: Sequence,
    dataset: BagDataset,
    config: AttackConfig | None = None,
    names: Sequence[str] | None = None,
) -> TransferMatrix:
    """Universal perturbation from each source model, decrease on every target.

    The diagonal is the self-attack decrease. Per-bag customized
    perturbations are model-specific by construction, so only universal ones
    transfer.
    """
    models = list(models)
    if not models:
        raise ValueError("at least one model is required")
    dims = {getattr(m, "d", dataset.dimension) for m in models}
    if len(dims) != 1 or dataset.dimension not in dims:
        raise ValueError(f"models must share the dataset dimension {dataset.dimension}, got {sorted(dims)}")
    config = config or AttackConfig()
    if names is None:
        names = []
        for i, m in enumerate(models):
            fp = getattr(m, "fingerprint", None)
            names.append(fp() if callable(fp) else f"model{i}")
    if len(names) != len(models):
        raise ValueError("names and models lengths differ")

    values = np.zeros((len(models), len(models)))
    for i, source in enumerate(models):
        perturbation, _ = mi_uap(source, dataset, config)
        for j, target in enumerate(models):
            values[i, j] = decrease(target, dataset, perturbation)
    return TransferMatrix(source_ids=tuple(names), target_ids=tuple(names), values=values)


def attention_summary(values, bins: int = 50, grid_points: int = 256) -> AttentionSummary:
    """Histogram on [0, 1] plus a Gaussian KDE with Silverman-rule bandwidth."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("no attention values given")
    if values.min() < 0.0 or values.max() > 1.0:
        raise ValueError("attention values must lie in [0, 1]")
    counts, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    centers = 0.5 * (edges[:-1] + edges[1:])

    n = values.size
    sigma = float(values.std(ddof=1)) if n > 1 else 0.0
    q75, q25 = np.percentile(values, [75.0, 25.0])
    spreads = [s for s in (sigma, (q75 - q25) / 1.34) if s > 0.0]
    bandwidth = 0.9 * min(spreads) * n ** (-0.2) if spreads else 0.0
    if bandwidth <= 0.0:
        bandwidth = 1e-3  # degenerate sample: render a narrow spike

    grid = np.linspace(0.0, 1.0, grid_points)
    density = np.zeros(grid_points)
    norm = 1.0 / (n * bandwidth * math.sqrt(2.0 * math.pi))
    for start in range(0, n, 65536):
        chunk = values[start : start + 65536]
        density += np.exp(-0.5 * ((grid[:, None] - chunk[None, :]) / bandwidth) ** 2).sum(axis=1)
    return AttentionSummary(
        bin_centers=centers,
        counts=counts,
        kde_x=grid,
        kde_density=density * norm,
        bandwidth=bandwidth,
    )


def adversarial_augment(dataset: BagDataset, model, ratio: float, config: AttackConfig) -> BagDataset:
    """Append customized-attack copies of sampled bags, keeping their original labels.

    Picks ceil(ratio * N) bags (preferring ones the model classifies
    correctly), perturbs each with the customized attack in "att" mode at the
    configured magnitude budget, and appends the perturbed bags under fresh
    ids. Ratio 0 returns the dataset unchanged.
    """
    if ratio == 0:
        return dataset
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must be 0 or in (0, 1), got {ratio}")
    n_extra = math.ceil(ratio * len(dataset.bags))
    correct = [bag for bag in dataset.bags if model.forward(bag.instances).predicted == bag.label]
    rest = [bag for bag in dataset.bags if model.forward(bag.instances).predicted != bag.label]
    rng = substream(config.seed, "augment")
    pool = list(rng.permutation(len(correct)))
    chosen = [correct[i] for i in pool[:n_extra]]
    if len(chosen) < n_extra:
        filler = list(rng.permutation(len(rest)))[: n_extra - len(chosen)]
        chosen += [rest[i] for i in filler]

    att_config = replace(config, mode="att")
    next_id = max(bag.id for bag in dataset.bags) + 1
    extra = []
    for offset, bag in enumerate(chosen):
        eps = mi_cap(model, bag, att_config).perturbation.epsilon
        extra.append(Bag(next_id + offset, bag.instances + eps, bag.label, bag.instance_labels))
    return BagDataset(
        bags=dataset.bags + tuple(extra),
        dimension=dataset.dimension,
        normalization_stats=dataset.normalization_stats,
        seed=dataset.seed,
        generation=dataset.generation,
    )


@dataclass(frozen=True)
class DefenceRow:
    """Metrics of one hardened model under the fixed attack artifacts."""

    ratio: float
    clean_acc: float
    attacked_acc: float
    attacked_recall: float
    decrease: float
    fooling_rate: float


def defence_curve(
    train_set: BagDataset,
    test_set: BagDataset,
    ratios: Sequence[float],
    attack_config: AttackConfig,
    hidden: int = 128,
    attention_dim: int = 64,
    variant: str = "plain",
    epochs: int = 50,
    learning_rate: float = 0.0001,
    seed: int = 0,
    optimizer: str = "adam",
) -> list[DefenceRow]:
    """Adversarial-training defence, paired against one fixed attack.

    Trains a base model, crafts customized "att"-mode artifacts against it on
    the test split once, then for each ratio hardens the base model by
    continuing its training on the augmented train set and re-measures both
    clean accuracy and accuracy under the same artifacts. Ratio 0 is the
    unhardened baseline. Warm-starting from the base parameters keeps the
    comparison paired; a from-scratch retrain can land in an entirely
    different basin on borderline-separable data.
    """
    att_config = replace(attack_config, mode="att")
    base, _ = train(
        init_model(train_set.dimension, hidden, attention_dim, variant, seed),
        train_set,
        epochs=epochs,
        learning_rate=learning_rate,
        seed=seed,
        optimizer=optimizer,
    )
    artifacts, _ = mi_cap_dataset(base, test_set, att_config)
    rows = []
    for ratio in ratios:
        if ratio == 0:
            model_r = base
        else:
            augmented = adversarial_augment(train_set, base, ratio, att_config)
            model_r, _ = train(
                base,
                augmented,
                epochs=epochs,
                learning_rate=learning_rate,
                seed=seed + 1,
                optimizer=optimizer,
            )
        labels, clean, perturbed = _predictions(model_r, test_set, artifacts)
        acc, rec, dec, fr = _perturbed_metrics(labels, clean, perturbed)
        rows.append(
            DefenceRow(
                ratio=float(ratio),
                clean_acc=float((labels == clean).mean()),
                attacked_acc=acc,
                attacked_recall=rec,
                decrease=dec,
                fooling_rate=fr,
            )
        )
    return rows


def write_defence_csv(path, rows: Sequence[DefenceRow], repro: dict | None = None) -> None:
    _write_csv(
        path,
        ["ratio", "clean_acc", "attacked_acc", "attacked_recall", "decrease", "fooling_rate"],
        [[r.ratio, r.clean_acc, r.attacked_acc, r.attacked_recall, r.decrease, r.fooling_rate] for r in rows],
        repro,
    )


def _write_csv(path, header, rows, repro: dict | None = None) -> None:
    with open(path, "w", newline="") as f:
        if repro:
            f.write("# " + json.dumps(repro, sort_keys=True) + "\n")
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def write_metric_rows(path, rows: Sequence[MetricRow], repro: dict | None = None) -> None:
    """Metric table CSV; one row per (dataset, model, perturbation) evaluation."""
    _write_csv(
        path,
        METRIC_HEADER,
        [
            [r.dataset_id, r.model_id, r.perturbation_id, r.xi, r.mode, r.acc, r.recall, r.decrease, r.fooling_rate, r.seed]
            for r in rows
        ],
        repro,
    )


def write_transfer_csv(path, matrix: TransferMatrix, repro: dict | None = None) -> None:
    """Transfer matrix CSV: source rows, target columns."""
    _write_csv(
        path,
        ["source"] + list(matrix.target_ids),
        [[sid] + [v for v in matrix.values[i]] for i, sid in enumerate(matrix.source_ids)],
        repro,
    )


def write_histogram_csv(path, summary: AttentionSummary, repro: dict | None = None) -> None:
    _write_csv(
        path,
        ["bin_center", "count"],
        [[c, int(k)] for c, k in zip(summary.bin_centers, summary.counts)],
        repro,
    )


def write_kde_csv(path, summary: AttentionSummary, repro: dict | None = None) -> None:
    _write_csv(path, ["x", "density"], [[x, d] for x, d in zip(summary.kde_x, summary.kde_density)], repro)
