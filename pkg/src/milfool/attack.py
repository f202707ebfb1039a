"""Additive perturbations against bag classifiers.

Two generators are provided. The customized attack crafts a minimal per-bag
perturbation by iterating a DeepFool-style linearized step on the class
probabilities until the prediction flips. The universal attack reuses the
customized one incrementally over a whole dataset, projecting the running
vector back onto a norm ball after every increment, until a target fraction
of correctly-classified bags is fooled.

Per-instance gradients have different shapes for different bags, so each
(n, d) gradient matrix is collapsed to a single d-vector either by averaging
the rows ("ave") or by taking the row of the instance with the largest
attention weight ("att").
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import BagDataset, as_instance_matrix
from .model import ForwardTrace, attention_argmax
from .seeding import substream

ALGORITHMS = ("cap", "uap", "random", "mean")
MODES = ("ave", "att")
NORMS = ("l2", "linf")


@dataclass(frozen=True)
class AttackConfig:
    """Shared knobs for both perturbation generators.

    ``max_iters`` bounds the customized attack's inner loop, ``max_epochs``
    the universal attack's dataset passes. ``delta`` is the fooling-rate
    target that stops the universal attack early, ``xi`` the norm budget
    enforced by projection (``inf`` leaves perturbations unbounded), and
    ``eta`` the stabilizer added to the squared norm in the linearized step.
    """

    max_iters: int = 10
    max_epochs: int = 50
    delta: float = 0.5
    xi: float = math.inf
    eta: float = 1e-8
    mode: str = "ave"
    projection_norm: str = "l2"
    seed: int = 0
    shuffle_each_epoch: bool = False

    def __post_init__(self):
        if self.max_iters < 1 or self.max_epochs < 1:
            raise ValueError("max_iters and max_epochs must be at least 1")
        if not 0.0 < self.delta <= 1.0:
            raise ValueError(f"delta must lie in (0, 1], got {self.delta}")
        if not self.xi > 0.0:
            raise ValueError(f"xi must be positive, got {self.xi}")
        if not self.eta > 0.0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.projection_norm not in NORMS:
            raise ValueError(f"projection_norm must be one of {NORMS}, got {self.projection_norm!r}")


@dataclass(frozen=True)
class Perturbation:
    """A single d-dimensional additive perturbation plus provenance."""

    epsilon: np.ndarray
    algorithm: str
    mode: str | None = None
    xi: float | None = None
    projection_norm: str = "l2"
    source_model: str | None = None
    seed: int | None = None

    def __post_init__(self):
        eps = np.array(self.epsilon, dtype=np.float64, copy=True)
        if eps.ndim != 1:
            raise ValueError(f"epsilon must be a vector, got shape {eps.shape}")
        eps.flags.writeable = False
        object.__setattr__(self, "epsilon", eps)
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")

    @property
    def d(self) -> int:
        return self.epsilon.shape[0]

    @property
    def norm_l2(self) -> float:
        return float(np.linalg.norm(self.epsilon))

    @property
    def norm_linf(self) -> float:
        return float(np.abs(self.epsilon).max()) if self.epsilon.size else 0.0


@dataclass(frozen=True)
class BagOutcome:
    """Attack outcome for one bag."""

    bag_id: int
    label: int
    clean_prediction: int
    perturbed_prediction: int
    fooled: bool
    iterations: int | None = None    # customized attack only
    epsilon_l2: float | None = None  # customized attack only


@dataclass(frozen=True)
class AttackReport:
    """Fooling rate plus per-bag outcomes; universal runs add epoch bookkeeping."""

    fooling_rate: float
    per_bag: tuple[BagOutcome, ...]
    epochs_run: int | None = None
    best_epoch: int | None = None
    zero_increment_skips: int = 0
    flags: tuple[str, ...] = ()


@dataclass(frozen=True)
class CapResult:
    """Customized attack output for one bag."""

    perturbation: Perturbation
    iterations: int
    success: bool
    clean_prediction: int
    perturbed_prediction: int


def aggregate_gradient(gradient: np.ndarray, mode: str, trace: ForwardTrace) -> np.ndarray:
    """Collapse an (n, d) per-instance gradient to a d-vector.

    "ave" averages the rows; "att" keeps only the row of the instance the
    model attends to most.
    """
    gradient = np.asarray(gradient, dtype=np.float64)
    if mode == "ave":
        return gradient.mean(axis=0)
    if mode == "att":
        return gradient[attention_argmax(trace)]
    raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def deepfool_step(g_cur: np.ndarray, g_prev: np.ndarray, p_tau: float, p_hat: float, eta: float) -> np.ndarray:
    """Linearized minimal step toward the class boundary.

    With w = g_cur - g_prev, returns |p_tau - p_hat| * w / (||w||^2 + eta).
    eta keeps the division finite when the two gradients coincide.
    """
    w = np.asarray(g_cur, dtype=np.float64) - np.asarray(g_prev, dtype=np.float64)
    return abs(float(p_tau) - float(p_hat)) * w / (float(w @ w) + eta)


def project(epsilon: np.ndarray, xi: float, norm: str = "l2") -> np.ndarray:
    """Project onto the xi-ball: rescale (l2) or clamp componentwise (linf).

    Interior points come back unchanged; xi may be inf (no-op for l2).
    """
    epsilon = np.asarray(epsilon, dtype=np.float64)
    if not xi > 0.0:
        raise ValueError(f"xi must be positive, got {xi}")
    if norm == "l2":
        n = float(np.linalg.norm(epsilon))
        if n <= xi:
            return epsilon
        return epsilon * (xi / n)
    if norm == "linf":
        return np.clip(epsilon, -xi, xi)
    raise ValueError(f"norm must be one of {NORMS}, got {norm!r}")


def _model_id(model) -> str | None:
    fp = getattr(model, "fingerprint", None)
    return fp() if callable(fp) else None


def mi_cap(model, bag, config: AttackConfig) -> CapResult:
    """Customized perturbation: iterate linearized steps until the bag flips.

    Starting from zero, each iteration evaluates the model at the currently
    perturbed bag, takes the gradients of the predicted-class and
    opposite-class probabilities, aggregates them per ``config.mode``, and
    accumulates a :func:`deepfool_step`. The loop ends at the first
    prediction flip or after ``config.max_iters`` iterations (no flip is a
    failed attack, not an error). A finite ``config.xi`` bounds the returned
    vector by a final projection, and success is re-checked at the projected
    vector.
    """
    x = as_instance_matrix(bag)
    d = x.shape[1]
    clean_trace = model.forward(x)
    clean_pred = clean_trace.predicted

    eps = np.zeros(d)
    trace = clean_trace
    iterations = 0
    while trace.predicted == clean_pred and iterations < config.max_iters:
        iterations += 1
        x_pert = x + eps
        hat = trace.predicted
        tau = 1 - hat
        grad_hat = model.input_gradient(x_pert, hat)
        grad_tau = model.input_gradient(x_pert, tau)
        g_prev = aggregate_gradient(grad_hat, config.mode, trace)
        g_cur = aggregate_gradient(grad_tau, config.mode, trace)
        eps = eps + deepfool_step(g_cur, g_prev, trace.probs[tau], trace.probs[hat], config.eta)
        trace = model.forward(x + eps)

    perturbed_pred = trace.predicted
    if math.isfinite(config.xi):
        eps = project(eps, config.xi, config.projection_norm)
        perturbed_pred = model.forward(x + eps).predicted
    success = perturbed_pred != clean_pred
    perturbation = Perturbation(
        epsilon=eps,
        algorithm="cap",
        mode=config.mode,
        xi=config.xi if math.isfinite(config.xi) else None,
        projection_norm=config.projection_norm,
        source_model=_model_id(model),
        seed=config.seed,
    )
    return CapResult(perturbation, iterations, success, clean_pred, perturbed_pred)


def fooling_rate(model, dataset: BagDataset, epsilon) -> float:
    """Fraction of correctly-classified bags whose prediction the perturbation flips.

    Both numerator and denominator range over bags the clean model gets
    right; an all-wrong clean model yields 0 by convention.
    """
    eps = np.asarray(getattr(epsilon, "epsilon", epsilon), dtype=np.float64)
    flipped = 0
    correct = 0
    for bag in dataset.bags:
        clean_pred = model.forward(bag.instances).predicted
        if clean_pred != bag.label:
            continue
        correct += 1
        if model.forward(bag.instances + eps).predicted != clean_pred:
            flipped += 1
    return flipped / correct if correct else 0.0


def _outcomes(model, dataset: BagDataset, eps: np.ndarray) -> tuple[BagOutcome, ...]:
    rows = []
    for bag in dataset.bags:
        clean_pred = model.forward(bag.instances).predicted
        pert_pred = model.forward(bag.instances + eps).predicted
        rows.append(
            BagOutcome(
                bag_id=bag.id,
                label=bag.label,
                clean_prediction=clean_pred,
                perturbed_prediction=pert_pred,
                fooled=pert_pred != clean_pred,
            )
        )
    return tuple(rows)


def recompute_fooling_rate(per_bag) -> float:
    """Fooling rate re-derived from per-bag outcome rows."""
    correct = [row for row in per_bag if row.clean_prediction == row.label]
    if not correct:
        return 0.0
    return sum(row.fooled for row in correct) / len(correct)


def mi_uap(model, dataset: BagDataset, config: AttackConfig) -> tuple[Perturbation, AttackReport]:
    """Universal perturbation: accumulate projected customized increments.

    Every epoch walks the dataset; each bag whose current perturbed
    prediction still matches its clean prediction contributes a fresh
    customized perturbation computed at the already-perturbed bag (the
    minimal extra step from the running vector), which is added and projected
    back onto the xi-ball. The best epoch by fooling rate is returned, and
    the walk stops early once the rate reaches ``config.delta``. Zero
    increments (gradient collapse) are skipped and counted.
    """
    d = dataset.dimension
    clean_preds = {bag.id: model.forward(bag.instances).predicted for bag in dataset.bags}
    n_correct = sum(clean_preds[bag.id] == bag.label for bag in dataset.bags)
    meta = dict(
        algorithm="uap",
        mode=config.mode,
        xi=config.xi if math.isfinite(config.xi) else None,
        projection_norm=config.projection_norm,
        source_model=_model_id(model),
        seed=config.seed,
    )
    if n_correct == 0:
        eps = np.zeros(d)
        report = AttackReport(
            fooling_rate=0.0,
            per_bag=_outcomes(model, dataset, eps),
            epochs_run=0,
            best_epoch=0,
            flags=("no clean-correct bags",),
        )
        return Perturbation(epsilon=eps, **meta), report

    inner_config = replace(config, xi=math.inf)
    rng = substream(config.seed, "attack")
    eps = np.zeros(d)
    best_rate = -1.0
    best_eps = eps.copy()
    best_epoch = 0
    zero_skips = 0
    epochs_run = 0
    for epoch in range(1, config.max_epochs + 1):
        epochs_run = epoch
        order = rng.permutation(len(dataset.bags)) if config.shuffle_each_epoch else range(len(dataset.bags))
        for idx in order:
            bag = dataset.bags[idx]
            x_pert = bag.instances + eps
            if model.forward(x_pert).predicted != clean_preds[bag.id]:
                continue
            increment = mi_cap(model, x_pert, inner_config).perturbation.epsilon
            if not increment.any():
                zero_skips += 1
                continue
            eps = project(eps + increment, config.xi, config.projection_norm)
        rate = fooling_rate(model, dataset, eps)
        if rate > best_rate:
            best_rate, best_eps, best_epoch = rate, eps.copy(), epoch
        if rate >= config.delta:
            break

    report = AttackReport(
        fooling_rate=best_rate,
        per_bag=_outcomes(model, dataset, best_eps),
        epochs_run=epochs_run,
        best_epoch=best_epoch,
        zero_increment_skips=zero_skips,
    )
    return Perturbation(epsilon=best_eps, **meta), report


def mi_cap_dataset(model, dataset: BagDataset, config: AttackConfig) -> tuple[dict[int, Perturbation], AttackReport]:
    """Run the customized attack on every bag; returns per-bag perturbations and a summary."""
    perts: dict[int, Perturbation] = {}
    rows = []
    for bag in dataset.bags:
        result = mi_cap(model, bag, config)
        perts[bag.id] = result.perturbation
        rows.append(
            BagOutcome(
                bag_id=bag.id,
                label=bag.label,
                clean_prediction=result.clean_prediction,
                perturbed_prediction=result.perturbed_prediction,
                fooled=result.success,
                iterations=result.iterations,
                epsilon_l2=result.perturbation.norm_l2,
            )
        )
    report = AttackReport(fooling_rate=recompute_fooling_rate(rows), per_bag=tuple(rows))
    return perts, report


def baseline_perturbation(kind: str, d: int, xi: float, seed: int = 0) -> Perturbation:
    """Reference perturbations: uniform-random direction or a constant vector.

    "random" draws components uniformly from [-1, 1] and projects to the
    l2 xi-ball; "mean" is the constant vector xi/sqrt(d) in every component
    (unit direction scaled onto the ball boundary).
    """
    if kind not in ("random", "mean"):
        raise ValueError(f"kind must be 'random' or 'mean', got {kind!r}")
    if not xi > 0.0 or not math.isfinite(xi):
        raise ValueError(f"xi must be positive and finite, got {xi}")
    if kind == "random":
        rng = substream(seed, "attack")
        eps = project(rng.uniform(-1.0, 1.0, size=d), xi, "l2")
    else:
        eps = np.full(d, xi / math.sqrt(d))
    return Perturbation(epsilon=eps, algorithm=kind, xi=xi, projection_norm="l2", seed=seed)


def save_perturbation(perturbation: Perturbation, path) -> Path:
    """Write ``<name>.pert.json``; returns the path."""
    path = Path(path)
    if not path.name.endswith(".pert.json"):
        path = path.with_name(path.name + ".pert.json")
    payload = perturbation_payload(perturbation)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def perturbation_payload(perturbation: Perturbation) -> dict:
    return {
        "d": perturbation.d,
        "epsilon": perturbation.epsilon.tolist(),
        "algorithm": perturbation.algorithm,
        "mode": perturbation.mode,
        "xi": perturbation.xi,
        "projection_norm": perturbation.projection_norm,
        "source_model": perturbation.source_model,
        "seed": perturbation.seed,
        "norm_l2": perturbation.norm_l2,
        "norm_linf": perturbation.norm_linf,
    }


def load_perturbation(path) -> Perturbation:
    """Read a ``.pert.json`` file, checking the stored norms against recomputation."""
    payload = json.loads(Path(path).read_text())
    perturbation = Perturbation(
        epsilon=np.asarray(payload["epsilon"], dtype=np.float64),
        algorithm=payload["algorithm"],
        mode=payload.get("mode"),
        xi=payload.get("xi"),
        projection_norm=payload.get("projection_norm", "l2"),
        source_model=payload.get("source_model"),
        seed=payload.get("seed"),
    )
    if perturbation.d != payload["d"]:
        raise ValueError(f"{path}: declared d={payload['d']} but epsilon has length {perturbation.d}")
    for name, stored in (("norm_l2", payload.get("norm_l2")), ("norm_linf", payload.get("norm_linf"))):
        if stored is not None and abs(stored - getattr(perturbation, name)) > 1e-12:
            raise ValueError(f"{path}: stored {name}={stored} does not match recomputed value")
    return perturbation


def report_payload(report: AttackReport) -> dict:
    return {
        "fooling_rate": report.fooling_rate,
        "epochs_run": report.epochs_run,
        "best_epoch": report.best_epoch,
        "zero_increment_skips": report.zero_increment_skips,
        "flags": list(report.flags),
        "per_bag": [
            {
                "bag_id": row.bag_id,
                "label": row.label,
                "clean_prediction": row.clean_prediction,
                "perturbed_prediction": row.perturbed_prediction,
                "fooled": row.fooled,
                "iterations": row.iterations,
                "epsilon_l2": row.epsilon_l2,
            }
            for row in report.per_bag
        ],
    }


def save_report(report: AttackReport, path, extra: dict | None = None) -> Path:
    """Write ``<name>.report.json`` plus per-bag rows as ``<name>.report.csv``."""
    path = Path(path)
    if not path.name.endswith(".report.json"):
        path = path.with_name(path.name + ".report.json")
    payload = report_payload(report)
    if extra:
        payload.update(extra)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    csv_path = path.with_name(path.name[: -len(".json")] + ".csv")
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["bag_id", "label", "clean_prediction", "perturbed_prediction", "fooled", "iterations", "epsilon_l2"]
        )
        for row in report.per_bag:
            writer.writerow(
                [
                    row.bag_id,
                    row.label,
                    row.clean_prediction,
                    row.perturbed_prediction,
                    int(row.fooled),
                    "" if row.iterations is None else row.iterations,
                    "" if row.epsilon_l2 is None else repr(row.epsilon_l2),
                ]
            )
    return path
