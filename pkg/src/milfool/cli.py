"""Command-line entry point for reproducible dataset/model/attack/eval runs.

Every command is a pure function of its input files and resolved
configuration: outputs carry no timestamps, all randomness flows from
``--seed`` through named substreams, and rerunning a command reproduces its
outputs byte for byte. Flag values override config-file values, which
override built-in defaults; the fully resolved configuration is echoed into
every output.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from pathlib import Path

from . import attack as atk
from . import data as dat
from . import evaluate as ev
from . import model as mdl

GEN_DEFAULTS = {
    "mode": "synthetic",
    "n_bags": 200,
    "bag_size_min": 5,
    "bag_size_max": 10,
    "dimension": 10,
    "positive_bag_fraction": 0.5,
    "cluster_separation": 4.0,
    "target_class": 9,
    "normalize": True,
    "seed": 0,
    "out": "dataset",
    "out_dir": ".",
}
TRAIN_DEFAULTS = {
    "epochs": 50,
    "lr": 0.0001,
    "hidden": 128,
    "attention_dim": 64,
    "variant": "plain",
    "optimizer": "adam",
    "seed": 0,
    "out": "model",
    "out_dir": ".",
}
ATTACK_DEFAULTS = {
    "algo": "uap",
    "mode": "ave",
    "xi": 0.2,
    "max_iters": 10,
    "max_epochs": 50,
    "delta": 0.5,
    "eta": 1e-8,
    "projection_norm": "l2",
    "shuffle_each_epoch": False,
    "seed": 0,
    "out": "attack",
    "out_dir": ".",
}
EVAL_DEFAULTS = {"seed": 0, "out": "metrics", "out_dir": "."}
SWEEP_DEFAULTS = {
    **{k: v for k, v in ATTACK_DEFAULTS.items() if k not in ("out", "xi")},
    "xis": "0,0.01,0.05,0.1,0.2,0.3,0.4,0.5,1",
    "out": "sweep",
}
TRANSFER_DEFAULTS = {**{k: v for k, v in ATTACK_DEFAULTS.items() if k != "out"}, "out": "transfer"}
DEFEND_DEFAULTS = {
    **{k: v for k, v in ATTACK_DEFAULTS.items() if k not in ("out", "algo", "mode")},
    "ratios": "0,0.01,0.1",
    "epochs": 50,
    "lr": 0.0001,
    "hidden": 128,
    "attention_dim": 64,
    "variant": "plain",
    "optimizer": "adam",
    "out": "defend",
}
ATTN_DEFAULTS = {"bins": 50, "seed": 0, "out": "attention", "out_dir": "."}


class UsageError(ValueError):
    pass


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:12]


def _config_hash(resolved: dict) -> str:
    return hashlib.sha256(json.dumps(resolved, sort_keys=True, default=str).encode()).hexdigest()[:12]


def _load_config_file(path) -> dict:
    """JSON object, or key=value lines with JSON-parsed values."""
    text = Path(path).read_text()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        loaded = json.loads(text)
        if not isinstance(loaded, dict):
            raise UsageError(f"{path}: config file must hold a JSON object")
        return loaded
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        try:
            values[key.strip().replace("-", "_")] = json.loads(value.strip())
        except json.JSONDecodeError:
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    resolved = dict(defaults)
    explicit = {k: v for k, v in vars(args).items() if k not in ("func", "config", "command")}
    if getattr(args, "config", None):
        file_values = _load_config_file(args.config)
        unknown = set(file_values) - set(defaults) - set(explicit)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        resolved.update(file_values)
    resolved.update(explicit)
    return resolved


def _floats(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(part) for part in str(text).split(",") if part.strip() != ""]


def _out_path(resolved: dict, suffix: str) -> Path:
    out_dir = Path(resolved["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir / (resolved["out"] + suffix)


def _attack_config(resolved: dict, require_finite_xi: bool = True) -> atk.AttackConfig:
    xi = float(resolved["xi"])
    if xi <= 0:
        raise UsageError(f"xi must be positive, got {xi}")
    if require_finite_xi and not math.isfinite(xi):
        raise UsageError("xi must be finite here")
    return atk.AttackConfig(
        max_iters=int(resolved["max_iters"]),
        max_epochs=int(resolved["max_epochs"]),
        delta=float(resolved["delta"]),
        xi=xi,
        eta=float(resolved["eta"]),
        mode=resolved["mode"],
        projection_norm=resolved["projection_norm"],
        seed=int(resolved["seed"]),
        shuffle_each_epoch=bool(resolved["shuffle_each_epoch"]),
    )


def _repro(resolved: dict, **hashes) -> dict:
    block = {"seed": int(resolved.get("seed", 0)), "config_hash": _config_hash(resolved)}
    block.update(hashes)
    return block


def _extend_json(path: Path, extra: dict) -> None:
    payload = json.loads(path.read_text())
    payload.update(extra)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _require(resolved: dict, *keys: str) -> None:
    missing = [k for k in keys if resolved.get(k) is None]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join('--' + k.replace('_', '-') for k in missing)}")


def cmd_gen_data(args) -> None:
    resolved = _resolve(args, {**GEN_DEFAULTS, "images": None, "labels": None})
    config = dat.GenerationConfig(
        n_bags=int(resolved["n_bags"]),
        bag_size_min=int(resolved["bag_size_min"]),
        bag_size_max=int(resolved["bag_size_max"]),
        target_class=int(resolved["target_class"]),
        seed=int(resolved["seed"]),
        positive_bag_fraction=float(resolved["positive_bag_fraction"]),
        cluster_separation=float(resolved["cluster_separation"]),
        dimension=int(resolved["dimension"]),
    )
    if resolved["mode"] == "synthetic":
        dataset = dat.generate_synthetic_dataset(config)
    elif resolved["mode"] == "mnist":
        _require(resolved, "images", "labels")
        images, labels = dat.load_idx_images(resolved["images"], resolved["labels"])
        dataset = dat.build_image_bags(images, labels, config)
    else:
        raise UsageError(f"unknown generation mode {resolved['mode']!r}")
    if resolved["normalize"]:
        dataset = dat.normalize(dataset)
    path = dat.save_bags(dataset, _out_path(resolved, ".bags"))
    _extend_json(
        path.with_suffix(".manifest.json"),
        {"resolved_config": resolved, "reproducibility": _repro(resolved, dataset_hash=_file_hash(path))},
    )
    print(f"wrote {path}")


def cmd_train(args) -> None:
    resolved = _resolve(args, {**TRAIN_DEFAULTS, "data": None})
    _require(resolved, "data")
    dataset = dat.load_bags(resolved["data"])
    seed = int(resolved["seed"])
    model = mdl.init_model(
        d=dataset.dimension,
        hidden=int(resolved["hidden"]),
        attention_dim=int(resolved["attention_dim"]),
        variant=resolved["variant"],
        seed=seed,
    )
    trained, losses = mdl.train(
        model,
        dataset,
        epochs=int(resolved["epochs"]),
        learning_rate=float(resolved["lr"]),
        seed=seed,
        optimizer=resolved["optimizer"],
    )
    path = mdl.save_model(trained, _out_path(resolved, ".milmodel"), train_seed=seed)
    repro = _repro(resolved, model_hash=trained.fingerprint(), dataset_hash=_file_hash(resolved["data"]))
    _extend_json(path.with_suffix(".model.json"), {"resolved_config": resolved, "reproducibility": repro})
    loss_path = _out_path(resolved, ".loss.csv")
    ev._write_csv(loss_path, ["epoch", "mean_loss"], [[i + 1, v] for i, v in enumerate(losses)], repro)
    print(f"wrote {path}")


def _load_model_and_data(resolved: dict) -> tuple[mdl.AttentionMILModel, dat.BagDataset]:
    _require(resolved, "model", "data")
    model = mdl.load_model(resolved["model"])
    dataset = dat.load_bags(resolved["data"])
    if dataset.dimension != model.d:
        raise UsageError(
            f"dimension mismatch: model {resolved['model']} has d={model.d}, "
            f"dataset {resolved['data']} has d={dataset.dimension}"
        )
    return model, dataset


def cmd_attack(args) -> None:
    resolved = _resolve(args, {**ATTACK_DEFAULTS, "model": None, "data": None})
    model, dataset = _load_model_and_data(resolved)
    # cap/uap accept an unbounded budget; the baselines are scaled to xi and need it finite
    config = _attack_config(resolved, require_finite_xi=resolved["algo"] in ("random", "mean"))
    repro = _repro(
        resolved,
        model_hash=model.fingerprint(),
        dataset_hash=_file_hash(resolved["data"]),
    )
    algo = resolved["algo"]
    if algo == "uap":
        perturbation, report = atk.mi_uap(model, dataset, config)
        atk.save_perturbation(perturbation, _out_path(resolved, ".pert.json"))
    elif algo == "cap":
        perts, report = atk.mi_cap_dataset(model, dataset, config)
        payload = {
            "algorithm": "cap",
            "resolved_config": resolved,
            "reproducibility": repro,
            "perturbations": [{"bag_id": bag_id, **atk.perturbation_payload(p)} for bag_id, p in perts.items()],
        }
        _out_path(resolved, ".caps.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    elif algo in ("random", "mean"):
        perturbation = atk.baseline_perturbation(algo, dataset.dimension, config.xi, config.seed)
        atk.save_perturbation(perturbation, _out_path(resolved, ".pert.json"))
        _, _, perturbed = ev._predictions(model, dataset, perturbation)
        labels, clean, _ = ev._predictions(model, dataset)
        rows = tuple(
            atk.BagOutcome(bag.id, bag.label, int(c), int(p), bool(p != c))
            for bag, c, p in zip(dataset.bags, clean, perturbed)
        )
        report = atk.AttackReport(fooling_rate=atk.recompute_fooling_rate(rows), per_bag=rows)
    else:
        raise UsageError(f"unknown algorithm {algo!r}")
    atk.save_report(report, _out_path(resolved, ".report.json"), extra={"resolved_config": resolved, "reproducibility": repro})
    print(f"fooling_rate={report.fooling_rate:.6f}")


def cmd_eval(args) -> None:
    resolved = _resolve(args, {**EVAL_DEFAULTS, "model": None, "data": None, "pert": None})
    model, dataset = _load_model_and_data(resolved)
    repro = _repro(resolved, model_hash=model.fingerprint(), dataset_hash=_file_hash(resolved["data"]))
    if resolved["pert"]:
        perturbation = atk.load_perturbation(resolved["pert"])
        labels, clean, perturbed = ev._predictions(model, dataset, perturbation)
        pert_id = Path(resolved["pert"]).name
        xi = perturbation.xi if perturbation.xi is not None else math.nan
        mode = perturbation.mode or ""
    else:
        labels, clean, perturbed = ev._predictions(model, dataset)
        pert_id, xi, mode = "none", 0.0, ""
    acc, rec, dec, fr = ev._perturbed_metrics(labels, clean, perturbed)
    row = ev.MetricRow(
        dataset_id=Path(resolved["data"]).name,
        model_id=model.fingerprint(),
        perturbation_id=pert_id,
        xi=xi,
        mode=mode,
        acc=acc,
        recall=rec,
        decrease=dec,
        fooling_rate=fr,
        seed=int(resolved["seed"]),
    )
    path = _out_path(resolved, ".metrics.csv")
    ev.write_metric_rows(path, [row], repro)
    print(f"acc={acc:.6f} recall={rec:.6f} decrease={dec:.6f} fooling_rate={fr:.6f}")


def cmd_sweep(args) -> None:
    resolved = _resolve(args, {**SWEEP_DEFAULTS, "model": None, "data": None})
    model, dataset = _load_model_and_data(resolved)
    xis = _floats(resolved["xis"])
    config = atk.AttackConfig(
        max_iters=int(resolved["max_iters"]),
        max_epochs=int(resolved["max_epochs"]),
        delta=float(resolved["delta"]),
        eta=float(resolved["eta"]),
        mode=resolved["mode"],
        projection_norm=resolved["projection_norm"],
        seed=int(resolved["seed"]),
        shuffle_each_epoch=bool(resolved["shuffle_each_epoch"]),
    )
    rows = ev.xi_sweep(
        model,
        dataset,
        algorithm=resolved["algo"],
        mode=resolved["mode"],
        xis=xis,
        config=config,
        dataset_id=Path(resolved["data"]).name,
        model_id=model.fingerprint(),
    )
    repro = _repro(resolved, model_hash=model.fingerprint(), dataset_hash=_file_hash(resolved["data"]))
    path = _out_path(resolved, ".sweep.csv")
    ev.write_metric_rows(path, rows, repro)
    print(f"wrote {path} ({len(rows)} rows)")


def cmd_transfer(args) -> None:
    resolved = _resolve(args, {**TRANSFER_DEFAULTS, "models": None, "data": None})
    _require(resolved, "models", "data")
    model_paths = [p for p in str(resolved["models"]).split(",") if p]
    models = [mdl.load_model(p) for p in model_paths]
    dataset = dat.load_bags(resolved["data"])
    config = _attack_config(resolved)
    names = [Path(p).name for p in model_paths]
    matrix = ev.transfer_matrix(models, dataset, config, names=names)
    repro = _repro(
        resolved,
        model_hash=[m.fingerprint() for m in models],
        dataset_hash=_file_hash(resolved["data"]),
    )
    path = _out_path(resolved, ".transfer.csv")
    ev.write_transfer_csv(path, matrix, repro)
    print(f"wrote {path}")


def cmd_defend(args) -> None:
    resolved = _resolve(args, {**DEFEND_DEFAULTS, "train_data": None, "test_data": None})
    _require(resolved, "train_data", "test_data")
    train_set = dat.load_bags(resolved["train_data"])
    test_set = dat.load_bags(resolved["test_data"])
    config = _attack_config({**resolved, "mode": "att"})
    rows = ev.defence_curve(
        train_set,
        test_set,
        ratios=_floats(resolved["ratios"]),
        attack_config=config,
        hidden=int(resolved["hidden"]),
        attention_dim=int(resolved["attention_dim"]),
        variant=resolved["variant"],
        epochs=int(resolved["epochs"]),
        learning_rate=float(resolved["lr"]),
        seed=int(resolved["seed"]),
        optimizer=resolved["optimizer"],
    )
    repro = _repro(
        resolved,
        dataset_hash=[_file_hash(resolved["train_data"]), _file_hash(resolved["test_data"])],
    )
    path = _out_path(resolved, ".defend.csv")
    ev.write_defence_csv(path, rows, repro)
    print(f"wrote {path}")


def cmd_attn(args) -> None:
    resolved = _resolve(args, {**ATTN_DEFAULTS, "model": None, "data": None})
    model, dataset = _load_model_and_data(resolved)
    values = mdl.collect_attention(model, dataset)
    summary = ev.attention_summary(values, bins=int(resolved["bins"]))
    repro = _repro(resolved, model_hash=model.fingerprint(), dataset_hash=_file_hash(resolved["data"]))
    hist_path = _out_path(resolved, ".attn_hist.csv")
    kde_path = _out_path(resolved, ".attn_kde.csv")
    ev.write_histogram_csv(hist_path, summary, repro)
    ev.write_kde_csv(kde_path, summary, repro)
    print(f"wrote {hist_path} and {kde_path}")


def _add(parser, *names, **kwargs):
    kwargs.setdefault("default", argparse.SUPPRESS)
    parser.add_argument(*names, **kwargs)


def _common(parser):
    _add(parser, "--seed", type=int)
    _add(parser, "--config", default=None)
    _add(parser, "--out-dir", dest="out_dir")
    _add(parser, "--out")


def _attack_flags(parser, with_algo=True):
    if with_algo:
        _add(parser, "--algo", choices=atk.ALGORITHMS)
        _add(parser, "--mode", choices=atk.MODES)
    _add(parser, "--xi", type=float)
    _add(parser, "--max-iters", dest="max_iters", type=int)
    _add(parser, "--max-epochs", dest="max_epochs", type=int)
    _add(parser, "--delta", type=float)
    _add(parser, "--eta", type=float)
    _add(parser, "--projection-norm", dest="projection_norm", choices=atk.NORMS)
    _add(parser, "--shuffle-each-epoch", dest="shuffle_each_epoch", action=argparse.BooleanOptionalAction)


def _train_flags(parser):
    _add(parser, "--epochs", type=int)
    _add(parser, "--lr", type=float)
    _add(parser, "--hidden", type=int)
    _add(parser, "--attention-dim", dest="attention_dim", type=int)
    _add(parser, "--variant", choices=mdl.VARIANTS)
    _add(parser, "--optimizer", choices=("sgd", "adam"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="milfool", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a bag dataset (synthetic clusters or image bags)")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--synthetic", dest="mode", action="store_const", const="synthetic", default=argparse.SUPPRESS)
    group.add_argument("--mnist", dest="mode", action="store_const", const="mnist", default=argparse.SUPPRESS)
    _add(p, "--images")
    _add(p, "--labels")
    _add(p, "--n-bags", dest="n_bags", type=int)
    _add(p, "--bag-size-min", dest="bag_size_min", type=int)
    _add(p, "--bag-size-max", dest="bag_size_max", type=int)
    _add(p, "--dimension", type=int)
    _add(p, "--positive-bag-fraction", dest="positive_bag_fraction", type=float)
    _add(p, "--cluster-separation", dest="cluster_separation", type=float)
    _add(p, "--target-class", dest="target_class", type=int)
    _add(p, "--normalize", action=argparse.BooleanOptionalAction)
    _common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train an attention-pooled bag classifier")
    _add(p, "--data")
    _train_flags(p)
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="generate perturbations (customized, universal, or baselines)")
    _add(p, "--model")
    _add(p, "--data")
    _attack_flags(p)
    _common(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="accuracy/recall/decrease of a model, optionally under a perturbation")
    _add(p, "--model")
    _add(p, "--data")
    _add(p, "--pert")
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="metrics across a grid of perturbation magnitudes")
    _add(p, "--model")
    _add(p, "--data")
    _add(p, "--xis")
    _attack_flags(p)
    _common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("transfer", help="cross-model decrease matrix under universal perturbations")
    _add(p, "--models")
    _add(p, "--data")
    _attack_flags(p, with_algo=False)
    _add(p, "--mode", choices=atk.MODES)
    _common(p)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("defend", help="adversarial-training defence: retrain with perturbed bags")
    _add(p, "--train-data", dest="train_data")
    _add(p, "--test-data", dest="test_data")
    _add(p, "--ratios")
    _attack_flags(p, with_algo=False)
    _train_flags(p)
    _common(p)
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("attn", help="attention-value histogram and KDE of a trained model")
    _add(p, "--model")
    _add(p, "--data")
    _add(p, "--bins", type=int)
    _common(p)
    p.set_defaults(func=cmd_attn)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
