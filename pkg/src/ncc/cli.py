"""Command-line front end.

Subcommands: gen-data (synthetic vMF mixtures to CSV), train (one run
directory with resolved config, metrics stream, checkpoints, and final
embeddings), eval (spherical k-means plus metrics on an embeddings CSV),
and sweep (repeat train over one hyperparameter axis and aggregate).

Exit codes: 0 success, 2 configuration or usage error, 3 training aborted
on a non-finite loss (a diagnostic file is left in the run directory).
Config files are strict JSON: unknown keys anywhere are rejected, and
every run directory receives a resolved-config.json that reproduces the
run bit-exactly when passed back through --config.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import json
import os
import sys

import numpy as np

from .clustering import spherical_kmeans
from .data import (AugmentSpec, Dataset, SyntheticSpec, gen_vmf_mixture,
                   load_csv, make_long_tailed, save_csv)
from .losses import LossConfig
from .metrics import MetricsReport, imbalance_ratio
from .trainer import METHODS, NonFiniteLossError, TrainConfig, train

SCHEMA_VERSION = 1

_SECTION_KEYS = {
    "train": {"k", "epochs", "batch_size", "r", "warmup_epochs",
              "predictor_lr_mult", "momentum", "sgd_momentum", "weight_decay",
              "eval_every", "kmeans_restarts", "method", "seed",
              "backbone_hidden", "projector_hidden", "projection_dim"},
    "loss": {"tau", "sigma", "lambda_pcl"},
    "data": {"num_classes", "ambient_dim", "kappa", "per_class", "seed",
             "long_tail_ratio", "path"},
    "augment": {"noise_std", "mask_prob", "scale_range"},
    "output": {"dir"},
}

_DEFAULT_DATA = {"num_classes": 4, "ambient_dim": 32, "kappa": 50.0,
                 "per_class": 250, "seed": 0, "long_tail_ratio": None}


class ConfigError(ValueError):
    pass


def _check_keys(mapping, allowed, context):
    unknown = set(mapping) - allowed
    if unknown:
        raise ConfigError(f"unknown {context} keys: {sorted(unknown)}")


def load_config_file(path) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config: {err}")
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}")
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(doc, {"schema_version", *_SECTION_KEYS}, "top-level")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}")
    for section, keys in _SECTION_KEYS.items():
        part = doc.get(section, {})
        if not isinstance(part, dict):
            raise ConfigError(f"section '{section}' must be an object")
        _check_keys(part, keys, f"'{section}'")
    return doc


def _build_configs(doc: dict, default_k=None):
    """Assemble validated dataclasses from a (merged) config document."""
    loss = LossConfig(**doc.get("loss", {}))
    aug_part = dict(doc.get("augment", {}))
    if "scale_range" in aug_part:
        aug_part["scale_range"] = tuple(aug_part["scale_range"])
    aug = AugmentSpec(**aug_part)
    train_part = dict(doc.get("train", {}))
    if "backbone_hidden" in train_part:
        train_part["backbone_hidden"] = tuple(train_part["backbone_hidden"])
    if "k" not in train_part:
        if default_k is None:
            raise ConfigError("train.k is required when the data has no labels")
        train_part["k"] = default_k
    cfg = TrainConfig(loss=loss, augment=aug, **train_part)
    return cfg


def _build_dataset(doc: dict):
    part = {**_DEFAULT_DATA, **doc.get("data", {})}
    ratio = part.pop("long_tail_ratio", None)
    path = part.pop("path", None)
    if path is not None:
        ds = load_csv(path)
        data_desc = {"path": path, "long_tail_ratio": ratio}
        data_seed = part["seed"]
    else:
        spec = SyntheticSpec(num_classes=part["num_classes"],
                             ambient_dim=part["ambient_dim"],
                             kappa=part["kappa"], per_class=part["per_class"],
                             seed=part["seed"])
        ds, _ = gen_vmf_mixture(spec)
        data_desc = {"num_classes": spec.num_classes,
                     "ambient_dim": spec.ambient_dim,
                     "kappa": list(spec.kappa), "per_class": list(spec.per_class),
                     "seed": spec.seed, "long_tail_ratio": ratio}
        data_seed = spec.seed
    if ratio is not None:
        if ds.labels is None:
            raise ConfigError("long_tail_ratio needs labeled data")
        ds = make_long_tailed(ds, ratio, seed=data_seed)
    return ds, data_desc


def resolved_config(cfg: TrainConfig, data_desc: dict, out_dir) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "train": {
            "k": cfg.k, "epochs": cfg.epochs, "batch_size": cfg.batch_size,
            "r": cfg.r, "warmup_epochs": cfg.resolved_warmup,
            "predictor_lr_mult": cfg.predictor_lr_mult,
            "momentum": cfg.momentum, "sgd_momentum": cfg.sgd_momentum,
            "weight_decay": cfg.weight_decay, "eval_every": cfg.eval_every,
            "kmeans_restarts": cfg.kmeans_restarts, "method": cfg.method,
            "seed": cfg.seed, "backbone_hidden": list(cfg.backbone_hidden),
            "projector_hidden": cfg.projector_hidden,
            "projection_dim": cfg.projection_dim,
        },
        "loss": {"tau": cfg.loss.tau, "sigma": cfg.loss.sigma,
                 "lambda_pcl": cfg.loss.lambda_pcl},
        "data": data_desc,
        "augment": {"noise_std": cfg.augment.noise_std,
                    "mask_prob": cfg.augment.mask_prob,
                    "scale_range": list(cfg.augment.scale_range)},
        "output": {"dir": str(out_dir)},
    }


def _merge_overrides(doc: dict, args) -> dict:
    """Layer command-line flags over the config document."""
    out = {k: dict(v) if isinstance(v, dict) else v for k, v in doc.items()}
    def put(section, key, value):
        if value is not None:
            out.setdefault(section, {})[key] = value

    put("loss", "sigma", args.sigma)
    put("loss", "lambda_pcl", args.lambda_pcl)
    put("loss", "tau", args.tau)
    put("train", "k", args.k)
    put("train", "r", args.r)
    put("train", "epochs", args.epochs)
    put("train", "seed", args.seed)
    put("train", "method", args.method)
    put("data", "num_classes", args.classes)
    put("data", "ambient_dim", args.dim)
    put("data", "kappa", args.kappa)
    put("data", "per_class", args.per_class)
    put("data", "seed", args.data_seed)
    put("data", "long_tail_ratio", args.long_tail_ratio)
    put("data", "path", args.data)
    return out


def cmd_gen_data(args) -> int:
    spec = SyntheticSpec(num_classes=args.classes, ambient_dim=args.dim,
                         kappa=args.kappa, per_class=args.per_class,
                         seed=args.seed)
    ds, _ = gen_vmf_mixture(spec)
    if args.long_tail_ratio is not None:
        ds = make_long_tailed(ds, args.long_tail_ratio, seed=args.seed)
    save_csv(args.out, ds)
    print(f"wrote {ds.features.shape[0]} rows, {args.classes} classes, "
          f"imbalance {imbalance_ratio(ds.labels):.4g} to {args.out}")
    return 0


def cmd_train(args) -> int:
    doc = load_config_file(args.config) if args.config else {"schema_version": SCHEMA_VERSION}
    doc = _merge_overrides(doc, args)
    out_dir = args.out or doc.get("output", {}).get("dir")
    if out_dir is None:
        raise ConfigError("an output directory is required (--out or output.dir)")
    ds, data_desc = _build_dataset(doc)
    default_k = int(np.unique(ds.labels).size) if ds.labels is not None else None
    cfg = _build_configs(doc, default_k)
    os.makedirs(out_dir, exist_ok=True)
    resolved = resolved_config(cfg, data_desc, out_dir)
    with open(os.path.join(out_dir, "resolved-config.json"), "w") as fh:
        json.dump(resolved, fh, indent=2)
        fh.write("\n")
    try:
        _, report = train(cfg, ds, out_dir=out_dir)
    except NonFiniteLossError as err:
        diag_path = os.path.join(out_dir, "abort-diagnostics.json")
        with open(diag_path, "w") as fh:
            json.dump(err.diagnostics, fh, indent=2)
            fh.write("\n")
        print(f"aborted: {err} (diagnostics in {diag_path})", file=sys.stderr)
        return 3
    print(report.to_json())
    return 0


def _read_eval_csv(path):
    """Accept a dataset CSV (label,f0..) or a run directory's embeddings.csv
    (id[,label_true],label_pred,f0..); predicted labels are ignored."""
    with open(path, newline="") as fh:
        header = next(csv.reader(fh), None)
    if not header or header[0] != "id":
        return load_csv(path)
    labeled = len(header) > 1 and header[1] == "label_true"
    n_meta = 3 if labeled else 2
    if header[n_meta - 1] != "label_pred" or \
            header[n_meta:] != [f"f{i}" for i in range(len(header) - n_meta)]:
        raise ConfigError(f"{path}: unrecognized embeddings header")
    ids, labels, rows = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ConfigError(f"line {lineno}: expected {len(header)} cells,"
                                  f" found {len(row)}")
            try:
                ids.append(int(row[0]))
                if labeled:
                    labels.append(int(row[1]))
                rows.append([float(v) for v in row[n_meta:]])
            except ValueError:
                raise ConfigError(f"line {lineno}: non-numeric cell") from None
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    return Dataset(features=np.array(rows),
                   labels=np.array(labels) if labeled else None,
                   ids=np.array(ids))


def cmd_eval(args) -> int:
    ds = _read_eval_csv(args.embeddings)
    if ds.labels is None:
        raise ConfigError("eval needs an embeddings CSV with a label column")
    feats = ds.features
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ConfigError("eval embeddings contain an all-zero row")
    feats = feats / norms
    k = args.k if args.k is not None else int(np.unique(ds.labels).size)
    result = spherical_kmeans(feats, k, seed=args.seed)
    report = MetricsReport.compute(result.labels, feats, ds.labels)
    print(report.to_json())
    return 0


_SWEEP_PARAMS = {
    "r": ("train", "r", int),
    "sigma": ("loss", "sigma", float),
    "lambda-pcl": ("loss", "lambda_pcl", float),
    "k": ("train", "k", int),
    "dim": ("train", "projection_dim", int),
}

_SWEEP_METRICS = ("nmi", "ami", "ari", "acc")


def _one_sweep_run(doc, section, key, value, rep, out_dir):
    run_doc = {k: dict(v) if isinstance(v, dict) else v for k, v in doc.items()}
    run_doc.setdefault(section, {})[key] = value
    base_seed = run_doc.get("train", {}).get("seed", 0)
    run_doc.setdefault("train", {})["seed"] = base_seed + rep
    ds, data_desc = _build_dataset(run_doc)
    default_k = int(np.unique(ds.labels).size) if ds.labels is not None else None
    cfg = _build_configs(run_doc, default_k)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved-config.json"), "w") as fh:
        json.dump(resolved_config(cfg, data_desc, out_dir), fh, indent=2)
        fh.write("\n")
    _, report = train(cfg, ds, out_dir=out_dir)
    return report.to_dict()


def cmd_sweep(args) -> int:
    if args.repeats < 1:
        raise ConfigError("--repeats must be >= 1")
    section, key, cast = _SWEEP_PARAMS[args.param]
    try:
        values = [cast(v) for v in args.values.split(",") if v != ""]
    except ValueError:
        raise ConfigError(f"--values must be a comma list of {cast.__name__}s")
    if not values:
        raise ConfigError("--values is empty")
    doc = load_config_file(args.config) if args.config else {"schema_version": SCHEMA_VERSION}
    os.makedirs(args.out, exist_ok=True)
    workers = max(1, int(os.environ.get("NCC_THREADS", "1")))

    jobs = {}
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        for value in values:
            for rep in range(args.repeats):
                run_dir = os.path.join(args.out, f"{args.param}-{value}", f"rep{rep}")
                jobs[(value, rep)] = pool.submit(_one_sweep_run, doc, section,
                                                 key, value, rep, run_dir)
    rows = []
    for value in values:
        reports, failures = [], 0
        for rep in range(args.repeats):
            try:
                reports.append(jobs[(value, rep)].result())
            except Exception as err:
                failures += 1
                print(f"run {args.param}={value} rep={rep} failed: {err}",
                      file=sys.stderr)
        row = {"param": args.param, "value": value, "repeats": args.repeats,
               "completed": len(reports)}
        for metric in _SWEEP_METRICS:
            got = [r[metric] for r in reports if metric in r]
            row[f"{metric}_mean"] = f"{np.mean(got):.6g}" if got else ""
            row[f"{metric}_std"] = f"{np.std(got):.6g}" if got else ""
        rows.append(row)

    table = os.path.join(args.out, "sweep.csv")
    cols = ["param", "value", "repeats", "completed"] + [
        f"{m}_{s}" for m in _SWEEP_METRICS for s in ("mean", "std")]
    with open(table, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(str(row[c]) for c in cols) + "\n")
    print(f"wrote {len(rows)} rows to {table}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ncc",
                                     description="Deep clustering experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a synthetic mixture CSV")
    gen.add_argument("--classes", type=int, default=4)
    gen.add_argument("--dim", type=int, default=32)
    gen.add_argument("--kappa", type=float, default=50.0)
    gen.add_argument("--per-class", type=int, default=250)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--long-tail-ratio", type=float, default=None)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_gen_data)

    tr = sub.add_parser("train", help="run one training")
    tr.add_argument("--config", default=None)
    tr.add_argument("--out", default=None)
    tr.add_argument("--sigma", type=float, default=None)
    tr.add_argument("--lambda-pcl", type=float, default=None)
    tr.add_argument("--tau", type=float, default=None)
    tr.add_argument("--k", type=int, default=None)
    tr.add_argument("--r", type=int, default=None)
    tr.add_argument("--epochs", type=int, default=None)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--method", choices=METHODS, default=None)
    tr.add_argument("--classes", type=int, default=None)
    tr.add_argument("--dim", type=int, default=None)
    tr.add_argument("--kappa", type=float, default=None)
    tr.add_argument("--per-class", type=int, default=None)
    tr.add_argument("--data-seed", type=int, default=None)
    tr.add_argument("--long-tail-ratio", type=float, default=None)
    tr.add_argument("--data", default=None, help="train on an existing CSV")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="cluster an embeddings CSV and score it")
    ev.add_argument("--embeddings", required=True)
    ev.add_argument("--k", type=int, default=None)
    ev.add_argument("--seed", type=int, default=0)
    ev.set_defaults(func=cmd_eval)

    sw = sub.add_parser("sweep", help="repeat train over one parameter axis")
    sw.add_argument("--param", choices=sorted(_SWEEP_PARAMS), required=True)
    sw.add_argument("--values", required=True)
    sw.add_argument("--repeats", type=int, default=1)
    sw.add_argument("--config", default=None)
    sw.add_argument("--out", required=True)
    sw.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
