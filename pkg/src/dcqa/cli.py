"""Command-line entry point: ``dcqa <command> ...``.

Exit codes: 0 success, 2 usage, 3 invalid config, 4 data error, 5 runtime
failure.
"""

from __future__ import annotations

import argparse
import copy
import datetime as _dt
import json
import logging
import os
import platform
import re
import subprocess
import sys
import time
from pathlib import Path

import yaml

from . import __version__
from .analysis import (
    VARIANT_FLAGS,
    count_parameters,
    export_heatmap,
    run_ablation,
    stage_triplet,
    token_weights,
)
from .data import (
    DataError,
    DatasetSplits,
    DatasetTag,
    load_splits,
    make_synthetic_dataset,
    prepare_splits,
    save_splits,
)
from .estimator import DCQAClassifier
from .model import ConfigError, check_ablation, parse_ablation
from .training import (
    BATCH_SIZE_GRID,
    LEARNING_RATE_GRID,
    TrainConfig,
    format_mean_std,
    grid_search,
    multi_seed_run,
    train,
)

logger = logging.getLogger("dcqa")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4, 5
DATA_DIR_ENV = "DCQA_DATA_DIR"

DEFAULT_CONFIG = {
    "dataset": {
        "tag": "SYNTHETIC",
        "data_dir": None,
        "prepared_dir": None,
        "dev_seed": 1,
        "synthetic": {"n_examples": 200, "n_choices": 5, "vocab_size": 64, "seed": 1},
    },
    "backend": {"name": "reference", "d": 16, "max_seq_len": 64, "clue_len": 4,
                "vocab_size": None, "model_dir": None},
    "model": {"mlp_hidden": None, "ablation": [], "share_choice_weights": True,
              "attn_init_scale": 0.0},
    "training": {"learning_rate": 5e-4, "batch_size": 16, "max_epochs": 50,
                 "early_stop_patience": 15, "weight_decay": 0.01, "seed": 1,
                 "dtype": "float32", "seeds": [1, 10, 20],
                 "lr_grid": list(LEARNING_RATE_GRID), "batch_grid": list(BATCH_SIZE_GRID)},
    "output": {"run_dir": "runs", "formats": ["json"]},
}


class _Loader(yaml.SafeLoader):
    pass


# PyYAML follows YAML 1.1, where "1e-4" is a string; accept it as a float.
_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:\d+\.?\d*|\.\d+)[eE][-+]?\d+$"),
    list("-+0123456789."),
)


def _yaml_load(text: str):
    return yaml.load(text, Loader=_Loader)


class ConfigValidationError(Exception):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

def _merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in (update or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def apply_override(config: dict, assignment: str) -> None:
    """Apply ``section.key=value``; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigValidationError([f"override {assignment!r} is not of the form key=value"])
    path, raw = assignment.split("=", 1)
    keys = path.strip().split(".")
    node = config
    for key in keys[:-1]:
        if not isinstance(node.get(key), dict):
            raise ConfigValidationError([f"override {path!r}: {key!r} is not a section"])
        node = node[key]
    node[keys[-1]] = _yaml_load(raw)


def load_config(path: str | None, overrides=()) -> dict:
    raw = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigValidationError([f"cannot read config {path}: {exc}"]) from exc
        try:
            raw = _yaml_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigValidationError([f"config {path} is not valid YAML/JSON: {exc}"]) from exc
        if not isinstance(raw, dict):
            raise ConfigValidationError([f"config {path} must be a mapping"])
    config = _merge(DEFAULT_CONFIG, raw)
    for assignment in overrides:
        apply_override(config, assignment)
    if config["dataset"].get("data_dir") is None and os.environ.get(DATA_DIR_ENV):
        config["dataset"]["data_dir"] = os.environ[DATA_DIR_ENV]
    validate_config(config)
    return config


def validate_config(config: dict) -> None:
    problems = []
    ds, be, mo, tr = config["dataset"], config["backend"], config["model"], config["training"]
    try:
        tag = DatasetTag.parse(ds["tag"])
    except ValueError as exc:
        problems.append(str(exc))
        tag = None
    if tag is not None and tag is not DatasetTag.SYNTHETIC and not ds.get("prepared_dir"):
        if not ds.get("data_dir"):
            problems.append(f"dataset.data_dir is required for {tag.value} (or set {DATA_DIR_ENV})")
        elif not Path(ds["data_dir"]).is_dir():
            problems.append(f"dataset.data_dir {ds['data_dir']} does not exist")
    if ds.get("prepared_dir") and not Path(ds["prepared_dir"]).is_dir():
        problems.append(f"dataset.prepared_dir {ds['prepared_dir']} does not exist")

    try:
        check_ablation(parse_ablation(mo.get("ablation") or []))
    except ConfigError as exc:
        problems.append(str(exc))
    if be["name"] != "reference" and not (be.get("model_dir") and Path(be["model_dir"]).is_dir()):
        problems.append(f"backend {be['name']!r} needs an existing backend.model_dir")
    for section, key in [("backend", "d"), ("backend", "max_seq_len"), ("backend", "clue_len"),
                         ("training", "batch_size"), ("training", "max_epochs"),
                         ("training", "early_stop_patience")]:
        value = config[section][key]
        if not isinstance(value, int) or value < 1:
            problems.append(f"{section}.{key} must be a positive integer, got {value!r}")
    if not isinstance(tr["learning_rate"], (int, float)) or tr["learning_rate"] <= 0:
        problems.append("training.learning_rate must be positive")
    if (isinstance(tr["early_stop_patience"], int) and isinstance(tr["max_epochs"], int)
            and tr["early_stop_patience"] > tr["max_epochs"]):
        problems.append("training.early_stop_patience cannot exceed training.max_epochs")
    if tr["dtype"] not in ("float32", "float64"):
        problems.append("training.dtype must be float32 or float64")
    if problems:
        raise ConfigValidationError(problems)


def train_config(config: dict, seed: int | None = None) -> TrainConfig:
    tr = config["training"]
    return TrainConfig(learning_rate=float(tr["learning_rate"]), batch_size=tr["batch_size"],
                       max_epochs=tr["max_epochs"], early_stop_patience=tr["early_stop_patience"],
                       weight_decay=float(tr["weight_decay"]),
                       seed=tr["seed"] if seed is None else seed,
                       dataset_tag=DatasetTag.parse(config["dataset"]["tag"]).value,
                       backend=config["backend"]["name"])


def model_params(config: dict) -> dict:
    be, mo = config["backend"], config["model"]
    return {"hidden_dim": be["d"], "max_seq_len": be["max_seq_len"], "clue_len": be["clue_len"],
            "vocab_size": be.get("vocab_size"), "model_dir": be.get("model_dir"),
            "mlp_hidden": mo.get("mlp_hidden"), "ablation": list(mo.get("ablation") or []),
            "share_choice_weights": mo.get("share_choice_weights", True),
            "attn_init_scale": mo.get("attn_init_scale", 0.0),
            "dtype": config["training"]["dtype"]}


def load_config_splits(config: dict) -> DatasetSplits:
    ds = config["dataset"]
    tag = DatasetTag.parse(ds["tag"])
    if ds.get("prepared_dir"):
        return load_splits(ds["prepared_dir"])
    if tag is DatasetTag.SYNTHETIC:
        syn = ds["synthetic"]
        return make_synthetic_dataset(syn["n_examples"], syn["n_choices"], syn["vocab_size"], syn["seed"])
    return prepare_splits(tag, ds["data_dir"], ds.get("dev_seed", 1))


def variant_name(flags) -> str:
    flags = parse_ablation(flags)
    for name, vflags in VARIANT_FLAGS.items():
        if vflags == flags:
            return name
    return "+".join(sorted(f.value for f in flags))


def run_directory(config: dict, seed, root: str | None = None) -> Path:
    root = Path(root or config["output"]["run_dir"])
    return (root / DatasetTag.parse(config["dataset"]["tag"]).value / config["backend"]["name"]
            / variant_name(config["model"].get("ablation")) / str(seed))


def _code_version() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0:
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(out_dir: Path, command: str, argv, config: dict | None, seed, started: float,
                   extra: dict | None = None) -> Path:
    import torch

    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "code_version": _code_version(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        "started_at": _dt.datetime.fromtimestamp(started).isoformat(timespec="seconds"),
        "wall_time_sec": round(time.time() - started, 3),
    }
    manifest.update(extra or {})
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=str))
    return path


def _append_jsonl(path: Path, record: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, default=str) + "\n")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_prepare_data(args, argv, started) -> int:
    tag = DatasetTag.parse(args.dataset)
    if tag is DatasetTag.SYNTHETIC:
        splits = make_synthetic_dataset(args.n_examples, args.n_choices, args.vocab_size, args.seed)
    else:
        data_dir = args.data_dir or os.environ.get(DATA_DIR_ENV)
        if not data_dir:
            raise ConfigValidationError([f"--data-dir is required (or set {DATA_DIR_ENV})"])
        splits = prepare_splits(tag, data_dir, args.seed)
    out = Path(args.out)
    save_splits(splits, out)
    sizes = dict(zip(("train", "dev", "test"), splits.sizes()))
    write_manifest(out, "prepare-data", argv, None, args.seed, started,
                   {"dataset": tag.value, "sizes": sizes, "provenance": splits.provenance.value})
    print(f"{tag.value}: train {sizes['train']}  dev {sizes['dev']}  test {sizes['test']} -> {out}")
    return EXIT_OK


def cmd_train(args, argv, started) -> int:
    config = load_config(args.config, args.set)
    seed = args.seed if args.seed is not None else config["training"]["seed"]
    config["training"]["seed"] = seed
    splits = load_config_splits(config)
    run_dir = run_directory(config, seed, args.out)
    tcfg = train_config(config, seed)
    result, clf = train(tcfg, splits, model_params(config))
    clf.save(run_dir / "best.pt", meta={"experiment_config": config, "result": result.to_record()})
    result.checkpoint = str(run_dir / "best.pt")
    (run_dir / "result.jsonl").write_text(json.dumps(result.to_record()) + "\n")
    write_manifest(run_dir, "train", argv, config, seed, started)
    print(f"best dev {result.best_dev_accuracy:.4f} (epoch {result.best_epoch}/{result.epochs_run})  "
          f"test {result.test_accuracy if result.test_accuracy is None else f'{result.test_accuracy:.4f}'}"
          f"  -> {run_dir}")
    return EXIT_OK


def _seed_list(text: str | None, config: dict) -> list[int]:
    if text is None:
        return [int(s) for s in config["training"]["seeds"]]
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigValidationError([f"--seeds must be comma-separated integers, got {text!r}"]) from None


def cmd_multi_seed(args, argv, started) -> int:
    config = load_config(args.config, args.set)
    seeds = _seed_list(args.seeds, config)
    splits = load_config_splits(config)
    root = run_directory(config, "multi-seed", args.out)
    outcome = multi_seed_run(train_config(config), seeds, splits, model_params(config), out_dir=root,
                             meta={"experiment_config": config})
    for run in outcome.runs:
        _append_jsonl(root / "results.jsonl", run.to_record())
    _append_jsonl(root / "results.jsonl", {"summary": outcome.to_record()})
    write_manifest(root, "multi-seed", argv, config, seeds, started)
    cells = outcome.formatted()
    print(f"seeds {seeds}: dev {cells.get('dev', '-')}  test {cells.get('test', '-')}")
    for seed, err in outcome.failures.items():
        print(f"seed {seed} FAILED: {err}")
    return EXIT_RUNTIME if outcome.failed else EXIT_OK


def cmd_grid_search(args, argv, started) -> int:
    config = load_config(args.config, args.set)
    splits = load_config_splits(config)
    tr = config["training"]
    result = grid_search(train_config(config), splits, tr["lr_grid"], tr["batch_grid"], model_params(config))
    root = run_directory(config, "grid-search", args.out)
    for row in result.table:
        _append_jsonl(root / "grid.jsonl", row)
    write_manifest(root, "grid-search", argv, config, tr["seed"], started,
                   {"best": {"learning_rate": result.learning_rate, "batch_size": result.batch_size}})
    print(f"{'lr':>8} {'batch':>6} {'dev':>8}")
    for row in result.table:
        dev = "-" if row["dev_accuracy"] is None else f"{row['dev_accuracy']:.4f}"
        print(f"{row['learning_rate']:>8g} {row['batch_size']:>6} {dev:>8}")
    print(f"best: lr {result.learning_rate:g}, batch {result.batch_size}")
    return EXIT_OK


def _checkpoint_config(clf: DCQAClassifier, args) -> dict:
    config = clf.checkpoint_meta_.get("experiment_config")
    if getattr(args, "config", None):
        config = load_config(args.config, getattr(args, "set", ()))
    if config is None:
        raise ConfigValidationError(["checkpoint carries no experiment config; pass --config"])
    return config


def cmd_eval(args, argv, started) -> int:
    clf = DCQAClassifier.load(args.checkpoint)
    config = _checkpoint_config(clf, args)
    split = load_config_splits(config)[args.split]
    if not split:
        raise DataError(f"split {args.split!r} is empty")
    acc = clf.score(split)
    record = {"checkpoint": args.checkpoint, "split": args.split, "accuracy": acc, "n": len(split)}
    out_dir = Path(args.out) if args.out else Path(args.checkpoint).parent
    _append_jsonl(out_dir / "eval.jsonl", record)
    print(f"{args.split} accuracy {acc:.4f} ({len(split)} examples)")
    return EXIT_OK


def cmd_ablate(args, argv, started) -> int:
    config = load_config(args.config, args.set)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    unknown = [v for v in variants if v not in VARIANT_FLAGS]
    if unknown:
        raise ConfigValidationError([f"unknown variants {unknown}; expected from {list(VARIANT_FLAGS)}"])
    seeds = _seed_list(args.seeds, config)
    splits = load_config_splits(config)
    root = Path(args.out or config["output"]["run_dir"]) / DatasetTag.parse(config["dataset"]["tag"]).value \
        / config["backend"]["name"] / "ablation"
    params = model_params(config)
    report = run_ablation(train_config(config), variants, seeds, splits, params, out_dir=root,
                          meta={"experiment_config": config})
    for record in report.to_records():
        _append_jsonl(root / "ablation.jsonl", record)
    (root / "ablation.txt").write_text(report.table() + "\n")
    write_manifest(root, "ablate", argv, config, seeds, started, {"variants": variants})
    print(report.table())
    return EXIT_OK


def cmd_visualize(args, argv, started) -> int:
    clf = DCQAClassifier.load(args.checkpoint)
    config = _checkpoint_config(clf, args)
    splits = load_config_splits(config)
    example = next((ex for name in ("dev", "test", "train") for ex in splits[name]
                    if ex.id == args.example_id), None)
    if example is None:
        raise DataError(f"example {args.example_id!r} not found in any split")
    if args.stages:
        data = stage_triplet(clf, example)
    else:
        inter = clf.forward_details(example).intermediates
        data = token_weights(inter["Q"][0], inter["A"][0], inter["Q_mask"][0], inter["A_mask"][0],
                             clf.model_.backend.tokens(example.question))
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"heatmap-{example.id}.{args.format}"
    export_heatmap(data, out, args.format, choices=example.choices)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_count_params(args, argv, started) -> int:
    if args.checkpoint:
        model = DCQAClassifier.load(args.checkpoint).model_
    else:
        config = load_config(args.config, args.set)
        clf = DCQAClassifier(**model_params(config), random_state=config["training"]["seed"])
        model = clf.build_model(load_config_splits(config).train)
    count = count_parameters(model)
    for name, k in sorted(count.by_module.items()):
        print(f"{name:<12} {k}")
    print(f"total {count.total} ({count.millions}M)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcqa", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, required=True):
        p.add_argument("--config", required=required)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path override, e.g. training.batch_size=8")
        return p

    p = sub.add_parser("prepare-data", help="convert official files to the unified format")
    p.add_argument("--dataset", required=True)
    p.add_argument("--data-dir")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--n-examples", type=int, default=200)
    p.add_argument("--n-choices", type=int, default=5)
    p.add_argument("--vocab-size", type=int, default=64)
    p.set_defaults(func=cmd_prepare_data)

    p = with_config(sub.add_parser("train", help="one seeded training run"))
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = with_config(sub.add_parser("multi-seed", help="repeat training over seeds, report mean(±std)"))
    p.add_argument("--seeds")
    p.add_argument("--out")
    p.set_defaults(func=cmd_multi_seed)

    p = with_config(sub.add_parser("grid-search", help="learning-rate x batch-size search"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_grid_search)

    p = with_config(sub.add_parser("eval", help="accuracy of a checkpoint on one split"), required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "dev", "test"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = with_config(sub.add_parser("ablate", help="train every ablation variant"))
    p.add_argument("--variants", default=",".join(VARIANT_FLAGS))
    p.add_argument("--seeds")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = with_config(sub.add_parser("visualize", help="export question-token weight heatmaps"), required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--example-id", required=True)
    p.add_argument("--stages", action="store_true", help="export the three-stage triplet")
    p.add_argument("--format", default="json", choices=["json", "csv", "png"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_visualize)

    p = with_config(sub.add_parser("count-params", help="count learnable parameters"), required=False)
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_count_params)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        return args.func(args, argv, started)
    except (ConfigValidationError, ConfigError) as exc:
        problems = getattr(exc, "problems", [str(exc)])
        print("invalid configuration:", file=sys.stderr)
        for problem in problems:
            print(f"  - {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        logger.debug("run failed", exc_info=True)
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
