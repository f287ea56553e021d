"""Command line front end: ``mst <command> [flags]``.

Settings are resolved as defaults, then flags, then the ``--config`` file
(INI; keys from ``[common]`` and the section named after the command), so a
config file overrides flags. Every artifact is written via a temporary file
and a rename.
"""
from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
import time
from dataclasses import fields

import numpy as np

from . import serial
from .benchmarks import ClusteredModel, tune_k
from .datagen import GENERATORS, gen_cmt_truth, load_truth
from .ingest import FORMATS, export, ingest
from .leaves import FitConfig
from .metrics import evaluate as evaluate_metrics, predict as predict_rows
from .pruning import PruneConfig, prune
from .trainer import TrainConfig, grow
from .tree import Tree

log = logging.getLogger("mstree")

COMMANDS = ("simulate", "train", "prune", "predict", "evaluate", "inspect", "bench")

DEFAULTS = {
    "n": 25000,
    "segments": 8,
    "truth": "cmt",
    "min_leaf": 100,
    "q_split": 10,
    "workers": 1,
    "leaf_family": "mnl",
    "metric": ["mse"],
    "prune_metric": "loss",
    "render": "text",
    "filter": [],
    "categorical": [],
}

# flag dest -> TrainConfig field
TRAIN_FLAGS = {"max_depth": "max_depth", "min_leaf": "min_leaf_size", "q_split": "q_split",
               "workers": "worker_count", "leaf_family": "leaf_family", "seed": "seed"}


class CliError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mst", description="Market segmentation trees.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="INI file; its values override flags")
    p.add_argument("--train")
    p.add_argument("--validation")
    p.add_argument("--test")
    p.add_argument("--model")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int, help="rows per split for simulate")
    p.add_argument("--segments", type=int, help="segments for the auction generator")
    p.add_argument("--max-depth", dest="max_depth", type=int)
    p.add_argument("--min-leaf", dest="min_leaf", type=int)
    p.add_argument("--q-split", dest="q_split", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--leaf-family", dest="leaf_family",
                   choices=["mnl", "mnl-option-specific", "isotonic", "logistic", "constant"])
    p.add_argument("--truth", help="simulate: generator; evaluate: ground-truth file")
    p.add_argument("--metric", action="append", choices=["mae", "mse", "nll", "auc"])
    p.add_argument("--prune-metric", dest="prune_metric", choices=["loss", "mse", "nll"])
    p.add_argument("--kmax", type=int, help="train a K-means benchmark with K in 1..kmax")
    p.add_argument("--filter", action="append", help="ingestion filter such as price<=4000")
    p.add_argument("--format", dest="data_format", choices=FORMATS)
    p.add_argument("--categorical", action="append", help="context column to treat as categorical")
    p.add_argument("--render", choices=["text", "dot"])
    p.add_argument("--include-no-purchase", dest="include_no_purchase", action="store_true",
                   default=None)
    return p


def _read_config(path: str, command: str) -> dict:
    if not os.path.exists(path):
        raise CliError(f"config file {path!r} not found")
    cp = configparser.ConfigParser()
    cp.optionxform = str
    try:
        cp.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise CliError(f"bad config file: {exc}") from None
    out = {}
    for section in ("common", command):
        if cp.has_section(section):
            out.update(cp.items(section))
    return out


_LIST_KEYS = {"metric", "filter", "categorical"}
_INT_KEYS = {"seed", "n", "segments", "max_depth", "min_leaf", "q_split", "workers", "kmax"}


def resolve(args: argparse.Namespace) -> tuple[dict, dict]:
    """Merge defaults, flags and config file; returns (settings, train-config overrides)."""
    settings = dict(DEFAULTS)
    for key, value in vars(args).items():
        if value is not None and key != "config":
            settings[key] = value
    train_keys = {f.name for f in fields(TrainConfig)} | {f.name for f in fields(FitConfig)}
    train_overrides = {}
    if args.config:
        for key, raw in _read_config(args.config, args.command).items():
            key = key.replace("-", "_")
            if key in train_keys:
                train_overrides[key] = raw
            elif key in _LIST_KEYS:
                settings[key] = [v.strip() for v in raw.split(",") if v.strip()]
            elif key in _INT_KEYS:
                settings[key] = None if raw.strip().lower() in ("", "none") else int(raw)
            elif key == "include_no_purchase":
                settings[key] = raw.strip().lower() in ("1", "true", "yes", "on")
            elif key in settings or key in vars(args):
                settings[key] = raw
            else:
                raise CliError(f"unknown config key {key!r}")
    return settings, train_overrides


def train_config(settings: dict, overrides: dict) -> TrainConfig:
    values = {}
    for flag, name in TRAIN_FLAGS.items():
        if settings.get(flag) is not None:
            values[name] = settings[flag]
    values.update(overrides)
    return TrainConfig.from_mapping(values)


def _need(settings, *keys):
    for key in keys:
        if not settings.get(key):
            raise CliError(f"--{key.replace('_', '-')} is required for {settings['command']}")
        if key in ("train", "validation", "test", "model") and not os.path.exists(settings[key]):
            raise CliError(f"{key} file {settings[key]!r} not found")


def _load(settings, key, schema=None):
    return ingest(settings[key], settings.get("data_format"), settings.get("filter") or (),
                  settings.get("categorical") or (), schema=schema)


def load_model(path):
    with open(path, "rb") as fh:
        doc = serial.loads(fh.read())
    fmt = doc.get("format")
    if fmt == "mst-v1":
        return Tree.from_dict(doc)
    if fmt == "mstkm-v1":
        return ClusteredModel.from_dict(doc)
    raise serial.DecodeError(f"unsupported model format {fmt!r}")


# -- commands ---------------------------------------------------------------------


def cmd_simulate(s, overrides):
    _need(s, "out")
    truth_name = s["truth"]
    if truth_name not in GENERATORS:
        raise CliError(f"--truth must be one of {sorted(GENERATORS)} for simulate")
    n = int(s["n"])
    gen = GENERATORS[truth_name]
    if truth_name == "auction":
        data, truth = gen(s["seed"], 3 * n, int(s["segments"]))
    else:
        data, truth = gen(s["seed"], 3 * n)
    out = s["out"]
    os.makedirs(out, exist_ok=True)
    for name, part in zip(("train", "validation", "test"), data.split(n, n, n)):
        export(part, os.path.join(out, f"{name}.csv"))
    truth.save(os.path.join(out, "truth.json"))
    print(f"wrote {out}/train.csv, validation.csv, test.csv and truth.json ({n} rows each)")


class _ListHandler(logging.Handler):
    def __init__(self):
        super().__init__()
        self.lines = []

    def emit(self, record):
        self.lines.append(record.getMessage())


def cmd_train(s, overrides):
    _need(s, "train", "out")
    data = _load(s, "train")
    if s.get("kmax"):
        _need(s, "validation")
        val = _load(s, "validation", data.schema)
        cfg = train_config(s, overrides)
        model = tune_k(data, val, int(s["kmax"]), cfg.leaf_family, cfg.fit_config, seed=cfg.seed)
        model.save(s["out"])
        print(f"selected K={model.k}; wrote {s['out']}")
        return
    cfg = train_config(s, overrides)
    handler = _ListHandler()
    logger = logging.getLogger("mstree.trainer")
    level = logger.level
    logger.addHandler(handler)
    logger.setLevel(logging.INFO)
    try:
        tree = grow(data, cfg)
    finally:
        logger.removeHandler(handler)
        logger.setLevel(level)
    tree.save(s["out"])
    serial.atomic_write(s["out"] + ".log", "\n".join(handler.lines) + "\n")
    print(f"trained tree: depth={tree.depth} leaves={tree.n_leaves}; wrote {s['out']}")


def cmd_prune(s, overrides):
    _need(s, "model", "validation", "out")
    tree = load_model(s["model"])
    if not isinstance(tree, Tree):
        raise CliError("only tree models can be pruned")
    val = _load(s, "validation", tree.schema)
    train = _load(s, "train", tree.schema) if s.get("train") else None
    cfg = train_config(s, overrides) if overrides else TrainConfig()
    pruned = prune(tree, val, PruneConfig(s["prune_metric"], cfg.fit_config), train)
    pruned.save(s["out"])
    path = pruned.stats["prune"]
    rows = ["alpha\tleaves\tvalidation"] + [
        f"{a!r}\t{k}\t{v!r}" for a, k, v in zip(path["alphas"], path["leaves"], path["validation"])
    ]
    serial.atomic_write(s["out"] + ".path.tsv", "\n".join(rows) + "\n")
    print(f"pruned tree: depth={pruned.depth} leaves={pruned.n_leaves}; wrote {s['out']}")


def _prob_table(probs: np.ndarray, kind: str) -> str:
    if kind == "auction":
        lines = ["row,p_win"] + [f"{i},{p!r}" for i, p in enumerate(probs.tolist())]
    else:
        header = ["row", "p_none"] + [f"p_{h}" for h in range(1, probs.shape[1])]
        lines = [",".join(header)]
        for i, row in enumerate(probs.tolist()):
            lines.append(str(i) + "," + ",".join(repr(v) for v in row))
    return "\n".join(lines) + "\n"


def cmd_predict(s, overrides):
    _need(s, "model", "test", "out")
    model = load_model(s["model"])
    data = _load(s, "test", model.schema)
    serial.atomic_write(s["out"], _prob_table(predict_rows(model, data), data.kind))
    print(f"wrote {len(data)} predictions to {s['out']}")


def cmd_evaluate(s, overrides):
    _need(s, "model", "test", "out")
    model = load_model(s["model"])
    data = _load(s, "test", model.schema)
    metrics = list(dict.fromkeys(s["metric"]))
    truth = None
    if "mae" in metrics:
        if not s.get("truth") or not os.path.exists(s["truth"]):
            raise CliError("--truth must name a ground-truth file for the mae metric")
        truth = load_truth(s["truth"])
    router = model if isinstance(model, Tree) else None
    report = evaluate_metrics(model, data, metrics, truth=truth, router=router,
                              include_no_purchase=bool(s.get("include_no_purchase")))
    out = s["out"]
    os.makedirs(out, exist_ok=True)
    serial.atomic_write(os.path.join(out, "report.json"), report.dumps())
    serial.atomic_write(os.path.join(out, "report.tsv"), report.to_tsv())
    sys.stdout.write(report.to_tsv())


def cmd_inspect(s, overrides):
    _need(s, "model")
    model = load_model(s["model"])
    if isinstance(model, Tree):
        text = model.describe(s["render"])
    else:
        text = (f"K-means benchmark: family={model.family} K={model.k}\n"
                + "".join(f"cluster {c}: {m.summary()}\n" for c, m in enumerate(model.models)))
    if s.get("out"):
        serial.atomic_write(s["out"], text)
    else:
        sys.stdout.write(text)


def cmd_bench(s, overrides):
    """Wall time of ``grow`` on simulated CMT data over a small (n, D, Q) grid."""
    sizes = [int(s["n"])] if "n" in s.get("_explicit", ()) else [2000, 4000, 8000]
    depths = [s["max_depth"]] if s.get("max_depth") is not None else [1, 2, 3]
    workers = sorted({1, int(s["workers"])})
    rows = ["n\tm\tD\tQ\tleaves\tseconds"]
    for n in sizes:
        seed = s.get("seed") or 0
        data, _ = gen_cmt_truth(seed, n)
        for depth in depths:
            for q in workers:
                cfg = TrainConfig(max_depth=depth, min_leaf_size=int(s["min_leaf"]),
                                  q_split=int(s["q_split"]), worker_count=q, seed=seed)
                start = time.perf_counter()
                tree = grow(data, cfg)
                rows.append(f"{n}\t{len(data.schema)}\t{depth}\t{q}\t{tree.n_leaves}\t"
                            f"{time.perf_counter() - start:.3f}")
    text = "\n".join(rows) + "\n"
    if s.get("out"):
        serial.atomic_write(s["out"], text)
    sys.stdout.write(text)


HANDLERS = {
    "simulate": cmd_simulate, "train": cmd_train, "prune": cmd_prune, "predict": cmd_predict,
    "evaluate": cmd_evaluate, "inspect": cmd_inspect, "bench": cmd_bench,
}


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        settings, overrides = resolve(args)
        settings["_explicit"] = {k for k, v in vars(args).items() if v is not None}
        if args.command in ("simulate", "train") and settings.get("seed") is None:
            raise CliError("--seed is required")
        HANDLERS[args.command](settings, overrides)
    except (CliError, ValueError, KeyError, OSError, serial.DecodeError) as exc:
        print(f"mst {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
