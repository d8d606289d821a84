"""Command-line entry point: ``treetensor {gen,params,gradcheck,train,eval}``.

Settings for ``train`` and ``eval`` come from (lowest to highest precedence)
built-in defaults, a flat ``key = value`` file given with ``--config``,
``TREETENSOR_<KEY>`` environment variables and ``key=value`` overrides on the
command line.

Exit codes: 0 success, 1 usage or input error, 2 verification failure,
3 runtime or numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from . import datasets as ds
from . import training as tr
from .aggregators import ALL, TABLE, AggregatorKind, param_count
from .experiments import summarize
from .treelstm import Tree

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_RUNTIME = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4
ENV_PREFIX = "TREETENSOR_"

log = logging.getLogger("treetensor")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# ---------------------------------------------------------------------------
# settings

ALIASES = {"c": "hidden_dim", "r": "rank", "lambda": "l2_weight"}
TRAIN_KEYS = {f.name: f.type for f in fields(tr.TrainConfig)}
EXTRA_KEYS = {"train": str, "val": str, "out": str, "seeds": str, "csv": str, "data": str, "checkpoint": str}


def read_kv_file(path) -> dict:
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def parse_overrides(items) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def env_settings(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    return {k[len(ENV_PREFIX):].lower(): v for k, v in environ.items() if k.startswith(ENV_PREFIX) and k != ENV_PREFIX + "FORCE"}


def _coerce(key: str, value: str):
    if value.lower() in ("none", ""):
        return None
    typ = TRAIN_KEYS.get(key) or EXTRA_KEYS.get(key)
    typ = str(typ)
    if "bool" in typ:
        if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise UsageError(f"{key} must be a boolean")
        return value.lower() in ("true", "1", "yes")
    if "int" in typ:
        return int(value)
    if "float" in typ:
        return float(value)
    return value


def merge_settings(config_file: Optional[str], overrides, environ=None) -> dict:
    layers = [read_kv_file(config_file) if config_file else {}, env_settings(environ), parse_overrides(overrides)]
    merged: dict = {}
    for layer in layers:
        for k, v in layer.items():
            key = ALIASES.get(k, k)
            if key not in TRAIN_KEYS and key not in EXTRA_KEYS:
                raise UsageError(f"unknown setting {k!r}")
            try:
                merged[key] = _coerce(key, v)
            except ValueError:
                raise UsageError(f"bad value for {k}: {v!r}") from None
    return merged


def train_config(settings: dict, seed: Optional[int] = None) -> tr.TrainConfig:
    kw = {k: v for k, v in settings.items() if k in TRAIN_KEYS}
    if seed is not None:
        kw["seed"] = seed
    return tr.TrainConfig(**kw)


def parse_seeds(text) -> list[int]:
    if text is None:
        return [0]
    seeds = [int(s) for s in str(text).replace(",", " ").split()]
    if not seeds:
        raise UsageError("empty seed list")
    return seeds


def _need(settings: dict, key: str) -> str:
    if settings.get(key) is None:
        raise UsageError(f"missing setting {key!r}")
    return settings[key]


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    gen = dict(seed=args.seed)
    if args.task == "listops":
        gen["max_depth"] = args.max_depth
    else:
        gen["max_operators"] = args.max_operators
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seen: set = set()
    report = {}
    for split, count in (("train", args.train), ("val", args.val), ("test", args.test)):
        if count == 0:
            continue
        samples = ds.generate(args.task, ds.GenConfig(count=count, **gen), split, seen)
        bad = sum(not ds.oracle_ok(s) for s in samples)
        if bad:
            print(f"{split}: {bad} labels disagree with the oracle", file=sys.stderr)
            return EXIT_VERIFY
        ds.write_corpus(out / f"{split}.tsv", samples)
        report[split] = ds.corpus_stats(samples)
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_params(args) -> int:
    try:
        kind = AggregatorKind(args.aggregator, args.c, args.L, 0, args.r)
    except ValueError as e:
        raise UsageError(str(e)) from None
    print(f"table: {param_count(kind, TABLE)}")
    print(f"all-scalars: {param_count(kind, ALL)}")
    return EXIT_OK


def random_tree(rng: np.random.Generator, depth: int, L: int, operators, leaves) -> Tree:
    """Depth-``depth`` tree whose spine nodes all have exactly ``L`` children."""
    if depth == 0:
        return Tree(leaves[rng.integers(len(leaves))])
    kids = [random_tree(rng, depth - 1, L, operators, leaves)]
    kids += [random_tree(rng, int(rng.integers(0, depth)), L, operators, leaves) for _ in range(L - 1)]
    return Tree(operators[rng.integers(len(operators))], tuple(kids))


def gradcheck(
    aggregator: str, c: int, L: int, r: Optional[int] = None, depth: int = 3, task: Optional[str] = None,
    seed: int = 0, max_entries: Optional[int] = 60,
) -> float:
    """Finite-difference relative error of a small random model with its task head."""
    task = task or ("listops" if L == 5 else "lrt")
    cfg = tr.TrainConfig(task=task, aggregator=aggregator, hidden_dim=c, rank=r, context_size=L, seed=seed)
    model = tr.build_model(cfg)
    rng = np.random.default_rng([seed, 7])
    for p in model.store:  # non-zero biases so their gradients are exercised too
        p.value = p.value + rng.normal(scale=0.1, size=p.shape)
    ops = tr.TASKS[task]["operators"]
    if task == "listops":
        leaves = ds.DIGITS + (ds.MISSING,)
        samples = [ds.ListOpsSample(random_tree(rng, depth, L, ops, leaves), int(rng.integers(10)))]
    else:
        leaves = ds.VARIABLES
        left, right = (random_tree(rng, depth, L, ops, leaves) for _ in range(2))
        samples = [ds.LrtSample(left, right, ds.RELATIONS[int(rng.integers(7))])]

    def build(tape):
        return model.penalized_loss(tape, samples, cfg.l2_weight)[0]

    return ad.finite_diff_check(build, model.store, max_entries=max_entries, seed=seed)


def cmd_gradcheck(args) -> int:
    if (args.aggregator == "hosvd") != (args.r is not None):
        raise UsageError("--r is required for hosvd and only for hosvd")
    err = gradcheck(args.aggregator, args.c, args.L, args.r, args.depth, args.task, args.seed, args.max_entries)
    ok = err <= GRADCHECK_TOL
    print(f"max relative error {err:.3e} ({'pass' if ok else 'FAIL'}, tolerance {GRADCHECK_TOL:g})")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_train(args) -> int:
    settings = merge_settings(args.config, args.overrides)
    task = settings.get("task", "listops")
    train_set = ds.read_corpus(_need(settings, "train"), task)
    val_set = ds.read_corpus(_need(settings, "val"), task)
    out = Path(settings.get("out") or "runs")
    seeds = parse_seeds(settings.get("seeds", settings.get("seed")))
    deterministic = args.threads == 1
    accs = []
    for seed in seeds:
        cfg = train_config(settings, seed)
        res = tr.train(cfg, train_set, val_set, out_dir=out / f"seed{seed}", resume=args.resume,
                       deterministic=deterministic)
        accs.append(res.best_val_accuracy)
        print(f"seed {seed}: best val accuracy {res.best_val_accuracy:.4f} at epoch {res.best_epoch}")
    mean, std = summarize(accs)
    print(f"val accuracy {100 * mean:.2f} ({100 * std:.2f}) over {len(accs)} seeds")
    counts = tr.build_model(cfg).param_counts()
    row = {
        "model": cfg.aggregator, "c": cfg.hidden_dim, "r": "" if cfg.rank is None else cfg.rank,
        "param_count": counts["table"], "val_accuracy_mean": f"{mean:.6f}", "val_accuracy_std": f"{std:.6f}",
    }
    csv_path = Path(settings.get("csv") or out / "summary.csv")
    new = not csv_path.exists()
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(row))
        if new:
            w.writeheader()
        w.writerow(row)
    return EXIT_OK


def cmd_eval(args) -> int:
    settings = merge_settings(args.config, args.overrides)
    ck = tr.load_checkpoint(_need(settings, "checkpoint"))
    stored = ck["config"]
    for key, value in settings.items():
        if key in TRAIN_KEYS and key not in ("seed", "max_epochs", "patience") and stored.get(key) != value:
            print(f"config mismatch: {key}={value!r} but checkpoint has {stored.get(key)!r}", file=sys.stderr)
            return EXIT_USAGE
    model = tr.model_from_checkpoint(ck)
    samples = ds.read_corpus(_need(settings, "data"), stored["task"])
    ev = tr.evaluate(model, samples)
    print(json.dumps({"accuracy": ev.accuracy, "loss": ev.loss, "n": len(samples), "epoch": ck["meta"]["epoch"]}))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="treetensor", description="Tensor-aggregator Tree-LSTMs on ListOps and logical relations.")
    ap.add_argument("--threads", type=int, default=1, help="BLAS threads; 1 gives bitwise-reproducible runs")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate train/val/test corpora")
    g.add_argument("task", choices=["listops", "lrt"])
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--train", type=int)
    g.add_argument("--val", type=int, default=2000)
    g.add_argument("--test", type=int, default=2000)
    g.add_argument("--max-depth", type=int, default=3)
    g.add_argument("--max-operators", type=int, default=4)
    g.set_defaults(func=cmd_gen)

    p = sub.add_parser("params", help="aggregator parameter counts under both conventions")
    p.add_argument("--aggregator", required=True, choices=["sum", "full", "hosvd"])
    p.add_argument("--c", type=int, required=True)
    p.add_argument("--L", type=int, required=True)
    p.add_argument("--r", type=int)
    p.set_defaults(func=cmd_params)

    q = sub.add_parser("gradcheck", help="finite-difference check of a small random model")
    q.add_argument("--aggregator", required=True, choices=["sum", "full", "hosvd"])
    q.add_argument("--c", type=int, required=True)
    q.add_argument("--L", type=int, default=2)
    q.add_argument("--r", type=int)
    q.add_argument("--depth", type=int, default=3)
    q.add_argument("--task", choices=["listops", "lrt"])
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--max-entries", type=int, default=60, help="entries sampled per parameter; 0 checks all")
    q.set_defaults(func=cmd_gradcheck)

    for name, func, text in (("train", cmd_train, "train one model per seed"), ("eval", cmd_eval, "evaluate a checkpoint")):
        t = sub.add_parser(name, help=text)
        t.add_argument("--config", help="flat key = value settings file")
        t.add_argument("overrides", nargs="*", metavar="key=value")
        if name == "train":
            t.add_argument("--resume", action="store_true", help="continue each seed from its last checkpoint")
        t.set_defaults(func=func)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads < 1:
        print("--threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    if args.command == "gen" and args.train is None:
        args.train = 20000 if args.task == "listops" else 10000
    if getattr(args, "max_entries", None) == 0:
        args.max_entries = None
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (UsageError, FileNotFoundError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, ArithmeticError, RuntimeError, OSError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
