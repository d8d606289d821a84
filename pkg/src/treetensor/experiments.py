"""Multi-seed model comparisons with a JSON result cache."""
from __future__ import annotations

import hashlib
import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from . import datasets as ds
from .training import TrainConfig, build_model, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelSpec:
    aggregator: str
    hidden_dim: int
    rank: Optional[int] = None

    @property
    def name(self) -> str:
        tail = f",r={self.rank}" if self.rank is not None else ""
        return f"{self.aggregator}(c={self.hidden_dim}{tail})"


@dataclass
class ExperimentConfig:
    task: str
    models: list
    n_train: int
    n_val: int
    seeds: tuple = (0, 1, 2)
    data_seed: int = 0
    max_epochs: int = 30
    patience: int = 5
    l2_weight: float = 0.01
    gen: dict = field(default_factory=dict)

    def key(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def make_splits(task: str, n_train: int, n_val: int, data_seed: int = 0, **gen) -> tuple[list, list]:
    """Train and validation corpora from disjoint seed streams with no shared lines."""
    seen: set = set()
    train_set = ds.generate(task, ds.GenConfig(seed=data_seed, count=n_train, **gen), "train", seen)
    val_set = ds.generate(task, ds.GenConfig(seed=data_seed, count=n_val, **gen), "val", seen)
    return train_set, val_set


def summarize(accs: list[float]) -> tuple[float, float]:
    mean = statistics.fmean(accs)
    std = statistics.pstdev(accs) if len(accs) > 1 else 0.0
    return mean, std


def run_experiment(cfg: ExperimentConfig, cache: Optional[Path] = None, force: bool = False) -> dict:
    """Train every model for every seed; returns per-seed and mean/std validation accuracy.

    With ``cache`` set, a stored result with the same config key is reused unless ``force``.
    """
    if cache is not None and cache.exists() and not force:
        stored = json.loads(cache.read_text())
        if stored.get("key") == cfg.key():
            return stored
    train_set, val_set = make_splits(cfg.task, cfg.n_train, cfg.n_val, cfg.data_seed, **cfg.gen)
    out = {"key": cfg.key(), "config": json.loads(json.dumps(asdict(cfg), default=list)), "models": []}
    for spec in cfg.models:
        spec = ModelSpec(**spec) if isinstance(spec, dict) else spec
        runs = []
        for seed in cfg.seeds:
            tc = TrainConfig(
                task=cfg.task,
                aggregator=spec.aggregator,
                hidden_dim=spec.hidden_dim,
                rank=spec.rank,
                max_epochs=cfg.max_epochs,
                patience=cfg.patience,
                l2_weight=cfg.l2_weight,
                seed=seed,
            )
            t0 = time.perf_counter()
            model = build_model(tc)
            res = train(tc, train_set, val_set, model=model)
            runs.append(
                {
                    "seed": seed,
                    "val_accuracy": res.best_val_accuracy,
                    "best_epoch": res.best_epoch,
                    "epochs_run": res.epochs_run,
                    "wall_time_s": round(time.perf_counter() - t0, 1),
                }
            )
            log.info("%s seed %d: val_acc=%.4f", spec.name, seed, res.best_val_accuracy)
        mean, std = summarize([r["val_accuracy"] for r in runs])
        counts = model.param_counts()
        out["models"].append(
            {
                **asdict(spec),
                "name": spec.name,
                "param_count": counts["table"],
                "param_count_all": counts["all"],
                "runs": runs,
                "val_accuracy_mean": mean,
                "val_accuracy_std": std,
            }
        )
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        cache.write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    return out


def listops_comparison(**overrides) -> ExperimentConfig:
    base = dict(
        task="listops",
        models=[ModelSpec("hosvd", 20, 3), ModelSpec("sum", 25)],
        n_train=20000,
        n_val=2000,
        gen={"max_depth": 3},
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def lrt_comparison(**overrides) -> ExperimentConfig:
    base = dict(
        task="lrt",
        models=[ModelSpec("full", 10), ModelSpec("hosvd", 10, 7), ModelSpec("sum", 10)],
        n_train=10000,
        n_val=2000,
        gen={"max_operators": 4},
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def by_name(result: dict) -> dict:
    return {m["aggregator"]: m for m in result["models"]}
