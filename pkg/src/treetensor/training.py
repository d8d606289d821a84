"""Model assembly, AdaDelta, the training loop, evaluation and checkpoints."""
from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import datasets as ds
from .aggregators import ALL, TABLE, param_count
from .treelstm import CellBank, CellConfig, ListOpsHead, LrtHead, encode_forest

log = logging.getLogger(__name__)

TASKS = {
    "listops": dict(context_size=5, operators=ds.LISTOPS_OPS, leaf_dim=10, head_width=20),
    "lrt": dict(context_size=2, operators=("and", "or", "not"), leaf_dim=6, head_width=32),
}


@dataclass
class TrainConfig:
    task: str = "listops"
    aggregator: str = "hosvd"
    hidden_dim: int = 20
    rank: Optional[int] = None
    context_size: Optional[int] = None
    head_width: Optional[int] = None
    update_activation: str = "tanh"
    batch_size: int = 25
    l2_weight: float = 0.01
    l2_biases: bool = True
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0
    rho: float = 0.95
    eps: float = 1e-6
    eval_batch_size: int = 500

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.l2_weight < 0:
            raise ValueError("l2_weight must be >= 0")
        if (self.aggregator == "hosvd") != (self.rank is not None):
            raise ValueError("rank is required for hosvd and only for hosvd")
        if self.context_size is None:
            self.context_size = TASKS[self.task]["context_size"]
        if self.head_width is None:
            self.head_width = TASKS[self.task]["head_width"]


# ---------------------------------------------------------------------------
# model


class Model:
    """Tree-LSTM encoder plus the task's classification head."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        spec = TASKS[cfg.task]
        self.store = ad.ParameterStore()
        self.bank = CellBank(
            CellConfig(
                cfg.aggregator,
                cfg.hidden_dim,
                cfg.context_size,
                spec["leaf_dim"],
                spec["operators"],
                cfg.rank,
                cfg.update_activation,
            ),
            self.store,
        )
        head_cls = ListOpsHead if cfg.task == "listops" else LrtHead
        self.head = head_cls(self.store, cfg.hidden_dim, cfg.head_width)
        self.fan_ins = {**self.bank.fan_ins, **self.head.fan_ins}
        self.n_classes = head_cls.n_classes

    def leaf_vector(self, token: str) -> np.ndarray:
        return ds.encode_leaf(self.cfg.task, token)

    def logits_node(self, tape: ad.Tape, samples: Sequence[ds.Sample]) -> ad.Node:
        trees = [t for s in samples for t in ds.trees_of(s)]
        h, _ = encode_forest(tape, self.bank, trees, self.leaf_vector)
        if self.cfg.task == "listops":
            return self.head.record(tape, h)
        n = len(samples)
        left = ad.gather([h], np.arange(0, 2 * n, 2))
        right = ad.gather([h], np.arange(1, 2 * n, 2))
        return self.head.record(tape, left, right)

    def targets(self, samples: Sequence[ds.Sample]) -> np.ndarray:
        return np.array([ds.label_of(s) for s in samples], dtype=np.int64)

    def predict_logits(self, samples: Sequence[ds.Sample]) -> np.ndarray:
        step = self.cfg.eval_batch_size
        chunks = [
            self.logits_node(ad.Tape(), samples[i : i + step]).value for i in range(0, len(samples), step)
        ]
        return np.concatenate(chunks, axis=0)

    def penalized_loss(self, tape: ad.Tape, samples, l2_weight: float, l2_biases: bool = True):
        """Mean NLL over the batch plus ``l2_weight`` times the summed squares of the weights."""
        logits = self.logits_node(tape, samples)
        nll = ad.softmax_cross_entropy(logits, self.targets(samples))
        if l2_weight == 0:
            return nll, nll, logits
        penalty = None
        for p in self.store:
            if not l2_biases and self.fan_ins[p.name] is None:
                continue
            sq = ad.sum_squares(tape.param(p))
            penalty = sq if penalty is None else ad.add(penalty, sq)
        return ad.add(nll, ad.scale(penalty, l2_weight)), nll, logits

    def param_counts(self) -> dict:
        kind = self.bank.kind
        return {"table": param_count(kind, TABLE), "all": param_count(kind, ALL)}


def kaiming_init(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    """Normal draws with mean 0 and standard deviation sqrt(2 / fan_in)."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def initialize(model: Model, rng: np.random.Generator) -> None:
    """Kaiming-normal weights, zero biases; parameters drawn in registration order."""
    for p in model.store:
        fi = model.fan_ins[p.name]
        p.value = np.zeros(p.shape) if fi is None else kaiming_init(p.shape, fi, rng)
        p.grad = np.zeros(p.shape)


def build_model(cfg: TrainConfig) -> Model:
    model = Model(cfg)
    initialize(model, np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 0]))))
    return model


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdaDeltaState:
    rho: float = 0.95
    eps: float = 1e-6
    sq_grad: dict = field(default_factory=dict)
    sq_delta: dict = field(default_factory=dict)


def adadelta_step(params: ad.ParameterStore, state: AdaDeltaState) -> None:
    """One AdaDelta update from the gradients held in ``params``."""
    for p in params:
        g = p.grad
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in {p.name}")
        eg = state.sq_grad.get(p.name)
        if eg is None:
            eg = np.zeros_like(p.value)
            state.sq_delta[p.name] = np.zeros_like(p.value)
        ed = state.sq_delta[p.name]
        eg = state.rho * eg + (1 - state.rho) * g * g
        dx = -np.sqrt(ed + state.eps) / np.sqrt(eg + state.eps) * g
        state.sq_grad[p.name] = eg
        state.sq_delta[p.name] = state.rho * ed + (1 - state.rho) * dx * dx
        p.value = p.value + dx


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Evaluation:
    accuracy: float
    loss: float


def evaluate(model, samples: Sequence) -> Evaluation:
    """Argmax accuracy (ties go to the lowest class index) and mean NLL."""
    logits = np.asarray(model.predict_logits(samples), dtype=np.float64)
    y = np.asarray(model.targets(samples))
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    acc = float((logits.argmax(axis=1) == y).mean())
    return Evaluation(acc, float(-logp[np.arange(len(y)), y].mean()))


# ---------------------------------------------------------------------------
# checkpoints: magic, u64 manifest length, JSON manifest, little-endian float64 payload

MAGIC = b"TTCKPT01"


def save_checkpoint(path, model: Model, opt: AdaDeltaState, rng_state: dict, meta: dict) -> None:
    names = model.store.names()
    manifest = {
        "config": asdict(model.cfg),
        "params": [{"name": n, "shape": list(model.store[n].shape)} for n in names],
        "optimizer": {"rho": opt.rho, "eps": opt.eps, "has_state": bool(opt.sq_grad)},
        "rng": rng_state,
        "meta": meta,
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    arrays = [model.store[n].value for n in names]
    if opt.sq_grad:
        arrays += [opt.sq_grad[n] for n in names] + [opt.sq_delta[n] for n in names]
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<Q", len(head)) + head + payload)
    tmp.replace(path)


def load_checkpoint(path) -> dict:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    (n,) = struct.unpack_from("<Q", buf, 8)
    manifest = json.loads(buf[16 : 16 + n].decode("utf-8"))
    offset = 16 + n

    def take(shape):
        nonlocal offset
        size = int(np.prod(shape))
        a = np.frombuffer(buf, dtype="<f8", count=size, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * size
        return a

    specs = manifest["params"]
    params = {s["name"]: take(s["shape"]) for s in specs}
    opt = AdaDeltaState(manifest["optimizer"]["rho"], manifest["optimizer"]["eps"])
    if manifest["optimizer"]["has_state"]:
        opt.sq_grad = {s["name"]: take(s["shape"]) for s in specs}
        opt.sq_delta = {s["name"]: take(s["shape"]) for s in specs}
    return {
        "config": manifest["config"],
        "params": params,
        "optimizer": opt,
        "rng": manifest["rng"],
        "meta": manifest["meta"],
    }


def model_from_checkpoint(ckpt: dict) -> Model:
    model = Model(TrainConfig(**ckpt["config"]))
    for name, value in ckpt["params"].items():
        p = model.store[name]
        if p.shape != value.shape:
            raise ValueError(f"checkpoint shape mismatch for {name}")
        p.value = value.copy()
    return model


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    best_val_accuracy: float
    best_epoch: int
    epochs_run: int
    history: list


def _shuffle_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 1])))


def train(
    cfg: TrainConfig,
    train_set: Sequence,
    val_set: Sequence,
    out_dir=None,
    resume: bool = False,
    deterministic: bool = True,
    model: Optional[Model] = None,
) -> TrainResult:
    """Mini-batch AdaDelta with best-validation checkpointing and early stopping.

    With ``out_dir`` set, writes ``metrics.jsonl`` (one record per epoch and
    split), ``best.ckpt`` and ``last.ckpt``. ``resume`` restarts from
    ``last.ckpt``; in deterministic mode the continuation is identical to an
    uninterrupted run.
    """
    out = Path(out_dir) if out_dir is not None else None
    rng = _shuffle_rng(cfg.seed)
    opt = AdaDeltaState(cfg.rho, cfg.eps)
    meta = {"epoch": 0, "best_val_accuracy": -1.0, "best_epoch": 0, "since_best": 0}
    if model is None:
        model = build_model(cfg)
    history: list = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.jsonl"
        if resume:
            ck = load_checkpoint(out / "last.ckpt")
            if ck["config"] != asdict(cfg):
                raise ValueError("checkpoint config does not match the requested run")
            model = model_from_checkpoint(ck)
            opt, meta = ck["optimizer"], ck["meta"]
            rng.bit_generator.state = ck["rng"]
            kept = [
                line for line in metrics_path.read_text().splitlines() if json.loads(line)["epoch"] <= meta["epoch"]
            ]
            history = [json.loads(line) for line in kept]
            metrics_path.write_text("".join(line + "\n" for line in kept))
        else:
            metrics_path.write_text("")
    elif resume:
        raise ValueError("resume needs an output directory")

    counts = model.param_counts()
    n = len(train_set)
    epoch = meta["epoch"]
    while epoch < cfg.max_epochs and meta["since_best"] < cfg.patience:
        epoch += 1
        t0 = time.perf_counter()
        order = rng.permutation(n)
        nll_sum = 0.0
        correct = 0
        for start in range(0, n, cfg.batch_size):
            batch = [train_set[i] for i in order[start : start + cfg.batch_size]]
            model.store.zero_grad()
            tape = ad.Tape()
            loss, nll, logits = model.penalized_loss(tape, batch, cfg.l2_weight, cfg.l2_biases)
            if not np.isfinite(loss.value):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            tape.backward(loss)
            adadelta_step(model.store, opt)
            nll_sum += float(nll.value) * len(batch)
            correct += int((logits.value.argmax(axis=1) == model.targets(batch)).sum())
        train_time = time.perf_counter() - t0
        t1 = time.perf_counter()
        val = evaluate(model, val_set)
        val_time = time.perf_counter() - t1

        records = [
            ("train", nll_sum / n, correct / n, train_time),
            ("val", val.loss, val.accuracy, val_time),
        ]
        for split, loss_v, acc, wall in records:
            rec = {
                "epoch": epoch,
                "split": split,
                "loss": loss_v,
                "accuracy": acc,
                "wall_time_s": None if deterministic else round(wall, 3),
                "param_count_table": counts["table"],
                "param_count_all": counts["all"],
            }
            history.append(rec)
            if out is not None:
                with open(metrics_path, "a") as fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
        log.info(
            "epoch %d train_nll=%.4f train_acc=%.4f val_acc=%.4f (%.1fs)",
            epoch, nll_sum / n, correct / n, val.accuracy, train_time + val_time,
        )

        meta = dict(meta, epoch=epoch)
        if val.accuracy > meta["best_val_accuracy"]:
            meta.update(best_val_accuracy=val.accuracy, best_epoch=epoch, since_best=0)
            if out is not None:
                save_checkpoint(out / "best.ckpt", model, opt, rng.bit_generator.state, meta)
        else:
            meta["since_best"] += 1
        if out is not None:
            save_checkpoint(out / "last.ckpt", model, opt, rng.bit_generator.state, meta)

    return TrainResult(meta["best_val_accuracy"], meta["best_epoch"], epoch, history)
