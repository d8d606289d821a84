"""Tree-LSTM encoders whose input/output/update gates use a pluggable aggregator.

Internal-node labels only select a parameter slice (one cell per operator);
leaves carry payload vectors. Forget gates stay per-child and sum-style for
every aggregator. Encoding is batched level by level: all internal nodes of
the same height and operator, across every tree in the batch, go through one
set of tape primitives.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .aggregators import AggregatorKind, Kind, fan_in, param_shapes, params_from_arrays, record_aggregate


@dataclass(frozen=True)
class Tree:
    """Ordered labeled tree. A node without children is a leaf."""

    label: str
    children: tuple["Tree", ...] = ()

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def postorder(self) -> Iterator["Tree"]:
        """Nodes in post-order; the position in this sequence is the node's stable index."""
        for ch in self.children:
            yield from ch.postorder()
        yield self

    def height(self) -> int:
        return 0 if self.is_leaf else 1 + max(ch.height() for ch in self.children)

    def size(self) -> int:
        return sum(1 for _ in self.postorder())

    def max_outdegree(self) -> int:
        return max(len(n.children) for n in self.postorder())

    def n_internal(self) -> int:
        return sum(1 for n in self.postorder() if not n.is_leaf)


@dataclass
class LstmState:
    h: np.ndarray
    c_mem: np.ndarray


GATES = ("i", "o", "u")


@dataclass(frozen=True)
class CellConfig:
    aggregator: str
    hidden_dim: int
    context_size: int
    leaf_dim: int
    operators: tuple[str, ...]
    rank: Optional[int] = None
    update_activation: str = "tanh"

    def kind(self) -> AggregatorKind:
        return AggregatorKind(Kind(self.aggregator), self.hidden_dim, self.context_size, 0, self.rank)


class CellBank:
    """Per-operator gate parameters plus the leaf cell, registered in a shared store.

    Parameters start at zero; :func:`treetensor.training.initialize` draws them.
    """

    def __init__(self, cfg: CellConfig, store: ad.ParameterStore):
        if cfg.update_activation not in ("tanh", "sigmoid"):
            raise ValueError(f"unknown update activation {cfg.update_activation!r}")
        self.cfg = cfg
        self.kind = cfg.kind()
        self.store = store
        self.fan_ins: dict[str, Optional[int]] = {}
        c, L, m = cfg.hidden_dim, cfg.context_size, cfg.leaf_dim
        for g in GATES:
            self._add(f"leaf.{g}.W", (c, m), m)
            self._add(f"leaf.{g}.b", (c,), None)
        for op in cfg.operators:
            for g in GATES:
                for name, shape in param_shapes(self.kind).items():
                    fi = None if (self.kind.tag is Kind.SUM and name == "b") else fan_in(self.kind, name)
                    self._add(f"{op}.{g}.{name}", shape, fi)
            self._add(f"{op}.f.U", (L, c, c), c)
            self._add(f"{op}.f.b", (L, c), None)

    def _add(self, name, shape, fi):
        self.store.add(name, np.zeros(shape))
        self.fan_ins[name] = fi

    def gate_params(self, op: str, gate: str):
        """Typed aggregator parameters (numpy) for one operator's gate."""
        names = param_shapes(self.kind)
        return params_from_arrays(self.kind, {n: self.store[f"{op}.{gate}.{n}"].value for n in names})

    def _nodes(self, tape: ad.Tape, prefix: str) -> dict:
        return {n: tape.param(self.store[f"{prefix}.{n}"]) for n in param_shapes(self.kind)}

    def _update(self, x: ad.Node) -> ad.Node:
        return ad.tanh(x) if self.cfg.update_activation == "tanh" else ad.sigmoid(x)

    def record_leaves(self, tape: ad.Tape, x: ad.Node) -> tuple[ad.Node, ad.Node]:
        """Leaf cell on a (B, m) batch of payloads: the transition with an empty context."""
        pre = {
            g: ad.add(ad.matvec(tape.param(self.store[f"leaf.{g}.W"]), x), tape.param(self.store[f"leaf.{g}.b"]))
            for g in GATES
        }
        i, o, u = ad.sigmoid(pre["i"]), ad.sigmoid(pre["o"]), self._update(pre["u"])
        c = ad.mul(i, u)
        return ad.mul(o, ad.tanh(c)), c

    def record_internal(self, tape: ad.Tape, op: str, H: ad.Node, C: ad.Node) -> tuple[ad.Node, ad.Node]:
        """One operator's cell on (B, L, c) child hidden states and memories.

        Absent children are zero rows: they only contribute bias-like terms to
        i/o/u and nothing through the forget path.
        """
        if op not in self.cfg.operators:
            raise KeyError(f"unknown operator {op!r}")
        pre = {g: record_aggregate(self.kind, self._nodes(tape, f"{op}.{g}"), H) for g in GATES}
        i, o, u = ad.sigmoid(pre["i"]), ad.sigmoid(pre["o"]), self._update(pre["u"])
        f = ad.sigmoid(
            ad.add(ad.slotwise(tape.param(self.store[f"{op}.f.U"]), H), tape.param(self.store[f"{op}.f.b"]))
        )
        c = ad.add(ad.mul(i, u), ad.sum_axis(ad.mul(f, C), 1))
        return ad.mul(o, ad.tanh(c)), c


def encode_forest(
    tape: ad.Tape,
    bank: CellBank,
    trees: Sequence[Tree],
    leaf_vector: Callable[[str], np.ndarray],
) -> tuple[ad.Node, ad.Node]:
    """Encode every tree bottom-up; returns root (h, c_mem) nodes of shape (len(trees), c)."""
    L = bank.cfg.context_size
    labels: list[str] = []
    kids: list[tuple[int, ...]] = []
    heights: list[int] = []

    def visit(t: Tree) -> int:
        if len(t.children) > L:
            raise ValueError(f"node {t.label!r} has {len(t.children)} children, outdegree limit is {L}")
        ch = tuple(visit(x) for x in t.children)
        labels.append(t.label)
        kids.append(ch)
        heights.append(0 if not ch else 1 + max(heights[j] for j in ch))
        return len(labels) - 1

    roots = [visit(t) for t in trees]
    where = np.full(len(labels), -1, dtype=np.int64)

    leaves = [k for k, ch in enumerate(kids) if not ch]
    X = tape.const(np.stack([leaf_vector(labels[k]) for k in leaves]))
    h, c = bank.record_leaves(tape, X)
    hs, cs = [h], [c]
    where[leaves] = np.arange(len(leaves))
    offset = len(leaves)

    groups: dict[tuple[int, str], list[int]] = defaultdict(list)
    for k, ch in enumerate(kids):
        if ch:
            if labels[k] not in bank.cfg.operators:
                raise KeyError(f"unknown operator {labels[k]!r}")
            groups[(heights[k], labels[k])].append(k)
    order = {op: n for n, op in enumerate(bank.cfg.operators)}
    for key in sorted(groups, key=lambda hk: (hk[0], order[hk[1]])):
        members = groups[key]
        index = np.full((len(members), L), -1, dtype=np.int64)
        for row, k in enumerate(members):
            for j, child in enumerate(kids[k]):
                index[row, j] = where[child]
        H = ad.gather(hs, index)
        C = ad.gather(cs, index)
        h, c = bank.record_internal(tape, key[1], H, C)
        hs.append(h)
        cs.append(c)
        where[members] = offset + np.arange(len(members))
        offset += len(members)

    root_index = where[roots]
    return ad.gather(hs, root_index), ad.gather(cs, root_index)


def encode(tree: Tree, bank: CellBank, leaf_vector: Callable[[str], np.ndarray]) -> LstmState:
    """Root state of a single tree."""
    h, c = encode_forest(ad.Tape(), bank, [tree], leaf_vector)
    return LstmState(h.value[0], c.value[0])


def leaf_forward(bank: CellBank, x) -> LstmState:
    tape = ad.Tape()
    h, c = bank.record_leaves(tape, tape.const(np.asarray(x, dtype=np.float64)[None, :]))
    return LstmState(h.value[0], c.value[0])


def cell_forward(bank: CellBank, op: str, children: Sequence[Optional[LstmState]]) -> LstmState:
    """One internal node; ``None`` entries and trailing missing slots are absent children."""
    L, c = bank.cfg.context_size, bank.cfg.hidden_dim
    if len(children) > L:
        raise ValueError(f"{len(children)} children exceed outdegree {L}")
    H = np.zeros((1, L, c))
    C = np.zeros((1, L, c))
    for j, s in enumerate(children):
        if s is not None:
            H[0, j], C[0, j] = s.h, s.c_mem
    tape = ad.Tape()
    h, cm = bank.record_internal(tape, op, tape.const(H), tape.const(C))
    return LstmState(h.value[0], cm.value[0])


# ---------------------------------------------------------------------------
# classification heads


class LrtHead:
    """Compares two root states through a bilinear layer with leaky-relu units."""

    n_classes = 7

    def __init__(self, store: ad.ParameterStore, hidden_dim: int, width: int = 32):
        c, k = hidden_dim, width
        self.store = store
        self.fan_ins = {
            "head.B": c * c,
            "head.V": 2 * c,
            "head.d": None,
            "head.A": k,
            "head.a": None,
        }
        shapes = {"head.B": (k, c, c), "head.V": (k, 2 * c), "head.d": (k,), "head.A": (7, k), "head.a": (7,)}
        for name, shape in shapes.items():
            store.add(name, np.zeros(shape))

    def record(self, tape: ad.Tape, h_left: ad.Node, h_right: ad.Node) -> ad.Node:
        p = {n: tape.param(self.store[n]) for n in self.fan_ins}
        z = ad.add(ad.bilinear(p["head.B"], h_left, h_right), ad.matvec(p["head.V"], ad.concat([h_left, h_right])))
        z = ad.leaky_relu(ad.add(z, p["head.d"]))
        return ad.add(ad.matvec(p["head.A"], z), p["head.a"])

    def logits(self, h_left, h_right) -> np.ndarray:
        tape = ad.Tape()
        out = self.record(tape, tape.const(np.atleast_2d(h_left)), tape.const(np.atleast_2d(h_right)))
        return out.value[0] if np.ndim(h_left) == 1 else out.value


class ListOpsHead:
    """Two leaky-relu layers of ``width`` units, then 10 logits."""

    n_classes = 10

    def __init__(self, store: ad.ParameterStore, hidden_dim: int, width: int = 20):
        self.store = store
        shapes = {
            "head.W1": (width, hidden_dim),
            "head.b1": (width,),
            "head.W2": (width, width),
            "head.b2": (width,),
            "head.W3": (10, width),
            "head.b3": (10,),
        }
        self.fan_ins = {n: (s[1] if len(s) == 2 else None) for n, s in shapes.items()}
        for name, shape in shapes.items():
            store.add(name, np.zeros(shape))

    def record(self, tape: ad.Tape, h: ad.Node) -> ad.Node:
        p = {n: tape.param(self.store[n]) for n in self.fan_ins}
        z = ad.leaky_relu(ad.add(ad.matvec(p["head.W1"], h), p["head.b1"]))
        z = ad.leaky_relu(ad.add(ad.matvec(p["head.W2"], z), p["head.b2"]))
        return ad.add(ad.matvec(p["head.W3"], z), p["head.b3"])

    def logits(self, h) -> np.ndarray:
        tape = ad.Tape()
        out = self.record(tape, tape.const(np.atleast_2d(h)))
        return out.value[0] if np.ndim(h) == 1 else out.value


def lrt_head(h_left, h_right, head: LrtHead) -> np.ndarray:
    return head.logits(h_left, h_right)


def listops_head(h, head: ListOpsHead) -> np.ndarray:
    return head.logits(h)
