"""Synthetic tree corpora: ListOps expressions and propositional-logic pairs.

Both tasks come with exact oracles (expression evaluation and a 64-row truth
table) and a line-oriented text format::

    ListOps:  <digit>\\t( MIN _ 2 _ _ ( MAX 1 2 3 4 5 ) )
    LRT:      <relation>\\t<formula>\\t<formula>     e.g.  fwd\\t( a and b )\\ta

Generation is deterministic: sample ``i`` of a split draws from its own
PCG64 stream seeded with ``(seed, split, i)``.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .treelstm import Tree

LISTOPS_OPS = ("MIN", "MAX", "MED", "SM")
LISTOPS_ARITY = 5
MISSING = "_"
DIGITS = tuple(str(d) for d in range(10))

LRT_OPS = ("and", "or", "not")
VARIABLES = ("a", "b", "c", "d", "e", "f")
RELATIONS = ("equiv", "fwd", "rev", "neg", "alt", "cov", "indep")

SPLITS = {"train": 0, "val": 1, "test": 2}


class ParseError(ValueError):
    def __init__(self, reason: str, position: int):
        super().__init__(f"token {position}: {reason}")
        self.reason = reason
        self.position = position


@dataclass(frozen=True)
class ListOpsSample:
    tree: Tree
    label: int


@dataclass(frozen=True)
class LrtSample:
    left: Tree
    right: Tree
    relation: str


Sample = Union[ListOpsSample, LrtSample]


@dataclass
class GenConfig:
    seed: int = 0
    count: int = 1000
    # ListOps
    max_depth: int = 3
    min_args: int = 2
    max_args: int = 5
    p_subexpr: float = 0.25
    # LRT
    max_operators: int = 4
    class_cap: float = 0.5

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if not 1 <= self.min_args <= self.max_args <= LISTOPS_ARITY:
            raise ValueError("need 1 <= min_args <= max_args <= 5")
        if self.max_depth < 1 or self.max_operators < 0:
            raise ValueError("max_depth must be >= 1 and max_operators >= 0")


def sample_rng(seed: int, split: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, split, index])))


# ---------------------------------------------------------------------------
# ListOps


def eval_listops(tree: Tree) -> int:
    if tree.is_leaf:
        if tree.label not in DIGITS:
            raise ValueError(f"leaf {tree.label!r} has no value")
        return int(tree.label)
    vals = [eval_listops(ch) for ch in tree.children if ch.label != MISSING]
    if not vals:
        raise ValueError(f"{tree.label} node has no operands")
    if tree.label == "MIN":
        return min(vals)
    if tree.label == "MAX":
        return max(vals)
    if tree.label == "MED":
        return sorted(vals)[math.ceil(len(vals) / 2) - 1]
    if tree.label == "SM":
        return sum(vals) % 10
    raise ValueError(f"unknown ListOps operator {tree.label!r}")


def _listops_tree(rng: np.random.Generator, depth: int, cfg: GenConfig) -> Tree:
    op = LISTOPS_OPS[rng.integers(len(LISTOPS_OPS))]
    n = int(rng.integers(cfg.min_args, cfg.max_args + 1))
    used = set(rng.choice(LISTOPS_ARITY, size=n, replace=False).tolist())
    children = []
    for slot in range(LISTOPS_ARITY):
        if slot not in used:
            children.append(Tree(MISSING))
        elif depth < cfg.max_depth and rng.random() < cfg.p_subexpr:
            children.append(_listops_tree(rng, depth + 1, cfg))
        else:
            children.append(Tree(DIGITS[rng.integers(10)]))
    return Tree(op, tuple(children))


def gen_listops(cfg: GenConfig, split: int = 0, exclude: Optional[set] = None) -> list[ListOpsSample]:
    """``cfg.count`` distinct samples; lines already in ``exclude`` are skipped (and added to it)."""
    seen = exclude if exclude is not None else set()
    out = []
    index = 0
    while len(out) < cfg.count:
        tree = _listops_tree(sample_rng(cfg.seed, split, index), 1, cfg)
        index += 1
        sample = ListOpsSample(tree, eval_listops(tree))
        line = render_listops(sample)
        if line in seen:
            continue
        seen.add(line)
        out.append(sample)
    return out


def render_tree_listops(tree: Tree) -> str:
    if tree.is_leaf:
        return tree.label
    return "( " + " ".join([tree.label] + [render_tree_listops(c) for c in tree.children]) + " )"


def render_listops(sample: ListOpsSample) -> str:
    return f"{sample.label}\t{render_tree_listops(sample.tree)}"


class _Tokens:
    def __init__(self, text: str):
        self.toks = text.split(" ")
        self.pos = 0

    def peek(self) -> Optional[str]:
        return self.toks[self.pos] if self.pos < len(self.toks) else None

    def take(self) -> str:
        tok = self.peek()
        if tok is None:
            raise ParseError("unexpected end of input", self.pos)
        if tok == "":
            raise ParseError("empty token (tokens are separated by single spaces)", self.pos)
        self.pos += 1
        return tok

    def expect(self, want: str) -> None:
        at = self.pos
        tok = self.take()
        if tok != want:
            raise ParseError(f"expected {want!r}, found {tok!r}", at)

    def finish(self) -> None:
        if self.pos != len(self.toks):
            raise ParseError(f"unexpected trailing token {self.toks[self.pos]!r}", self.pos)


def _parse_listops_expr(tk: _Tokens) -> Tree:
    at = tk.pos
    tok = tk.take()
    if tok in DIGITS or tok == MISSING:
        return Tree(tok)
    if tok != "(":
        raise ParseError(f"unexpected token {tok!r}", at)
    at = tk.pos
    op = tk.take()
    if op not in LISTOPS_OPS:
        raise ParseError(f"unknown operator {op!r}", at)
    children = []
    while tk.peek() != ")":
        if tk.peek() is None:
            raise ParseError("unbalanced parenthesis", tk.pos)
        children.append(_parse_listops_expr(tk))
    if len(children) != LISTOPS_ARITY:
        raise ParseError(f"{op} needs {LISTOPS_ARITY} child slots, got {len(children)}", tk.pos)
    if all(c.label == MISSING for c in children):
        raise ParseError(f"{op} has no operands", tk.pos)
    tk.expect(")")
    return Tree(op, tuple(children))


def parse_listops_tree(text: str) -> Tree:
    tk = _Tokens(text)
    tree = _parse_listops_expr(tk)
    tk.finish()
    if tree.is_leaf:
        raise ParseError("expression must start with an operator", 0)
    return tree


def parse_listops(line: str) -> ListOpsSample:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 2 or parts[0] not in DIGITS:
        raise ParseError("expected '<digit>\\t<expr>'", 0)
    return ListOpsSample(parse_listops_tree(parts[1]), int(parts[0]))


# ---------------------------------------------------------------------------
# logical relations

FULL_MASK = (1 << 64) - 1
_VAR_MASKS = {
    v: sum(1 << row for row in range(64) if (row >> i) & 1) for i, v in enumerate(VARIABLES)
}


def truth_set(tree: Tree) -> int:
    """Satisfying assignments as a 64-bit mask (bit ``row`` set iff the formula holds there)."""
    if tree.is_leaf:
        return _VAR_MASKS[tree.label]
    if tree.label == "not":
        return ~truth_set(tree.children[0]) & FULL_MASK
    a, b = (truth_set(c) for c in tree.children)
    if tree.label == "and":
        return a & b
    if tree.label == "or":
        return a | b
    raise ValueError(f"unknown connective {tree.label!r}")


def lrt_relation(left: Tree, right: Tree) -> str:
    A, B = truth_set(left), truth_set(right)
    if A == B:
        return "equiv"
    if A & ~B == 0:
        return "fwd"
    if B & ~A == 0:
        return "rev"
    disjoint = A & B == 0
    exhaustive = A | B == FULL_MASK
    if disjoint:
        return "neg" if exhaustive else "alt"
    if exhaustive:
        return "cov"
    return "indep"


def _formula(rng: np.random.Generator, n_ops: int, pool: Sequence[str]) -> Tree:
    if n_ops == 0:
        return Tree(pool[rng.integers(len(pool))])
    op = LRT_OPS[rng.integers(3)]
    if op == "not":
        return Tree("not", (_formula(rng, n_ops - 1, pool),))
    k = int(rng.integers(n_ops))
    return Tree(op, (_formula(rng, k, pool), _formula(rng, n_ops - 1 - k, pool)))


def _lrt_pair(rng: np.random.Generator, cfg: GenConfig) -> tuple[Tree, Tree]:
    # a small shared variable pool per pair keeps the relation classes populated
    k = int(rng.integers(2, 5))
    pool = [VARIABLES[i] for i in sorted(rng.choice(len(VARIABLES), size=k, replace=False))]
    n_left, n_right = rng.integers(0, cfg.max_operators + 1, size=2)
    return _formula(rng, int(n_left), pool), _formula(rng, int(n_right), pool)


def gen_lrt(cfg: GenConfig, split: int = 0, exclude: Optional[set] = None) -> list[LrtSample]:
    """Distinct formula pairs with their relation; tautologies/contradictions are rejected."""
    seen = exclude if exclude is not None else set()
    cap = max(1, int(cfg.class_cap * cfg.count))
    counts: Counter = Counter()
    out = []
    index = 0
    budget = 1000 * cfg.count + 10000
    while len(out) < cfg.count:
        if index >= budget:
            raise RuntimeError("LRT generation could not satisfy the class cap; raise max_operators")
        left, right = _lrt_pair(sample_rng(cfg.seed, split, index), cfg)
        index += 1
        if any(truth_set(t) in (0, FULL_MASK) for t in (left, right)):
            continue
        sample = LrtSample(left, right, lrt_relation(left, right))
        if counts[sample.relation] >= cap:
            continue
        line = render_lrt(sample)
        if line in seen:
            continue
        seen.add(line)
        counts[sample.relation] += 1
        out.append(sample)
    return out


def render_formula(tree: Tree) -> str:
    if tree.is_leaf:
        return tree.label
    if tree.label == "not":
        return f"( not {render_formula(tree.children[0])} )"
    left, right = tree.children
    return f"( {render_formula(left)} {tree.label} {render_formula(right)} )"


def render_lrt(sample: LrtSample) -> str:
    return f"{sample.relation}\t{render_formula(sample.left)}\t{render_formula(sample.right)}"


def _parse_formula(tk: _Tokens) -> Tree:
    at = tk.pos
    tok = tk.take()
    if tok in VARIABLES:
        return Tree(tok)
    if tok != "(":
        raise ParseError(f"unexpected token {tok!r}", at)
    if tk.peek() == "not":
        tk.take()
        node = Tree("not", (_parse_formula(tk),))
    else:
        left = _parse_formula(tk)
        at = tk.pos
        op = tk.take()
        if op not in ("and", "or"):
            raise ParseError(f"expected 'and' or 'or', found {op!r}", at)
        node = Tree(op, (left, _parse_formula(tk)))
    if tk.peek() is None:
        raise ParseError("unbalanced parenthesis", tk.pos)
    tk.expect(")")
    return node


def parse_formula(text: str) -> Tree:
    tk = _Tokens(text)
    tree = _parse_formula(tk)
    tk.finish()
    return tree


def parse_lrt(line: str) -> LrtSample:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 3 or parts[0] not in RELATIONS:
        raise ParseError("expected '<relation>\\t<formula>\\t<formula>'", 0)
    return LrtSample(parse_formula(parts[1]), parse_formula(parts[2]), parts[0])


# ---------------------------------------------------------------------------
# shared helpers

_LEAF_CACHE: dict = {}


def encode_leaf(task: str, token: str) -> np.ndarray:
    """Payload vector of a leaf token.

    ListOps digit k -> first k+1 of 10 entries set; the missing-operand
    token -> zeros. LRT variables -> one-hot over six variables.
    """
    key = (task, token)
    v = _LEAF_CACHE.get(key)
    if v is not None:
        return v
    if task == "listops":
        v = np.zeros(10)
        if token in DIGITS:
            v[: int(token) + 1] = 1.0
        elif token != MISSING:
            raise ValueError(f"unknown ListOps leaf {token!r}")
    elif task == "lrt":
        if token not in VARIABLES:
            raise ValueError(f"unknown LRT variable {token!r}")
        v = np.zeros(len(VARIABLES))
        v[VARIABLES.index(token)] = 1.0
    else:
        raise ValueError(f"unknown task {task!r}")
    v.flags.writeable = False
    _LEAF_CACHE[key] = v
    return v


def render(sample: Sample) -> str:
    return render_listops(sample) if isinstance(sample, ListOpsSample) else render_lrt(sample)


def parse(task: str, line: str) -> Sample:
    if task == "listops":
        return parse_listops(line)
    if task == "lrt":
        return parse_lrt(line)
    raise ValueError(f"unknown task {task!r}")


def oracle_ok(sample: Sample) -> bool:
    if isinstance(sample, ListOpsSample):
        return eval_listops(sample.tree) == sample.label
    return lrt_relation(sample.left, sample.right) == sample.relation


def generate(task: str, cfg: GenConfig, split: str = "train", exclude: Optional[set] = None) -> list[Sample]:
    if task not in ("listops", "lrt"):
        raise ValueError(f"unknown task {task!r}")
    gen = gen_listops if task == "listops" else gen_lrt
    return gen(cfg, SPLITS[split], exclude)


def write_corpus(path, samples: Iterable[Sample]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(render(s) + "\n")


def read_corpus(path, task: str) -> list[Sample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(parse(task, line))
            except ParseError as e:
                raise ParseError(f"{Path(path).name}:{n}: {e.reason}", e.position) from None
    return out


def label_of(sample: Sample) -> int:
    if isinstance(sample, ListOpsSample):
        return sample.label
    return RELATIONS.index(sample.relation)


def trees_of(sample: Sample) -> tuple[Tree, ...]:
    if isinstance(sample, ListOpsSample):
        return (sample.tree,)
    return (sample.left, sample.right)


def corpus_stats(samples: Sequence[Sample]) -> dict:
    depth = Counter(max(t.height() for t in trees_of(s)) for s in samples)
    classes = Counter(
        s.label if isinstance(s, ListOpsSample) else s.relation for s in samples
    )
    return {
        "size": len(samples),
        "depth_histogram": dict(sorted(depth.items())),
        "class_histogram": dict(sorted(classes.items(), key=lambda kv: str(kv[0]))),
    }
