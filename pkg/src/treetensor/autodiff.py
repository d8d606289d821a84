"""Define-by-run reverse-mode autodiff over numpy arrays.

A :class:`Tape` is built fresh for every forward pass, so each batch of trees
gets a graph shaped like the trees themselves. Values carry a leading batch
axis wherever a primitive works on vectors; gradients of parameters are
accumulated into :attr:`Parameter.grad` by :meth:`Tape.backward`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from . import tensor as tc


class GraphError(RuntimeError):
    """Operands recorded on different tapes were mixed."""


@dataclass(eq=False)
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


class ParameterStore:
    """Ordered name -> Parameter mapping."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, value) -> Parameter:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Parameter(name, value)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0.0

    def size(self) -> int:
        return sum(p.value.size for p in self._params.values())


class Node:
    __slots__ = ("tape", "index", "op", "value", "parents", "vjp", "param", "needs_grad")

    def __init__(self, tape, index, op, value, parents, vjp, param, needs_grad):
        self.tape = tape
        self.index = index
        self.op = op
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.param = param
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.op}, shape={self.value.shape})"


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []
        self._param_nodes: dict[int, Node] = {}

    def _append(self, op, value, parents, vjp, param, needs_grad) -> Node:
        node = Node(self, len(self.nodes), op, value, tuple(parents), vjp, param, needs_grad)
        self.nodes.append(node)
        return node

    def param(self, p: Parameter) -> Node:
        """Leaf bound to a parameter; recorded once per tape."""
        node = self._param_nodes.get(id(p))
        if node is None:
            node = self._append("param", p.value, (), None, p, True)
            self._param_nodes[id(p)] = node
        return node

    def const(self, value) -> Node:
        return self._append("const", np.asarray(value, dtype=np.float64), (), None, None, False)

    def record(self, op: str, operands: Sequence[Node], value, vjp: Optional[Callable] = None) -> Node:
        """Append a primitive. ``vjp(g)`` must return one adjoint (or None) per operand."""
        for x in operands:
            if not isinstance(x, Node) or x.tape is not self:
                raise GraphError(f"operand of {op!r} does not belong to this tape")
        needs = vjp is not None and any(x.needs_grad for x in operands)
        return self._append(op, value, operands, vjp, None, needs)

    def backward(self, loss: Node) -> None:
        if loss.tape is not self:
            raise GraphError("loss node belongs to another tape")
        if loss.value.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
        for node in reversed(self.nodes[: loss.index + 1]):
            g = grads.pop(node.index, None)
            if g is None or not node.needs_grad:
                continue
            if node.param is not None:
                node.param.grad += g
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.needs_grad:
                    continue
                prev = grads.get(parent.index)
                grads[parent.index] = pg if prev is None else prev + pg


def _tape(*nodes: Node) -> Tape:
    tape = nodes[0].tape
    for x in nodes[1:]:
        if x.tape is not tape:
            raise GraphError("operands from different tapes")
    return tape


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, d in enumerate(shape):
        if d == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def add(a: Node, b: Node) -> Node:
    sa, sb = a.shape, b.shape
    return _tape(a, b).record(
        "add", (a, b), a.value + b.value, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def mul(a: Node, b: Node) -> Node:
    va, vb = a.value, b.value
    return _tape(a, b).record(
        "mul",
        (a, b),
        va * vb,
        lambda g: (_unbroadcast(g * vb, va.shape), _unbroadcast(g * va, vb.shape)),
    )


def scale(a: Node, alpha: float) -> Node:
    return a.tape.record("scale", (a,), alpha * a.value, lambda g: (alpha * g,))


def sum_axis(a: Node, axis: int) -> Node:
    shape = a.shape

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return a.tape.record("sum", (a,), a.value.sum(axis=axis), vjp)


def matvec(w: Node, x: Node) -> Node:
    """``x @ w.T``: applies the matrix to every row of a batched input."""
    W, X = w.value, x.value
    if W.ndim != 2 or X.shape[-1] != W.shape[1]:
        raise tc.ShapeError(f"matvec of {W.shape} with {X.shape}")

    def vjp(g):
        g2 = g.reshape(-1, W.shape[0])
        return g2.T @ X.reshape(-1, W.shape[1]), g @ W

    return _tape(w, x).record("matvec", (w, x), X @ W.T, vjp)


def slotwise(u: Node, h: Node) -> Node:
    """Per-slot linear maps: (L, k, n) applied to (B, L, n) -> (B, L, k)."""
    U, H = u.value, h.value
    if H.ndim != 3 or H.shape[1:] != (U.shape[0], U.shape[2]):
        raise tc.ShapeError(f"slotwise of {U.shape} with {H.shape}")
    Ht = H.transpose(1, 0, 2)  # (L, B, n)
    out = (Ht @ U.transpose(0, 2, 1)).transpose(1, 0, 2)

    def vjp(g):
        gt = g.transpose(1, 0, 2)  # (L, B, k)
        return gt.transpose(0, 2, 1) @ Ht, (gt @ U).transpose(1, 0, 2)

    return _tape(u, h).record("slotwise", (u, h), out, vjp)


def sigmoid(a: Node) -> Node:
    y = 0.5 * (np.tanh(0.5 * a.value) + 1.0)
    return a.tape.record("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))


def tanh(a: Node) -> Node:
    y = np.tanh(a.value)
    return a.tape.record("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


LEAKY_SLOPE = 0.01


def leaky_relu(a: Node) -> Node:
    slope = np.where(a.value > 0, 1.0, LEAKY_SLOPE)
    return a.tape.record("leaky_relu", (a,), a.value * slope, lambda g: (g * slope,))


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    tape = _tape(*nodes)
    sizes = [x.shape[axis] for x in nodes]
    cuts = np.cumsum(sizes)[:-1]
    return tape.record(
        "concat",
        nodes,
        np.concatenate([x.value for x in nodes], axis=axis),
        lambda g: np.split(g, cuts, axis=axis),
    )


def gather(sources: Sequence[Node], index: np.ndarray) -> Node:
    """Pick rows from the stacked sources; index -1 yields a zero row.

    ``index`` may have any shape; the result has shape index.shape + row shape.
    """
    tape = _tape(*sources)
    index = np.asarray(index, dtype=np.int64)
    row = sources[0].shape[1:]
    sizes = [x.shape[0] for x in sources]
    stacked = np.concatenate([x.value for x in sources] + [np.zeros((1,) + row)], axis=0)
    cuts = np.cumsum(sizes)

    def vjp(g):
        acc = np.zeros_like(stacked)
        np.add.at(acc, index, g)
        return np.split(acc[:-1], cuts[:-1], axis=0)

    return tape.record("gather", sources, stacked[index], vjp)


def multi_affine(t: Node, context: Node, label: Optional[Node] = None) -> Node:
    """Batched multi-affine map: ``context`` is (B, L, c), ``label`` (B, m)."""
    T = t.value
    L = context.shape[1]
    inputs = ([tc.augment(label.value)] if label is not None else []) + [
        tc.augment(context.value[:, j, :]) for j in range(L)
    ]
    out = tc.contract(T, inputs)
    operands = (t, context) + ((label,) if label is not None else ())

    def vjp(g):
        g_t, g_in = tc.contract_vjp(T, inputs, g)
        g_in = [x[:, :-1] for x in g_in]
        if label is not None:
            g_label, g_in = g_in[0], g_in[1:]
            return g_t, np.stack(g_in, axis=1), g_label
        return g_t, np.stack(g_in, axis=1)

    return _tape(*operands).record("multi_affine", operands, out, vjp)


def tucker_apply(
    core: Node, context_modes: Node, output_mode: Node, context: Node,
    label_mode: Optional[Node] = None, label: Optional[Node] = None,
) -> Node:
    """Tucker-factored transition, recorded as mode projections + core contraction + output map."""
    reduced = slotwise(context_modes, context)
    reduced_label = matvec(label_mode, label) if label is not None else None
    return matvec(output_mode, multi_affine(core, reduced, reduced_label))


def bilinear(b: Node, x: Node, y: Node) -> Node:
    """(k, n, n) tensor against row pairs: out[i, t] = x_i^T B_t y_i."""
    B, X, Y = b.value, x.value, y.value
    By = np.einsum("tij,bj->bti", B, Y)
    out = np.einsum("bti,bi->bt", By, X)

    def vjp(g):
        gB = np.einsum("bt,bi,bj->tij", g, X, Y, optimize=True)
        gX = np.einsum("bt,bti->bi", g, By)
        gY = np.einsum("bt,tij,bi->bj", g, B, X, optimize=True)
        return gB, gX, gY

    return _tape(b, x, y).record("bilinear", (b, x, y), out, vjp)


def softmax_cross_entropy(logits: Node, labels: np.ndarray) -> Node:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    Z = logits.value
    labels = np.asarray(labels, dtype=np.int64)
    n = Z.shape[0]
    shifted = Z - Z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()

    def vjp(g):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        return (g * d / n,)

    return logits.tape.record("softmax_xent", (logits,), np.array(loss), vjp)


def sum_squares(a: Node) -> Node:
    v = a.value
    return a.tape.record("sum_squares", (a,), np.array((v * v).sum()), lambda g: (2.0 * g * v,))


# ---------------------------------------------------------------------------
# verification harness


def finite_diff_check(
    build_loss: Callable[[Tape], Node],
    params: ParameterStore,
    eps: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    The gap is |a - n| / max(1, |a|, |n|). With ``max_entries`` set, at most
    that many entries per parameter are probed (chosen by ``seed``).
    """
    params.zero_grad()
    tape = Tape()
    loss = build_loss(tape)
    if not np.isfinite(loss.value).all():
        raise FloatingPointError("loss is not finite")
    tape.backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = p.grad.copy().ravel()
        base = p.value
        n = base.size
        if max_entries is not None and n > max_entries:
            probe = np.sort(rng.choice(n, size=max_entries, replace=False))
        else:
            probe = range(n)
        for i in probe:
            vals = []
            for step in (eps, -eps):
                bumped = base.copy()
                bumped.flat[i] += step
                p.value = bumped
                f = build_loss(Tape()).value
                if not np.isfinite(f).all():
                    p.value = base
                    raise FloatingPointError(f"loss not finite while probing {p.name}[{i}]")
                vals.append(float(f))
            p.value = base
            numeric = (vals[0] - vals[1]) / (2 * eps)
            a = analytic[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
    return worst
