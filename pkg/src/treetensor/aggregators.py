"""Child-state aggregation: weighted sum, full tensor and Tucker-factored tensor.

Each aggregator maps a label and ``L`` child states to a pre-activation of
size ``c``. The numpy functions here evaluate one input; the ``record_*``
functions build the same computation on an autodiff tape for a batch.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .tensor import (
    MultiAffineMap,
    ShapeError,
    TuckerFactors,
    apply_multi_affine,
    as_tensor,
    tucker_apply,
)


class Kind(str, Enum):
    SUM = "sum"
    FULL = "full"
    HOSVD = "hosvd"


@dataclass(frozen=True)
class AggregatorKind:
    tag: Kind
    hidden_dim: int
    context_size: int
    label_dim: int = 0
    rank: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "tag", Kind(self.tag))
        if self.hidden_dim < 1 or self.context_size < 1:
            raise ValueError("hidden_dim and context_size must be >= 1")
        if self.tag is Kind.HOSVD and (self.rank is None or self.rank < 1):
            raise ValueError("hosvd aggregator needs rank >= 1")


@dataclass(frozen=True)
class SumParams:
    """``U`` stacked as (L, c, c); ``W`` is (c, m) or None when there is no label."""

    U: np.ndarray
    b: np.ndarray
    W: Optional[np.ndarray] = None


@dataclass(frozen=True)
class FullParams:
    map: MultiAffineMap


@dataclass(frozen=True)
class HosvdParams:
    factors: TuckerFactors


AggregatorParams = Union[SumParams, FullParams, HosvdParams]


def aggregate(params: AggregatorParams, label, context) -> np.ndarray:
    """Pre-activation for one node; the caller applies the nonlinearity."""
    if isinstance(params, SumParams):
        L, c, _ = params.U.shape
        if len(context) != L:
            raise ShapeError(f"expected {L} context vectors, got {len(context)}")
        out = params.b.astype(np.float64).copy()
        for U, h in zip(params.U, context):
            h = np.asarray(h, dtype=np.float64)
            if h.shape != (c,):
                raise ShapeError(f"context vector has shape {h.shape}, expected {(c,)}")
            out += U @ h
        if params.W is not None:
            if label is None:
                raise ShapeError("sum aggregator expects a label")
            out += params.W @ np.asarray(label, dtype=np.float64)
        elif label is not None:
            raise ShapeError("sum aggregator has no label matrix")
        return out
    if isinstance(params, FullParams):
        return apply_multi_affine(params.map, label, context)
    if isinstance(params, HosvdParams):
        return tucker_apply(params.factors, label, context)
    raise TypeError(f"unknown aggregator parameters {type(params).__name__}")


def sum_to_tensor(p: SumParams) -> FullParams:
    """Embed a weighted-sum transition into an augmented tensor.

    Only entries whose input indices all sit on homogeneous slots except at
    most one are non-zero: the label block carries W, context slot l carries
    U_l, and the all-homogeneous entry carries the bias.
    """
    L, c, _ = p.U.shape
    m = 0 if p.W is None else p.W.shape[1]
    lead = (m + 1,) if m > 0 else ()
    T = np.zeros(lead + (c + 1,) * L + (c,))
    hom = (m,) if m > 0 else ()
    ctx_hom = [c] * L
    for l in range(L):
        idx = list(ctx_hom)
        idx[l] = slice(0, c)
        T[hom + tuple(idx)] = p.U[l].T
    if m > 0:
        T[(slice(0, m),) + tuple(ctx_hom)] = p.W.T
    T[hom + tuple(ctx_hom)] = p.b
    return FullParams(MultiAffineMap(as_tensor(T), L, c, m))


TABLE = "table"
ALL = "all-scalars"


def param_count(kind: AggregatorKind, convention: str = TABLE) -> int:
    """Number of parameters of one aggregation function.

    ``table`` leaves out the label matrix, Sum's bias and the Tucker
    output matrix; the reference comparison tables count this way.
    ``all-scalars`` counts every learnable entry.
    """
    c, L, m, r = kind.hidden_dim, kind.context_size, kind.label_dim, kind.rank
    if convention == TABLE:
        if kind.tag is Kind.FULL:
            return c * (c + 1) ** L
        if kind.tag is Kind.SUM:
            return L * c * c
        return L * c * r + r * (r + 1) ** L
    if convention == ALL:
        if kind.tag is Kind.FULL:
            return (m + 1 if m > 0 else 1) * (c + 1) ** L * c
        if kind.tag is Kind.SUM:
            return c * m + L * c * c + c
        n_in = L + (1 if m > 0 else 0)
        return m * r + (L + 1) * c * r + r * (r + 1) ** n_in
    raise ValueError(f"unknown counting convention {convention!r}")


# ---------------------------------------------------------------------------
# parameter layout and tape recording for the operator-sliced (m = 0) case


def param_shapes(kind: AggregatorKind) -> dict[str, tuple[int, ...]]:
    c, L, r = kind.hidden_dim, kind.context_size, kind.rank
    if kind.label_dim:
        raise ValueError("tape aggregators are operator-sliced and take no label")
    if kind.tag is Kind.SUM:
        return {"U": (L, c, c), "b": (c,)}
    if kind.tag is Kind.FULL:
        return {"T": (c + 1,) * L + (c,)}
    return {"U": (L, r, c), "G": (r + 1,) * L + (r,), "Q": (c, r)}


def fan_in(kind: AggregatorKind, name: str) -> int:
    """Contraction width feeding each output unit of the named parameter."""
    c, L, r = kind.hidden_dim, kind.context_size, kind.rank
    if kind.tag is Kind.SUM:
        return c
    if kind.tag is Kind.FULL:
        return (c + 1) ** L
    return {"U": c, "G": (r + 1) ** L, "Q": r}[name]


def record_aggregate(kind: AggregatorKind, nodes: dict, context: ad.Node) -> ad.Node:
    """Batched pre-activation on the tape; ``context`` is (B, L, c)."""
    if kind.tag is Kind.SUM:
        return ad.add(ad.sum_axis(ad.slotwise(nodes["U"], context), 1), nodes["b"])
    if kind.tag is Kind.FULL:
        return ad.multi_affine(nodes["T"], context)
    return ad.tucker_apply(nodes["G"], nodes["U"], nodes["Q"], context)


def params_from_arrays(kind: AggregatorKind, arrays: dict) -> AggregatorParams:
    """Wrap a gate's raw arrays (as laid out by :func:`param_shapes`) as typed params."""
    if kind.tag is Kind.SUM:
        return SumParams(np.asarray(arrays["U"]), np.asarray(arrays["b"]))
    if kind.tag is Kind.FULL:
        return FullParams(MultiAffineMap(np.asarray(arrays["T"]), kind.context_size, kind.hidden_dim))
    return HosvdParams(
        TuckerFactors(np.asarray(arrays["G"]), np.asarray(arrays["U"]), np.asarray(arrays["Q"]))
    )
