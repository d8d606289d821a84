"""Dense tensors, multi-affine maps and Tucker factors.

Every map here works in homogeneous coordinates: an input vector ``v`` is
extended to ``[v; 1]`` before it is contracted against a tensor, so a single
tensor carries the multilinear terms, all lower-order cross terms and the
bias. Tensors are plain float64 numpy arrays in row-major order.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not line up."""


def as_tensor(x) -> np.ndarray:
    """Return a read-only, C-contiguous float64 copy of ``x``."""
    t = np.array(x, dtype=np.float64, order="C", copy=True)
    if t.ndim == 0 or any(d < 1 for d in t.shape):
        raise ShapeError(f"tensor needs a non-empty shape with positive extents, got {t.shape}")
    t.flags.writeable = False
    return t


def tensor_to_bytes(t: np.ndarray) -> bytes:
    """Serialize as ``ndim`` (u32), the extents (u64 each) and little-endian float64 data."""
    t = np.asarray(t, dtype=np.float64)
    header = struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}Q", *t.shape)
    return header + np.ascontiguousarray(t).astype("<f8").tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Inverse of :func:`tensor_to_bytes`; returns the tensor and the next offset."""
    (ndim,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    shape = struct.unpack_from(f"<{ndim}Q", buf, offset)
    offset += 8 * ndim
    n = int(np.prod(shape))
    data = np.frombuffer(buf, dtype="<f8", count=n, offset=offset).astype(np.float64)
    return data.reshape(shape), offset + 8 * n


def augment(v: np.ndarray) -> np.ndarray:
    """Append the homogeneous coordinate along the last axis."""
    v = np.asarray(v, dtype=np.float64)
    return np.concatenate([v, np.ones(v.shape[:-1] + (1,))], axis=-1)


# ---------------------------------------------------------------------------
# batched contraction kernels (shared with the autodiff primitives)


def outer_rows(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Row-wise outer product: list of (B, d_s) -> (B, prod d_s), first factor most significant."""
    z = vectors[0]
    b = z.shape[0]
    for v in vectors[1:]:
        z = (z[:, :, None] * v[:, None, :]).reshape(b, -1)
    return z


def contract(tensor: np.ndarray, inputs: Sequence[np.ndarray]) -> np.ndarray:
    """Contract all input modes of ``tensor`` against (already augmented) batched inputs.

    ``tensor`` has shape (D_1, ..., D_p, k) and ``inputs[s]`` has shape (B, D_s).
    Returns (B, k).
    """
    if len(inputs) != tensor.ndim - 1:
        raise ShapeError(f"tensor has {tensor.ndim - 1} input modes, got {len(inputs)} inputs")
    for s, x in enumerate(inputs):
        if x.ndim != 2 or x.shape[1] != tensor.shape[s]:
            raise ShapeError(f"input {s} has shape {x.shape}, mode extent is {tensor.shape[s]}")
    z = outer_rows(inputs)
    return z @ tensor.reshape(z.shape[1], tensor.shape[-1])


def contract_vjp(tensor: np.ndarray, inputs: Sequence[np.ndarray], g: np.ndarray):
    """Adjoints of :func:`contract` w.r.t. the tensor and every (augmented) input."""
    b = g.shape[0]
    dims = tensor.shape[:-1]
    z = outer_rows(inputs)
    flat = tensor.reshape(z.shape[1], tensor.shape[-1])
    g_tensor = (z.T @ g).reshape(tensor.shape)
    gz = g @ flat.T
    g_inputs = []
    for s in range(len(inputs)):
        x = gz
        # peel trailing modes, then leading ones, leaving mode s
        for t in range(len(inputs) - 1, s, -1):
            x = (x.reshape(b, -1, dims[t]) @ inputs[t][:, :, None])[:, :, 0]
        for t in range(s):
            x = (inputs[t][:, None, :] @ x.reshape(b, dims[t], -1))[:, 0, :]
        g_inputs.append(x)
    return g_tensor, g_inputs


# ---------------------------------------------------------------------------
# maps


@dataclass(frozen=True)
class MultiAffineMap:
    """Augmented tensor of shape ``[m+1 (if m>0), c+1 (x L), c]``."""

    tensor: np.ndarray
    context_size: int
    hidden_dim: int
    label_dim: int = 0

    def __post_init__(self):
        L, c, m = self.context_size, self.hidden_dim, self.label_dim
        expected = ((m + 1,) if m > 0 else ()) + (c + 1,) * L + (c,)
        if tuple(self.tensor.shape) != expected:
            raise ShapeError(f"augmented tensor shape {self.tensor.shape} != {expected}")

    @classmethod
    def from_tensor(cls, tensor, context_size: int, label_dim: int = 0) -> "MultiAffineMap":
        t = as_tensor(tensor)
        return cls(t, context_size, t.shape[-1], label_dim)


@dataclass(frozen=True)
class TuckerFactors:
    """Core tensor plus mode matrices; all ranks equal ``rank``.

    ``context_modes`` is stacked as (L, r, c). ``core`` has one mode of extent
    r+1 per input (label first when present) and an output mode of extent r.
    """

    core: np.ndarray
    context_modes: np.ndarray
    output_mode: np.ndarray
    label_mode: Optional[np.ndarray] = None

    def __post_init__(self):
        L, r, c = self.context_modes.shape
        n_in = L + (1 if self.label_mode is not None else 0)
        if self.core.shape != (r + 1,) * n_in + (r,):
            raise ShapeError(f"core shape {self.core.shape} inconsistent with L={L}, r={r}")
        if self.output_mode.shape != (c, r):
            raise ShapeError(f"output mode shape {self.output_mode.shape} != {(c, r)}")
        if self.label_mode is not None and self.label_mode.shape[0] != r:
            raise ShapeError(f"label mode shape {self.label_mode.shape} has wrong rank")

    @property
    def rank(self) -> int:
        return self.context_modes.shape[1]

    @property
    def context_size(self) -> int:
        return self.context_modes.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.context_modes.shape[2]

    @property
    def label_dim(self) -> int:
        return 0 if self.label_mode is None else self.label_mode.shape[1]


def _check_inputs(L: int, c: int, m: int, label, context) -> list[np.ndarray]:
    if len(context) != L:
        raise ShapeError(f"expected {L} context vectors, got {len(context)}")
    vecs = []
    if m > 0:
        if label is None:
            raise ShapeError("map expects a label input")
        label = np.asarray(label, dtype=np.float64)
        if label.shape != (m,):
            raise ShapeError(f"label has shape {label.shape}, expected {(m,)}")
        vecs.append(label)
    elif label is not None:
        raise ShapeError("map has no label mode but a label was given")
    for h in context:
        h = np.asarray(h, dtype=np.float64)
        if h.shape != (c,):
            raise ShapeError(f"context vector has shape {h.shape}, expected {(c,)}")
        vecs.append(h)
    return vecs


def apply_multi_affine(fmap: MultiAffineMap, label, context) -> np.ndarray:
    """Evaluate the multi-affine map on one (label, context) input. No nonlinearity."""
    vecs = _check_inputs(fmap.context_size, fmap.hidden_dim, fmap.label_dim, label, context)
    return contract(fmap.tensor, [augment(v)[None, :] for v in vecs])[0]


def mode_product(t: np.ndarray, mat: np.ndarray, mode: int) -> np.ndarray:
    """Mode-n product: replaces extent ``t.shape[mode]`` with ``mat.shape[0]``."""
    t = np.asarray(t, dtype=np.float64)
    mat = np.asarray(mat, dtype=np.float64)
    if not 0 <= mode < t.ndim:
        raise ShapeError(f"mode {mode} out of range for a {t.ndim}-way tensor")
    if mat.ndim != 2 or mat.shape[1] != t.shape[mode]:
        raise ShapeError(f"matrix {mat.shape} cannot act on mode {mode} of extent {t.shape[mode]}")
    return np.moveaxis(np.tensordot(mat, t, axes=(1, mode)), 0, mode)


def tucker_apply(f: TuckerFactors, label, context) -> np.ndarray:
    """Project inputs to rank space, contract the core there, map back with the output mode."""
    vecs = _check_inputs(f.context_size, f.hidden_dim, f.label_dim, label, context)
    mats = ([f.label_mode] if f.label_mode is not None else []) + list(f.context_modes)
    reduced = [augment(u @ v)[None, :] for u, v in zip(mats, vecs)]
    return f.output_mode @ contract(f.core, reduced)[0]


def _homogeneous_block(u: np.ndarray) -> np.ndarray:
    """(r, d) -> (r+1, d+1) with the homogeneous coordinate mapped to itself."""
    r, d = u.shape
    out = np.zeros((r + 1, d + 1))
    out[:r, :d] = u
    out[r, d] = 1.0
    return out


def tucker_reconstruct(f: TuckerFactors) -> MultiAffineMap:
    """Materialize the full augmented tensor represented by the factors."""
    mats = ([f.label_mode] if f.label_mode is not None else []) + list(f.context_modes)
    t = f.core
    for z, u in enumerate(mats):
        t = mode_product(t, _homogeneous_block(u).T, z)
    t = mode_product(t, f.output_mode, len(mats))
    return MultiAffineMap(as_tensor(t), f.context_size, f.hidden_dim, f.label_dim)
