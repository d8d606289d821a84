import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treetensor.tensor import (
    MultiAffineMap,
    ShapeError,
    TuckerFactors,
    apply_multi_affine,
    as_tensor,
    mode_product,
    tensor_from_bytes,
    tensor_to_bytes,
    tucker_apply,
    tucker_reconstruct,
)


def brute_multi_affine(T, label, context):
    """Direct sum over every index tuple of the augmented tensor."""
    vecs = ([np.append(label, 1.0)] if label is not None else []) + [np.append(h, 1.0) for h in context]
    out = np.zeros(T.shape[-1])
    for idx in itertools.product(*[range(d) for d in T.shape[:-1]]):
        w = 1.0
        for v, i in zip(vecs, idx):
            w *= v[i]
        out += T[idx] * w
    return out


def random_map(rng, L, c, m=0):
    shape = ((m + 1,) if m else ()) + (c + 1,) * L + (c,)
    return MultiAffineMap.from_tensor(rng.normal(size=shape), L, m)


def random_factors(rng, L, c, r, m=0):
    n_in = L + (1 if m else 0)
    return TuckerFactors(
        core=rng.normal(size=(r + 1,) * n_in + (r,)),
        context_modes=rng.normal(size=(L, r, c)),
        output_mode=rng.normal(size=(c, r)),
        label_mode=rng.normal(size=(r, m)) if m else None,
    )


def test_pure_bias_tensor():
    rng = np.random.default_rng(0)
    L, c, m = 2, 3, 2
    T = np.zeros((m + 1,) + (c + 1,) * L + (c,))
    b = rng.normal(size=c)
    T[m, c, c] = b
    fmap = MultiAffineMap.from_tensor(T, L, m)
    for _ in range(5):
        out = apply_multi_affine(fmap, rng.normal(size=m), [rng.normal(size=c) for _ in range(L)])
        np.testing.assert_array_equal(out, b)


def test_hand_contraction_product():
    T = np.zeros((2, 2, 1))
    T[0, 0, 0] = 1.0
    fmap = MultiAffineMap.from_tensor(T, 2)
    np.testing.assert_allclose(apply_multi_affine(fmap, None, [[2.0], [3.0]]), [6.0])


@pytest.mark.parametrize("L,c,m", [(1, 3, 0), (2, 2, 0), (3, 2, 1), (2, 3, 2)])
def test_apply_matches_brute_force(L, c, m):
    rng = np.random.default_rng(L * 10 + c + m)
    fmap = random_map(rng, L, c, m)
    for _ in range(5):
        label = rng.normal(size=m) if m else None
        ctx = [rng.normal(size=c) for _ in range(L)]
        np.testing.assert_allclose(
            apply_multi_affine(fmap, label, ctx), brute_multi_affine(fmap.tensor, label, ctx), atol=1e-12
        )


def test_shape_errors():
    fmap = random_map(np.random.default_rng(1), 2, 3)
    with pytest.raises(ShapeError):
        apply_multi_affine(fmap, None, [np.zeros(3)])
    with pytest.raises(ShapeError):
        apply_multi_affine(fmap, None, [np.zeros(3), np.zeros(4)])
    with pytest.raises(ShapeError):
        apply_multi_affine(fmap, np.zeros(2), [np.zeros(3), np.zeros(3)])
    with pytest.raises(ShapeError):
        MultiAffineMap(np.zeros((4, 4, 2)), 2, 3)


@settings(max_examples=40, deadline=None)
@given(
    L=st.integers(1, 3),
    c=st.integers(1, 4),
    m=st.integers(0, 2),
    slot=st.integers(0, 3),
    alpha=st.floats(-3, 3),
    seed=st.integers(0, 2**31),
)
def test_multi_affinity(L, c, m, slot, alpha, seed):
    rng = np.random.default_rng(seed)
    fmap = random_map(rng, L, c, m)
    label = rng.normal(size=m) if m else None
    ctx = [rng.normal(size=c) for _ in range(L)]
    n_slots = L + (1 if m else 0)
    slot = slot % n_slots

    def f(v):
        if m and slot == 0:
            return apply_multi_affine(fmap, v, ctx)
        j = slot - (1 if m else 0)
        cc = list(ctx)
        cc[j] = v
        return apply_multi_affine(fmap, label, cc)

    d = m if (m and slot == 0) else c
    a, b = rng.normal(size=d), rng.normal(size=d)
    lhs = f(alpha * a + (1 - alpha) * b)
    rhs = alpha * f(a) + (1 - alpha) * f(b)
    assert np.max(np.abs(lhs - rhs)) <= 1e-9 * max(1.0, np.max(np.abs(rhs)))


def test_mode_product_hand_sum():
    out = mode_product(np.ones((2, 2, 2)), np.array([[1.0, 1.0]]), 0)
    assert out.shape == (1, 2, 2)
    np.testing.assert_array_equal(out, np.full((1, 2, 2), 2.0))


def test_mode_product_identity_and_commute():
    rng = np.random.default_rng(2)
    t = rng.normal(size=(3, 4, 5))
    for mode, d in enumerate(t.shape):
        np.testing.assert_array_equal(mode_product(t, np.eye(d), mode), t)
    A, B = rng.normal(size=(2, 3)), rng.normal(size=(6, 5))
    ab = mode_product(mode_product(t, A, 0), B, 2)
    ba = mode_product(mode_product(t, B, 2), A, 0)
    np.testing.assert_allclose(ab, ba, atol=1e-12)


def test_mode_product_matches_loops():
    rng = np.random.default_rng(3)
    t = rng.normal(size=(2, 3, 4))
    A = rng.normal(size=(5, 3))
    out = mode_product(t, A, 1)
    ref = np.zeros((2, 5, 4))
    for i, j, k, l in itertools.product(range(2), range(5), range(4), range(3)):
        ref[i, j, k] += A[j, l] * t[i, l, k]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_mode_product_errors():
    with pytest.raises(ShapeError):
        mode_product(np.ones((2, 2)), np.ones((1, 2)), 2)
    with pytest.raises(ShapeError):
        mode_product(np.ones((2, 2)), np.ones((1, 3)), 0)


def test_tucker_zero_core():
    rng = np.random.default_rng(4)
    f = random_factors(rng, 2, 3, 2)
    f = TuckerFactors(np.zeros_like(f.core), f.context_modes, f.output_mode)
    np.testing.assert_array_equal(tucker_apply(f, None, [rng.normal(size=3)] * 2), np.zeros(3))
    np.testing.assert_array_equal(tucker_reconstruct(f).tensor, 0.0)


def test_tucker_rank_one_sums_inputs():
    c = 4
    core = np.zeros((2, 1))
    core[0, 0] = 1.0
    f = TuckerFactors(core, np.ones((1, 1, c)), np.ones((c, 1)))
    h = np.array([1.0, -2.0, 0.5, 3.0])
    np.testing.assert_allclose(tucker_apply(f, None, [h]), np.full(c, h.sum()))


def brute_tucker_tensor(f):
    """Reconstruction straight from the factorisation sum, homogeneous slots handled by hand."""
    mats = ([f.label_mode] if f.label_mode is not None else []) + list(f.context_modes)
    r = f.rank
    ext = []
    for u in mats:
        e = np.zeros((r + 1, u.shape[1] + 1))
        e[:r, :-1] = u
        e[r, -1] = 1.0
        ext.append(e)
    shape = tuple(e.shape[1] for e in ext) + (f.hidden_dim,)
    T = np.zeros(shape)
    for idx in itertools.product(*[range(d) for d in shape[:-1]]):
        for jdx in itertools.product(*[range(r + 1)] * len(ext)):
            w = np.prod([e[j, i] for e, j, i in zip(ext, jdx, idx)])
            if w != 0.0:
                T[idx] += w * (f.output_mode @ f.core[jdx])
    return T


@pytest.mark.parametrize("L,c,r,m", [(1, 2, 2, 0), (2, 2, 1, 0), (2, 3, 2, 1)])
def test_reconstruct_matches_factorisation_sum(L, c, r, m):
    f = random_factors(np.random.default_rng(5 + L + c), L, c, r, m)
    np.testing.assert_allclose(tucker_reconstruct(f).tensor, brute_tucker_tensor(f), atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(L=st.integers(1, 3), c=st.integers(1, 6), r=st.integers(1, 4), m=st.integers(0, 2), seed=st.integers(0, 2**31))
def test_tucker_apply_reconstruct_consistency(L, c, r, m, seed):
    rng = np.random.default_rng(seed)
    f = random_factors(rng, L, c, r, m)
    T = tucker_reconstruct(f)
    label = rng.normal(size=m) if m else None
    ctx = [rng.normal(size=c) for _ in range(L)]
    a, b = tucker_apply(f, label, ctx), apply_multi_affine(T, label, ctx)
    assert np.max(np.abs(a - b)) <= 1e-8 * max(1.0, np.max(np.abs(b)))


def test_full_rank_identity_embedding_reproduces_tensor():
    rng = np.random.default_rng(6)
    L, c = 2, 2
    T = rng.normal(size=(c + 1,) * L + (c,))
    f = TuckerFactors(T, np.stack([np.eye(c)] * L), np.eye(c))
    np.testing.assert_array_equal(tucker_reconstruct(f).tensor, T)


def test_contractions_deterministic():
    rng = np.random.default_rng(7)
    fmap = random_map(rng, 3, 4)
    ctx = [rng.normal(size=4) for _ in range(3)]
    assert apply_multi_affine(fmap, None, ctx).tobytes() == apply_multi_affine(fmap, None, ctx).tobytes()


def test_serialization_round_trip_and_immutability():
    t = as_tensor(np.arange(24.0).reshape(2, 3, 4) / 7)
    back, end = tensor_from_bytes(tensor_to_bytes(t))
    assert end == len(tensor_to_bytes(t))
    assert back.tobytes() == t.tobytes()
    with pytest.raises(ValueError):
        t[0, 0, 0] = 1.0
    with pytest.raises(ShapeError):
        as_tensor(np.zeros((0, 2)))
