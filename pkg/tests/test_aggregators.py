import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treetensor import autodiff as ad
from treetensor.aggregators import (
    ALL,
    TABLE,
    AggregatorKind,
    FullParams,
    HosvdParams,
    Kind,
    SumParams,
    aggregate,
    param_count,
    record_aggregate,
    sum_to_tensor,
)
from treetensor.tensor import MultiAffineMap, TuckerFactors, tucker_reconstruct

from conftest import full_rank_factors


def random_sum(rng, L, c, m=0):
    return SumParams(
        rng.normal(size=(L, c, c)), rng.normal(size=c), rng.normal(size=(c, m)) if m else None
    )


def direct_sum(p, label, ctx):
    out = p.b.copy()
    if p.W is not None:
        out = out + p.W @ label
    for U, h in zip(p.U, ctx):
        out = out + U @ h
    return out


def test_sum_bias_only():
    v = np.array([1.0, -2.0, 3.0])
    p = SumParams(np.zeros((2, 3, 3)), v)
    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(aggregate(p, None, [rng.normal(size=3)] * 2), v)


def test_sum_to_tensor_hand_example():
    full = sum_to_tensor(SumParams(np.array([[[2.0]]]), np.array([3.0])))
    np.testing.assert_array_equal(full.map.tensor, [[2.0], [3.0]])
    np.testing.assert_allclose(aggregate(full, None, [np.array([5.0])]), [13.0])


def test_sum_to_tensor_zero():
    full = sum_to_tensor(SumParams(np.zeros((3, 2, 2)), np.zeros(2), np.zeros((2, 2))))
    assert not full.map.tensor.any()


@settings(max_examples=60, deadline=None)
@given(L=st.sampled_from([1, 2, 3, 5]), c=st.integers(1, 8), m=st.integers(0, 3), seed=st.integers(0, 2**31))
def test_sum_embedding_equivalence(L, c, m, seed):
    if L == 5 and c > 4:
        c = 4
    rng = np.random.default_rng(seed)
    p = random_sum(rng, L, c, m)
    full = sum_to_tensor(p)
    label = rng.normal(size=m) if m else None
    ctx = [rng.normal(size=c) for _ in range(L)]
    ref = direct_sum(p, label, ctx)
    np.testing.assert_allclose(aggregate(p, label, ctx), ref, atol=1e-10)
    assert np.max(np.abs(aggregate(full, label, ctx) - ref)) <= 1e-10


@pytest.mark.parametrize("L,c", [(1, 3), (2, 4), (3, 3)])
def test_full_rank_hosvd_matches_full(L, c):
    rng = np.random.default_rng(L + c)
    T = rng.normal(size=(c + 1,) * L + (c,))
    G, U, Q = full_rank_factors(T, rng)
    hp = HosvdParams(TuckerFactors(G, U, Q))
    fp = FullParams(MultiAffineMap.from_tensor(T, L))
    np.testing.assert_allclose(tucker_reconstruct(hp.factors).tensor, T, atol=1e-9)
    for _ in range(10):
        ctx = [rng.normal(size=c) for _ in range(L)]
        np.testing.assert_allclose(aggregate(hp, None, ctx), aggregate(fp, None, ctx), atol=1e-8)


@pytest.mark.parametrize("tag", ["sum", "full", "hosvd"])
def test_record_aggregate_matches_numpy(tag):
    rng = np.random.default_rng(5)
    L, c, r, B = 3, 3, 2, 4
    kind = AggregatorKind(tag, c, L, 0, r if tag == "hosvd" else None)
    if tag == "sum":
        arrays = {"U": rng.normal(size=(L, c, c)), "b": rng.normal(size=c)}
        params = SumParams(arrays["U"], arrays["b"])
    elif tag == "full":
        arrays = {"T": rng.normal(size=(c + 1,) * L + (c,))}
        params = FullParams(MultiAffineMap.from_tensor(arrays["T"], L))
    else:
        arrays = {"G": rng.normal(size=(r + 1,) * L + (r,)), "U": rng.normal(size=(L, r, c)), "Q": rng.normal(size=(c, r))}
        params = HosvdParams(TuckerFactors(arrays["G"], arrays["U"], arrays["Q"]))
    H = rng.normal(size=(B, L, c))
    tape = ad.Tape()
    out = record_aggregate(kind, {k: tape.const(v) for k, v in arrays.items()}, tape.const(H))
    for b in range(B):
        np.testing.assert_allclose(out.value[b], aggregate(params, None, list(H[b])), atol=1e-12)


def test_aggregate_shape_errors():
    p = SumParams(np.zeros((2, 3, 3)), np.zeros(3))
    with pytest.raises(ValueError):
        aggregate(p, None, [np.zeros(3)])
    with pytest.raises(ValueError):
        aggregate(p, None, [np.zeros(3), np.zeros(2)])


# reference parameter counts: (tag, c, L, r) -> value
TABLE_I = [
    ("full", 3, 2, None, 48), ("full", 5, 2, None, 180), ("full", 10, 2, None, 1210),
    ("full", 20, 2, None, 8820), ("full", 50, 2, None, 130050), ("full", 100, 2, None, 1020100),
    ("sum", 3, 2, None, 18), ("sum", 5, 2, None, 50), ("sum", 10, 2, None, 200),
    ("sum", 20, 2, None, 800), ("sum", 50, 2, None, 5000), ("sum", 100, 2, None, 20000),
    ("hosvd", 10, 2, 7, 588), ("hosvd", 20, 2, 15, 4440), ("hosvd", 50, 2, 30, 31830),
    ("hosvd", 100, 2, 20, 12820),
]
TABLE_II = [
    ("full", 3, 5, None, 3072), ("full", 5, 5, None, 38880), ("full", 7, 5, None, 229376),
    ("sum", 25, 5, None, 3125), ("sum", 88, 5, None, 38720), ("sum", 214, 5, None, 228980),
    ("hosvd", 10, 5, 3, 3222), ("hosvd", 20, 5, 3, 3372), ("hosvd", 50, 5, 3, 3822),
]


@pytest.mark.parametrize("tag,c,L,r,expected", TABLE_I + TABLE_II)
def test_param_count_tables(tag, c, L, r, expected):
    assert param_count(AggregatorKind(tag, c, L, 0, r), TABLE) == expected


def test_param_count_all_scalars_formulas():
    assert param_count(AggregatorKind("full", 3, 2, 4), ALL) == 5 * 16 * 3
    assert param_count(AggregatorKind("sum", 10, 2, 0), ALL) == 210
    assert param_count(AggregatorKind("sum", 10, 2, 4), ALL) == 40 + 200 + 10
    assert param_count(AggregatorKind("hosvd", 10, 2, 6, 3), ALL) == 18 + 3 * 30 + 3 * 4**3
    assert param_count(AggregatorKind("hosvd", 10, 2, 0, 3), ALL) == 2 * 30 + 30 + 3 * 4**2


def test_param_count_matches_parameter_storage():
    from treetensor.aggregators import param_shapes

    for kind in [AggregatorKind("sum", 6, 3), AggregatorKind("full", 3, 2), AggregatorKind("hosvd", 7, 4, 0, 2)]:
        stored = sum(int(np.prod(s)) for s in param_shapes(kind).values())
        assert stored == param_count(kind, ALL)


@given(c=st.integers(1, 60), L=st.integers(1, 6), r=st.integers(1, 10))
def test_hosvd_table_count_monotone(c, L, r):
    k = lambda c_, r_: param_count(AggregatorKind("hosvd", c_, L, 0, r_), TABLE)
    assert k(c, r + 1) > k(c, r)
    assert k(c + 1, r) > k(c, r)


def test_kind_validation():
    with pytest.raises(ValueError):
        AggregatorKind("hosvd", 3, 2)
    with pytest.raises(ValueError):
        AggregatorKind("sum", 0, 2)
    assert AggregatorKind("sum", 3, 2).tag is Kind.SUM
