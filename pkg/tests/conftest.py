import numpy as np
import pytest

from treetensor import autodiff as ad
from treetensor.aggregators import SumParams, sum_to_tensor
from treetensor.tensor import mode_product
from treetensor.treelstm import CellBank, CellConfig, Tree

OPS = ("A", "B", "C")
LEAF_DIM = 3
LEAF_TOKENS = ("x", "y", "z", "w")


def leaf_table(seed=99):
    rng = np.random.default_rng(seed)
    return {t: rng.normal(size=LEAF_DIM) for t in LEAF_TOKENS}


LEAVES = leaf_table()


def leaf_vector(token):
    return LEAVES[token]


def random_bank(aggregator, c, L, r=None, seed=0, scale=0.5, operators=OPS):
    store = ad.ParameterStore()
    bank = CellBank(CellConfig(aggregator, c, L, LEAF_DIM, operators, r), store)
    rng = np.random.default_rng(seed)
    for p in store:
        p.value = rng.normal(scale=scale, size=p.shape)
    return bank


def random_tree(rng, depth, L, full=False, operators=OPS):
    """Tree of exactly ``depth`` operator levels; the first child always recurses."""
    if depth == 0:
        return Tree(LEAF_TOKENS[rng.integers(len(LEAF_TOKENS))])
    n = L if full else int(rng.integers(1, L + 1))
    kids = [random_tree(rng, depth - 1, L, full, operators)]
    for _ in range(n - 1):
        d = depth - 1 if full else int(rng.integers(0, depth))
        kids.append(random_tree(rng, d, L, full, operators))
    return Tree(operators[rng.integers(len(operators))], tuple(kids))


def copy_shared(src: CellBank, dst: CellBank):
    """Copy leaf and forget-gate parameters, which every variant shares in layout."""
    for p in src.store:
        if p.name.startswith("leaf.") or ".f." in p.name:
            dst.store[p.name].value = p.value.copy()


def full_bank_from_sum(bank: CellBank) -> CellBank:
    cfg = bank.cfg
    full = random_bank("full", cfg.hidden_dim, cfg.context_size, operators=cfg.operators)
    copy_shared(bank, full)
    for op in cfg.operators:
        for g in "iou":
            p = bank.gate_params(op, g)
            full.store[f"{op}.{g}.T"].value = np.array(sum_to_tensor(SumParams(p.U, p.b)).map.tensor)
    return full


def invertible(rng, n):
    while True:
        a = rng.normal(size=(n, n))
        if abs(np.linalg.det(a)) > 0.3:
            return a


def full_rank_factors(T, rng):
    """Tucker factors with random invertible mode matrices whose reconstruction is exactly T."""
    L = T.ndim - 1
    c = T.shape[-1]
    modes = np.stack([invertible(rng, c) for _ in range(L)])
    Q = invertible(rng, c)
    G = np.asarray(T, dtype=float)
    for z in range(L):
        blk = np.eye(c + 1)
        blk[:c, :c] = modes[z]
        G = mode_product(G, np.linalg.inv(blk.T), z)
    G = mode_product(G, np.linalg.inv(Q), L)
    return G, modes, Q


def hosvd_bank_from_full(bank: CellBank, seed=0) -> CellBank:
    cfg = bank.cfg
    c = cfg.hidden_dim
    hb = random_bank("hosvd", c, cfg.context_size, r=c, operators=cfg.operators)
    copy_shared(bank, hb)
    rng = np.random.default_rng(seed)
    for op in cfg.operators:
        for g in "iou":
            G, U, Q = full_rank_factors(bank.store[f"{op}.{g}.T"].value, rng)
            hb.store[f"{op}.{g}.G"].value = G
            hb.store[f"{op}.{g}.U"].value = U
            hb.store[f"{op}.{g}.Q"].value = Q
    return hb


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
