import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import central_diff, rel_err
from ttcompress.embedding import TTMEmbedding, balanced_split, build_plan
from ttcompress.tensor import count_flops
from ttcompress.tt import init_ttm, ttm_to_matrix


def make(rows, cols, rank, seed=0, split=None):
    emb = TTMEmbedding(rows, cols, rank, seed=seed, split=split)
    r = np.random.default_rng(seed + 99)
    for g in emb.table.diags:
        g[:] = r.uniform(0.5, 1.5, g.size)
    return emb


def test_plan_examples():
    p = build_plan([5, 5, 5], (3, 4), 1)
    assert list(p.unique_rows) == [5] and list(p.inverse_map) == [0, 0, 0]
    p = build_plan([7], (3, 4), 1)
    assert (p.j1[0], p.j2[0]) == (1, 3)
    p = build_plan([4, 1, 9, 2], (3, 4), 1)
    assert p.unique_rows.size == 4
    assert list(p.unique_rows) == [4, 1, 9, 2]
    with pytest.raises(IndexError):
        build_plan([12], (3, 4), 1)


def test_plan_first_occurrence_order():
    p = build_plan([3, 1, 3, 0, 1], (2, 2), 1)
    assert list(p.unique_rows) == [3, 1, 0]
    assert list(p.unique_rows[p.inverse_map]) == [3, 1, 3, 0, 1]


def test_groups_d2_equal_cores():
    emb = make((3, 4), (2, 2), 3, split=1)
    a1, a2 = emb.precompute_groups()
    f = emb.table.folded_cores()
    assert np.array_equal(a1, f[0][0])
    assert np.array_equal(a2, f[1][..., 0])


def test_groups_d4_reconstruct():
    emb = make((2, 3, 2, 2), (2, 1, 2, 2), (1, 2, 3, 2, 1), seed=1, split=2)
    a1, a2 = emb.precompute_groups()
    table = np.einsum("uNr,rvM->uvNM", a1, a2)
    dense = ttm_to_matrix(emb.table)
    assert rel_err(table.reshape(dense.shape), dense) < 1e-12


def test_rank_one_groups_outer_product():
    emb = make((2, 3, 2), (2, 2, 1), 1, seed=2, split=2)
    a1, _ = emb.precompute_groups()
    f = emb.table.folded_cores()
    ref = np.einsum("ab,cd->acbd", f[0][0, :, :, 0], f[1][0, :, :, 0]).reshape(6, 4)
    assert rel_err(a1[..., 0], ref) < 1e-14


def test_lookup_dense_gather(rng):
    emb = make((6, 4), (2, 2), 3, seed=3)
    dense = ttm_to_matrix(emb.table)
    ids = rng.integers(0, 24, 20)
    ids[5] = ids[0]
    assert rel_err(emb.lookup(ids), dense[ids]) < 1e-11
    assert rel_err(emb.lookup([0]), dense[:1]) < 1e-12


def test_lookup_out_of_range():
    emb = make((3, 4), (2, 2), 2)
    with pytest.raises(IndexError):
        emb.lookup([12])
    with pytest.raises(IndexError):
        emb.lookup_naive([-1])


def test_dedup_saves_work():
    emb = make((10, 10, 10), (2, 2, 4), 3, seed=4)
    ids = np.random.default_rng(0).choice(np.arange(0, 1000, 97)[:10], 100)
    with count_flops() as dedup:
        emb.lookup(ids)
    with count_flops() as naive:
        emb.lookup_naive(ids)
    assert naive.total >= 2 * dedup.total


def test_backward_fd(rng):
    emb = make((4, 4), (2, 2), 2, seed=5)
    ids = np.array([1, 5, 1, 15, 0, 5, 7])
    g_out = rng.standard_normal((7, 4))
    emb.lookup(ids)
    g_cores, g_diags = emb.backward(g_out)
    f = lambda: float(np.sum(emb.lookup(ids) * g_out))
    for c, g in zip(emb.table.cores, g_cores):
        assert rel_err(g, central_diff(f, c)) < 1e-5
    for d, g in zip(emb.table.diags, g_diags):
        assert rel_err(g, central_diff(f, d)) < 1e-5


def test_backward_zero_and_shape(rng):
    emb = make((4, 4), (2, 2), 2)
    with pytest.raises(RuntimeError):
        emb.backward(np.zeros((1, 4)))
    emb.lookup([1, 2])
    g_cores, g_diags = emb.backward(np.zeros((2, 4)))
    assert all(not np.any(g) for g in g_cores + g_diags)
    with pytest.raises(ValueError):
        emb.backward(np.zeros((3, 4)))


def test_duplicates_accumulate(rng):
    emb = make((4, 4), (2, 2), 2, seed=6)
    row = rng.standard_normal((1, 4))
    emb.lookup([3])
    single, _ = emb.backward(row)
    emb.lookup([3, 3])
    double, _ = emb.backward(np.vstack([row, row]))
    for a, b in zip(single, double):
        assert np.allclose(2 * a, b, rtol=1e-13, atol=1e-15)


def test_balanced_split():
    t = init_ttm((10, 10, 10, 10), (2, 2, 2, 2), 4)
    assert balanced_split(t) == 2
    with pytest.raises(ValueError):
        TTMEmbedding((4, 4), (2, 2), 2, split=2)


# properties ---------------------------------------------------------------

@st.composite
def setups(draw):
    d = draw(st.integers(2, 4))
    rows = draw(st.lists(st.integers(1, 4), min_size=d, max_size=d))
    cols = draw(st.lists(st.integers(1, 3), min_size=d, max_size=d))
    rank = draw(st.integers(1, 3))
    split = draw(st.integers(1, d - 1))
    vocab = int(np.prod(rows))
    ids = draw(st.lists(st.integers(0, vocab - 1), min_size=1, max_size=30))
    return make(rows, cols, rank, seed=draw(st.integers(0, 1000)), split=split), np.array(ids)


@given(setups())
def test_dedup_transparent(setup):
    emb, ids = setup
    fast, slow = emb.lookup(ids), emb.lookup_naive(ids)
    dense = ttm_to_matrix(emb.table)[ids]
    assert np.max(np.abs(fast - slow)) <= 1e-10 * max(1.0, np.max(np.abs(slow)))
    assert np.max(np.abs(fast - dense)) <= 1e-10 * max(1.0, np.max(np.abs(dense)))


@given(setups())
def test_plan_inverse_reproduces_batch(setup):
    emb, ids = setup
    p = emb.build_plan(ids)
    assert np.array_equal(p.unique_rows[p.inverse_map], ids)
    assert len(set(p.unique_rows.tolist())) == p.unique_rows.size


@given(setups())
def test_dedup_cost_monotone(setup):
    emb, ids = setup
    with count_flops() as fast:
        emb.lookup(ids)
    with count_flops() as slow:
        emb.lookup_naive(ids)
    assert fast.total <= slow.total
    if len(set(ids.tolist())) < ids.size:
        assert fast.total < slow.total or slow.total == 0


@given(setups(), st.integers(0, 2**20))
def test_dot_product_consistency(setup, seed):
    emb, ids = setup
    r = np.random.default_rng(seed)
    g_out = r.standard_normal((ids.size, emb.embedding_dim))
    emb.lookup(ids)
    g_cores, _ = emb.backward(g_out)
    v = [r.standard_normal(c.shape) for c in emb.table.cores]
    base = [c.copy() for c in emb.table.cores]
    h = 1e-6

    def value(sign):
        for c, b0, dv in zip(emb.table.cores, base, v):
            c[...] = b0 + sign * h * dv
        return float(np.sum(emb.lookup(ids) * g_out))

    directional = (value(1) - value(-1)) / (2 * h)
    for c, b0 in zip(emb.table.cores, base):
        c[...] = b0
    analytic = sum(float(np.sum(g * dv)) for g, dv in zip(g_cores, v))
    assert abs(analytic - directional) <= 1e-6 * max(1.0, abs(directional))
