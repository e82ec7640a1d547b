import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import rel_err
from ttcompress.tensor import (
    EinsumError,
    contract_pair,
    count_flops,
    einsum,
    frobenius_norm_sq,
    mixed_radix_decode,
    mixed_radix_encode,
    parse_einsum,
    reshape,
)


def loop_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def test_matmul_worked_example():
    a = [[1, 2], [3, 4]]
    b = [[5, 6], [7, 8]]
    expected = loop_matmul(np.array(a, float), np.array(b, float))
    assert np.array_equal(expected, [[19, 22], [43, 50]])
    assert np.array_equal(einsum("ik,kj->ij", a, b), expected)


def test_batched_matmul(rng):
    a = rng.standard_normal((3, 4, 5))
    b = rng.standard_normal((3, 5, 2))
    out = einsum("bmk,bkn->bmn", a, b)
    for i in range(3):
        assert rel_err(out[i], loop_matmul(a[i], b[i])) < 1e-12


def test_identity_expression(rng):
    x = rng.standard_normal((3, 4))
    assert np.array_equal(einsum("ij->ij", x), x)


def test_scalar_output(rng):
    a, b = rng.standard_normal(3), rng.standard_normal(3)
    out = einsum("a,a->", a, b)
    assert out.shape == () and np.isclose(out, a @ b)
    assert einsum("ab->", np.ones((2, 3))).shape == ()


def test_transpose_and_reduce(rng):
    x = rng.standard_normal((2, 3, 4))
    assert np.allclose(einsum("ijk->kj", x), x.sum(axis=0).T)


def test_three_operands_match_numpy(rng):
    a, b, c = rng.standard_normal((3, 4)), rng.standard_normal((4, 5)), rng.standard_normal((5, 3, 2))
    ours = einsum("ij,jk,kil->l", a, b, c)
    assert rel_err(ours, np.einsum("ij,jk,kil->l", a, b, c)) < 1e-12


@pytest.mark.parametrize("expr, shapes, match", [
    ("ij,jk->ik", [(2, 3), (4, 5)], "'j'"),
    ("ij,jk->iq", [(2, 3), (3, 5)], "'q'"),
    ("ij,jk", [(2, 3), (3, 5)], "explicit"),
    ("ijk,jk->i", [(2, 3), (3, 5)], "order"),
    ("ii->i", [(2, 2)], "repeated"),
    ("ij->i", [(2, 2), (2, 2)], "operands"),
])
def test_einsum_errors(expr, shapes, match):
    ops = [np.ones(s) for s in shapes]
    with pytest.raises(EinsumError, match=match):
        einsum(expr, *ops)


def test_parse_roundtrip():
    e = parse_einsum("ab, bc -> ac")
    assert e.inputs == ("ab", "bc") and e.output == "ac"
    assert str(e) == "ab,bc->ac"


def test_flop_count_is_union_product(rng):
    a, b = rng.standard_normal((4, 3)), rng.standard_normal((3, 5))
    with count_flops() as fc:
        einsum("ik,kj->ij", a, b)
    assert fc.total == 4 * 3 * 5
    with count_flops() as fc:
        einsum("i,j->ij", np.ones(4), np.ones(6))
    assert fc.total == 24
    with count_flops() as fc:
        einsum("ijk->kj", rng.standard_normal((2, 3, 4)))
    assert fc.total == 0


def test_nested_counters(rng):
    a = rng.standard_normal((2, 2))
    with count_flops() as outer:
        einsum("ij,jk->ik", a, a)
        with count_flops() as inner:
            einsum("ij,jk->ik", a, a)
    assert inner.total == 8 and outer.total == 16


# contract_pair -----------------------------------------------------------


def test_contract_pair_matmul(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    assert rel_err(contract_pair(a, b, [(1, 0)]), loop_matmul(a, b)) < 1e-12


def test_contract_pair_identity(rng):
    t = rng.standard_normal((2, 3, 4))
    out = contract_pair(t, np.eye(3), [(1, 0)])
    assert np.array_equal(out, t.transpose(0, 2, 1))


def test_contract_pair_order3(rng):
    a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5, 2))
    out = contract_pair(a, b, [(2, 0)])
    assert out.shape == (2, 3, 5, 2)
    assert rel_err(out, einsum("abc,cde->abde", a, b)) < 1e-12
    two = contract_pair(a, b, [(2, 0), (0, 2)])
    assert rel_err(two, np.einsum("abc,cda->bd", a, b)) < 1e-12


@pytest.mark.parametrize("axes", [[(3, 0)], [(0, 0)], [(2, 0), (2, 1)]])
def test_contract_pair_errors(rng, axes):
    with pytest.raises(EinsumError):
        contract_pair(np.ones((2, 3, 4)), np.ones((4, 4)), axes)


# reshape / radix / norm ------------------------------------------------------


def test_reshape():
    assert np.array_equal(reshape(np.arange(4.0), (2, 2)), [[0, 1], [2, 3]])
    x = np.arange(2 * 12 * 8 * 8 * 8 * 8 * 12.0).reshape(2, -1)
    y = reshape(x, (2, 12, 8, 8, 8, 8, 12))
    assert np.array_equal(reshape(y, x.shape), x)
    with pytest.raises(ValueError):
        reshape(np.ones(6), (4,))


def test_mixed_radix_examples():
    assert mixed_radix_decode(0, (80, 50, 54, 50)) == (0, 0, 0, 0)
    table = list(itertools.product(range(3), range(4)))
    assert mixed_radix_decode(7, (3, 4)) == table[7] == (1, 3)
    for i in range(12):
        assert mixed_radix_decode(i, (3, 4)) == table[i]
    with pytest.raises(IndexError):
        mixed_radix_decode(12, (3, 4))
    with pytest.raises(IndexError):
        mixed_radix_encode((0, 4), (3, 4))


def test_radix_exhaustive_roundtrip():
    dims = (2, 3, 2)
    for i in range(12):
        assert mixed_radix_encode(mixed_radix_decode(i, dims), dims) == i


@given(st.lists(st.integers(1, 6), min_size=1, max_size=4), st.data())
def test_radix_roundtrip_property(dims, data):
    i = data.draw(st.integers(0, math.prod(dims) - 1))
    digits = mixed_radix_decode(i, dims)
    assert sum(z * math.prod(dims[k + 1:]) for k, z in enumerate(digits)) == i
    assert mixed_radix_encode(digits, dims) == i


def test_frobenius(rng):
    assert frobenius_norm_sq(np.zeros((3, 3))) == 0
    assert frobenius_norm_sq([[3, 4]]) == 25
    x = rng.standard_normal((4, 5, 6))
    ref = 0.0
    for v in x.ravel():
        ref += v * v
    assert abs(frobenius_norm_sq(x) - ref) <= 1e-12 * ref


# properties -------------------------------------------------------------------

small = st.integers(1, 4)


@given(small, small, small, small, st.floats(-3, 3), st.integers(0, 2**31))
def test_multilinear(i, j, k, l, c, seed):
    r = np.random.default_rng(seed)
    a, b = r.uniform(-1, 1, (i, j)), r.uniform(-1, 1, (j, k, l))
    base = einsum("ij,jkl->ikl", a, b)
    assert np.allclose(einsum("ij,jkl->ikl", c * a, b), c * base, rtol=1e-12, atol=1e-14)


@given(small, small, small, small, st.integers(0, 2**31))
def test_grouping_independence(i, j, k, l, seed):
    r = np.random.default_rng(seed)
    a, b, c = r.uniform(-1, 1, (i, j)), r.uniform(-1, 1, (j, k)), r.uniform(-1, 1, (k, l))
    left = einsum("ij,jk,kl->il", a, b, c)
    right = einsum("ij,jl->il", a, einsum("jk,kl->jl", b, c))
    one_shot = np.einsum("ij,jk,kl->il", a, b, c)
    scale = max(1.0, np.max(np.abs(one_shot)))
    assert np.max(np.abs(left - one_shot)) <= 1e-10 * scale
    assert np.max(np.abs(right - one_shot)) <= 1e-10 * scale


@given(small, small, small, st.integers(0, 2**31))
def test_contract_pair_equals_einsum(i, j, k, seed):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal((i, j)), r.standard_normal((j, k))
    assert np.array_equal(contract_pair(a, b, [(1, 0)]), einsum("ab,bc->ac", a, b))
