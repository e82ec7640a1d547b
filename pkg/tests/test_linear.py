import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import central_diff, grad_close, rel_err
from ttcompress.linear import TTLinear, split_factors
from ttcompress.tensor import count_flops
from ttcompress.tt import tt_svd


def layer_with_diags(in_modes, out_modes, ranks, seed):
    layer = TTLinear(in_modes, out_modes, ranks, seed=seed)
    r = np.random.default_rng(seed + 1)
    for g in layer.weight.diags:
        g[:] = r.uniform(0.5, 1.5, g.size) * r.choice([-1, 1], g.size)
    layer.bias[:] = r.standard_normal(layer.bias.size)
    return layer


def dense_out(layer, x):
    return x @ layer.dense_weight() + layer.bias


def test_split_factors():
    assert split_factors((4, 4, 2, 8), 16) == ((4, 4), (2, 8))
    assert split_factors((12, 8, 8, 8, 8, 12), 768) == ((12, 8, 8), (8, 8, 12))
    with pytest.raises(ValueError):
        split_factors((4, 4), 5)
    layer = TTLinear.from_factors((4, 4, 2, 8), 16, 3)
    assert layer.in_modes == (4, 4) and layer.out_features == 16


def test_forward_dense_oracle(rng):
    layer = layer_with_diags((4, 4), (4, 4), (1, 3, 4, 3, 1), seed=0)
    x = rng.standard_normal((4, 16))
    assert rel_err(layer.forward(x), dense_out(layer, x)) < 1e-10


def test_identity_layer(rng):
    eye = np.eye(16).reshape(4, 4, 4, 4)
    t = tt_svd(eye)
    layer = TTLinear((4, 4), (4, 4), t.ranks, bias=False, weight=t)
    x = rng.standard_normal((5, 16))
    assert np.max(np.abs(layer.forward(x) - x)) < 1e-10


def test_zero_input(rng):
    layer = TTLinear((2, 3), (3, 2), 2, bias=False, seed=1)
    assert np.array_equal(layer.forward(np.zeros((3, 6))), np.zeros((3, 6)))


def test_shape_error():
    layer = TTLinear((2, 3), (3, 2), 2)
    with pytest.raises(ValueError):
        layer.forward(np.zeros((3, 5)))
    with pytest.raises(RuntimeError):
        layer.backward(np.zeros((3, 6)))


def test_prefix_products(rng):
    layer = layer_with_diags((3, 4), (2, 5), (1, 2, 3, 2, 1), seed=4)
    pp = layer.build_prefix_products()
    f = layer.weight.folded_cores()
    a2 = np.einsum("xa,ayb->xyb", f[0][0], f[1]).reshape(12, 3)
    assert rel_err(pp.A[-1], a2) < 1e-12
    assert np.array_equal(pp.A[0].reshape(f[0].shape), f[0])
    full = pp.A[-1] @ pp.B[-1].reshape(pp.B[-1].shape[0], -1)
    assert rel_err(full, layer.dense_weight()) < 1e-12


def test_single_mode_each_side(rng):
    layer = layer_with_diags((6,), (5,), (1, 3, 1), seed=2)
    pp = layer.build_prefix_products()
    assert np.array_equal(pp.A[0], layer.weight.cores[0][0])
    x = rng.standard_normal((3, 6))
    assert rel_err(layer.forward(x), dense_out(layer, x)) < 1e-12


def _loss(layer, x, gy):
    return float(np.sum(layer.forward(x) * gy))


def check_layer_grads(layer, b, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((b, layer.in_features))
    gy = r.standard_normal((b, layer.out_features))
    layer.forward(x)
    grads = layer.backward(gy)
    f = lambda: _loss(layer, x, gy)
    ok = grad_close(grads.g_x, central_diff(f, x))
    for c, g in zip(layer.weight.cores, grads.g_cores):
        ok &= grad_close(g, central_diff(f, c))
    for d, g in zip(layer.weight.diags, grads.g_diags):
        ok &= grad_close(g, central_diff(f, d))
    ok &= grad_close(grads.g_bias, central_diff(f, layer.bias))
    return ok


def test_backward_fd():
    layer = layer_with_diags((4, 4), (4, 4), (1, 3, 4, 3, 1), seed=5)
    r = np.random.default_rng(0)
    x = r.standard_normal((3, 16))
    gy = r.standard_normal((3, 16))
    layer.forward(x)
    g = layer.backward(gy)
    f = lambda: _loss(layer, x, gy)
    assert rel_err(g.g_x, central_diff(f, x)) < 1e-6
    for c, gc in zip(layer.weight.cores, g.g_cores):
        assert rel_err(gc, central_diff(f, c)) < 1e-6


@pytest.mark.parametrize("modes", [((2,), (3,)), ((2, 3), (3,)), ((2, 2, 2), (3, 2)), ((3,), (2, 2, 2))])
def test_backward_fd_shapes(modes):
    layer = layer_with_diags(modes[0], modes[1], 2, seed=11)
    assert check_layer_grads(layer, 3, 0)


def test_zero_upstream_grad(rng):
    layer = layer_with_diags((2, 3), (3, 2), 2, seed=1)
    layer.forward(rng.standard_normal((4, 6)))
    g = layer.backward(np.zeros((4, 6)))
    assert all(not np.any(a) for a in [g.g_x, g.g_bias, *g.g_cores, *g.g_diags])


def test_core_grads_dense_chain_rule(rng):
    layer = layer_with_diags((3, 2), (2, 3), (1, 2, 3, 2, 1), seed=8)
    x = rng.standard_normal((5, 6))
    gy = rng.standard_normal((5, 6))
    layer.forward(x)
    g = layer.backward(gy)
    gw = (x.T @ gy).reshape(3, 2, 2, 3)
    G = layer.weight.cores
    D = layer.weight.diags
    full = "ip,p,pjq,q,qkr,r,rl"
    ops = [G[0][0], D[0], G[1], D[1], G[2], D[2], G[3][..., 0]]
    terms = full.split(",")
    for k, core_pos in enumerate((0, 2, 4, 6)):
        rest = [t for i, t in enumerate(terms) if i != core_pos]
        others = [o for i, o in enumerate(ops) if i != core_pos]
        expr = "ijkl," + ",".join(rest) + "->" + terms[core_pos]
        oracle = np.einsum(expr, gw, *others)
        assert rel_err(g.g_cores[k].reshape(oracle.shape), oracle) < 1e-9


def test_cache_uses_latest_forward(rng):
    layer = layer_with_diags((2, 3), (3, 2), 2, seed=3)
    x1, x2 = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
    gy = rng.standard_normal((4, 6))
    layer.forward(x1)
    n1 = layer.nonce
    layer.forward(x2)
    assert layer.nonce == n1 + 1
    g = layer.backward(gy)
    ref = layer_with_diags((2, 3), (3, 2), 2, seed=3)
    ref.forward(x2)
    assert np.array_equal(g.g_cores[0], ref.backward(gy).g_cores[0])


def test_flop_worked_example():
    layer = TTLinear((4, 4), (4, 4), (1, 3, 3, 3, 1), bias=False)
    x = np.ones((8, 16))
    assert layer.flop_estimate(8) == 8 * 16 * 3 + 8 * 3 * 16 == 768
    with count_flops() as fc:
        layer.forward(x)
    batch_steps = sum(c for label, c in fc.steps if label.startswith("bx") or label.startswith("br"))
    assert batch_steps == 768
    assert layer.flop_estimate(0) == 0


@pytest.mark.parametrize("seed", range(5))
def test_flop_estimate_matches_instrumentation(seed):
    r = np.random.default_rng(seed)
    p, q = r.integers(1, 4), r.integers(1, 4)
    modes = tuple(int(n) for n in r.integers(2, 5, p + q))
    ranks = (1, *(int(k) for k in r.integers(1, 5, p + q - 1)), 1)
    layer = TTLinear(modes[:p], modes[p:], ranks, bias=False, seed=seed)
    b = int(r.integers(1, 9))
    x = r.standard_normal((b, layer.in_features))
    with count_flops() as fc:
        layer.forward(x)
    assert fc.total == layer.flop_estimate(b, include_prefix=True)


# properties ----------------------------------------------------------------


@st.composite
def layers(draw):
    p = draw(st.integers(1, 3))
    q = draw(st.integers(1, 3))
    modes = draw(st.lists(st.integers(1, 4), min_size=p + q, max_size=p + q))
    inner = draw(st.lists(st.integers(1, 4), min_size=p + q - 1, max_size=p + q - 1))
    seed = draw(st.integers(0, 2**20))
    return layer_with_diags(modes[:p], modes[p:], (1, *inner, 1), seed)


@given(layers(), st.integers(1, 5), st.integers(0, 2**20))
def test_forward_equivalence_property(layer, b, seed):
    x = np.random.default_rng(seed).standard_normal((b, layer.in_features))
    y = layer.forward(x)
    ref = dense_out(layer, x)
    assert np.max(np.abs(y - ref)) <= 1e-9 * max(1.0, np.max(np.abs(ref)))


@given(layers(), st.floats(-2, 2), st.floats(-2, 2), st.integers(0, 2**20))
def test_linearity(layer, a, c, seed):
    layer.bias[:] = 0
    r = np.random.default_rng(seed)
    x1, x2 = r.standard_normal((2, 3, layer.in_features))
    lhs = layer.forward(a * x1 + c * x2)
    rhs = a * layer.forward(x1) + c * layer.forward(x2)
    assert np.allclose(lhs, rhs, rtol=1e-10, atol=1e-10)


@given(layers(), st.integers(0, 2**20))
def test_gradients_property(layer, seed):
    assert check_layer_grads(layer, 2, seed)
