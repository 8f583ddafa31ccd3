import math

import numpy as np
import pytest

from imbopt.autodiff import Graph, GraphStateError, finite_difference_check
from imbopt.model import ModelSpec, build_loss_graph, init_params, unflatten
from imbopt.tensor_core import DomainError, SeededRng


def ce_graph(logits, labels, normalizer=1.0):
    g = Graph()
    z = g.parameter("z", logits)
    g.subset_sum(g.softmax_ce(z, labels), None, normalizer)
    return g


def test_uniform_logits_loss():
    assert math.isclose(ce_graph(np.zeros((1, 2)), [0]).forward(), math.log(2), rel_tol=1e-15)
    assert math.isclose(ce_graph(np.zeros((1, 7)), [3]).forward(), math.log(7), rel_tol=1e-15)


def test_softmax_minus_onehot():
    g = ce_graph(np.zeros((1, 2)), [0], normalizer=4.0)
    g.forward()
    assert np.allclose(g.backward()["z"], np.array([[-0.5, 0.5]]) / 4.0, atol=1e-16)


def test_square_chain():
    g = Graph()
    x = g.parameter("x", np.array(3.0))
    g.mul(x, x)
    g.forward()
    assert g.backward()["x"] == 6.0


def test_state_errors():
    g = ce_graph(np.zeros((1, 2)), [0])
    with pytest.raises(GraphStateError):
        g.backward()
    g.forward()
    g.backward()
    with pytest.raises(GraphStateError):
        g.backward()
    with pytest.raises(GraphStateError):
        g.forward()


def test_label_out_of_range():
    with pytest.raises(DomainError):
        ce_graph(np.zeros((1, 2)), [2]).forward()


def test_empty_subset_warns_and_is_zero():
    g = Graph()
    z = g.parameter("z", np.zeros((3, 2)))
    g.subset_sum(g.softmax_ce(z, [0, 1, 0]), [], 1.0)
    with pytest.warns(RuntimeWarning):
        assert g.forward() == 0.0
    assert "empty_subset" in g.flags


def _mlp(seed, hidden=(8, 6), act="tanh", d=5, L=3, n=12):
    rng = SeededRng(seed, "theory")
    spec = ModelSpec(d, L, hidden, act)
    x = init_params(spec, rng)
    feats = rng.standard_normal((n, d))
    labels = rng.integers(0, L, n)
    return spec, x, feats, labels


def test_forward_matches_plain_numpy():
    spec, x, f, y = _mlp(1)
    p = unflatten(spec, x)
    h = np.tanh(f @ p["W0"] + p["b0"])
    h = np.tanh(h @ p["W1"] + p["b1"])
    z = h @ p["W2"] + p["b2"]
    lse = np.log(np.exp(z - z.max(1, keepdims=True)).sum(1)) + z.max(1)
    ref = (lse - z[np.arange(len(y)), y]).sum() / 12
    got = build_loss_graph(spec, p, f, y, 12).forward()
    assert abs(got - ref) <= 1e-12 * abs(ref)


@pytest.mark.parametrize("act", ["tanh", "relu"])
def test_finite_difference_mlp(act):
    spec, x, f, y = _mlp(2, act=act)
    err = finite_difference_check(lambda p: build_loss_graph(spec, p, f, y, len(y)), unflatten(spec, x), h=1e-5)
    assert err < 1e-5


def test_finite_difference_linear_is_rounding_limited():
    # no curvature blow-up for a linear model: what is left is rounding,
    # about eps * |f| / (h |g|), so small gradient entries set the worst case
    errs = []
    for seed in range(20):
        spec, x, f, y = _mlp(seed, hidden=())
        errs.append(finite_difference_check(lambda p: build_loss_graph(spec, p, f, y, len(y)),
                                            unflatten(spec, x), h=1e-5))
    assert max(errs) < 1e-7
    assert np.median(errs) < 5e-9


def test_fd_rejects_bad_h():
    spec, x, f, y = _mlp(3, hidden=())
    with pytest.raises(DomainError):
        finite_difference_check(lambda p: build_loss_graph(spec, p, f, y, 1), unflatten(spec, x), h=0.0)


def test_linearity_over_examples_and_scaling():
    spec, x, f, y = _mlp(4)
    p = unflatten(spec, x)

    def grad(rows, norm=1.0, gamma=None):
        g = Graph()
        nodes = {k: g.parameter(k, v) for k, v in p.items()}
        h = g.constant(f[rows])
        for k in range(3):
            h = g.bias_add(g.matmul(h, nodes[f"W{k}"]), nodes[f"b{k}"])
            if k < 2:
                h = g.tanh(h)
        loss = g.subset_sum(g.softmax_ce(h, y[rows]), None, norm)
        if gamma is not None:
            g.scale(loss, gamma)
        g.forward()
        return g.backward().flat()

    total = grad(np.arange(12))
    parts = sum(grad(np.array([i])) for i in range(12))
    assert np.linalg.norm(total - parts) <= 1e-12 * np.linalg.norm(total)
    assert np.array_equal(grad(np.arange(12)), total)
    scaled = grad(np.arange(12), gamma=2.5)
    assert np.linalg.norm(scaled - 2.5 * total) <= 1e-14 * np.linalg.norm(2.5 * total)
    # a power of two commutes with every rounding step
    assert np.array_equal(grad(np.arange(12), gamma=4.0), 4.0 * total)


def test_duplicate_subset_indices_accumulate():
    g = Graph()
    z = g.parameter("z", np.zeros((2, 2)))
    g.subset_sum(g.softmax_ce(z, [0, 1]), [0, 0], 1.0)
    g.forward()
    gz = g.backward()["z"]
    assert np.allclose(gz[0], [-1.0, 1.0]) and np.allclose(gz[1], 0)
