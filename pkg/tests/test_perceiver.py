import copy

import numpy as np
import pytest

from app.core.exceptions import DimensionError
from app.models.perceiver import (
    PerceiverParams, encode_branch, geometry_features, geometry_weight, iterative_perceive, mhpca,
    proposal_cross_attention,
)
from app.models.tensor import Parameter, Tensor, fc_layer, mul, sum_all
from app.schema.config import ModelConfig
from conftest import grad_check

CONFIG = ModelConfig(channels=[4, 4], d_model=8, num_heads=2, d_geo_emb=8)


def _boxes(rng, k):
    return np.column_stack([rng.uniform(0, 40, (k, 2)), rng.uniform(3, 15, (k, 2))])


def _phi(rng, k, d=8):
    return Tensor(rng.normal(size=(k, d)), requires_grad=True)


def _params(config=CONFIG, seed=0):
    return PerceiverParams("perceiver", config, np.random.default_rng(seed))


def _softmax(a):
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _fc2(rng, d=8):
    return (Parameter("fc2.weight", rng.normal(0.0, 0.5, (d, d))), Parameter("fc2.bias", rng.normal(0.0, 0.1, d)))


def test_uniform_geometry_reduces_to_softmax_attention():
    rng = np.random.default_rng(0)
    head = _params().iterations[0].heads[0]
    phi_sa, phi_tl = _phi(rng, 3), _phi(rng, 5)
    out = proposal_cross_attention(phi_sa, phi_tl, Tensor(np.ones((3, 5))), head)
    q, k, v = phi_sa.data @ head.w_q.data, phi_tl.data @ head.w_k.data, phi_tl.data @ head.w_v.data
    weights = _softmax(q @ k.T / np.sqrt(head.w_q.shape[1]))
    np.testing.assert_allclose(out.weights.data, weights, atol=1e-12)
    np.testing.assert_allclose(out.context.data, weights @ v, atol=1e-12)


def test_one_hot_geometry_selects_one_value():
    rng = np.random.default_rng(1)
    head = _params().iterations[0].heads[1]
    phi_sa, phi_tl = _phi(rng, 2), _phi(rng, 4)
    u = np.zeros((2, 4))
    u[0, 2] = 1.0
    u[1, 0] = 0.3
    out = proposal_cross_attention(phi_sa, phi_tl, Tensor(u), head)
    v = phi_tl.data @ head.w_v.data
    np.testing.assert_allclose(out.weights.data, [[0, 0, 1, 0], [1, 0, 0, 0]], atol=1e-12)
    np.testing.assert_allclose(out.context.data, v[[2, 0]], atol=1e-12)


def test_rows_sum_to_one_and_dead_rows_are_zero():
    rng = np.random.default_rng(2)
    head = _params().iterations[0].heads[0]
    u = rng.uniform(0.0, 2.0, (4, 3))
    u[2] = 0.0
    out = proposal_cross_attention(_phi(rng, 4), _phi(rng, 3), Tensor(u), head)
    sums = out.weights.data.sum(axis=1)
    np.testing.assert_allclose(sums[[0, 1, 3]], 1.0, atol=1e-12)
    assert sums[2] == 0.0
    np.testing.assert_array_equal(out.context.data[2], 0.0)


def test_cross_attention_shape_contracts():
    rng = np.random.default_rng(3)
    head = _params().iterations[0].heads[0]
    with pytest.raises(DimensionError):
        proposal_cross_attention(_phi(rng, 2), _phi(rng, 3, d=6), Tensor(np.ones((2, 3))), head)
    with pytest.raises(DimensionError):
        proposal_cross_attention(_phi(rng, 2), _phi(rng, 3), Tensor(np.ones((3, 2))), head)


def test_geometry_of_a_box_with_itself():
    boxes = np.array([[2.0, 3.0, 5.0, 7.0], [10.0, 1.0, 4.0, 4.0]])
    geo = geometry_features(boxes, boxes, eps=1e-3)
    for i in range(2):
        np.testing.assert_allclose(geo[i, i], [np.log(1e-3), np.log(1e-3), 0.0, 0.0], atol=1e-12)
    assert geo.shape == (2, 2, 4)


def test_geometry_weight_is_nonnegative():
    rng = np.random.default_rng(4)
    for seed in range(20):
        head = _params(seed=seed).iterations[0].heads[0]
        u = geometry_weight(_boxes(rng, 6), _boxes(rng, 5), head.w_geo, CONFIG.d_geo_emb)
        assert u.shape == (6, 5)
        assert (u.data >= 0).all() and np.isfinite(u.data).all()


def _zero_g(params):
    for it in params.iterations:
        it.g_w.data[:] = 0.0
        it.g_b.data[:] = 0.0


def test_zero_summarizer_is_identity():
    rng = np.random.default_rng(5)
    params = _params()
    _zero_g(params)
    phi_sa, phi_tl = _phi(rng, 4), _phi(rng, 6)
    out = mhpca(phi_sa, phi_tl, _boxes(rng, 4), _boxes(rng, 6), params.iterations[0], CONFIG.d_geo_emb)
    np.testing.assert_array_equal(out.data, phi_sa.data)

    fc2 = _fc2(rng)
    contexts = [_phi(rng, 6), _phi(rng, 6)]
    perceived = iterative_perceive(phi_sa, fc2, contexts, _boxes(rng, 4), params, _boxes(rng, 6))
    np.testing.assert_array_equal(perceived.data, encode_branch(phi_sa, *fc2).data)


def test_zero_init_config_starts_at_identity():
    params = _params(CONFIG.model_copy(update={"zero_init_g": True}))
    assert all(not it.g_w.data.any() for it in params.iterations)


def test_single_head_matches_hand_composition():
    config = ModelConfig(channels=[4, 4], d_model=8, num_heads=1, d_geo_emb=8)
    it = _params(config, seed=6).iterations[0]
    rng = np.random.default_rng(6)
    phi_sa, phi_tl = _phi(rng, 3), _phi(rng, 4)
    boxes_sa, boxes_tl = _boxes(rng, 3), _boxes(rng, 4)
    u = geometry_weight(boxes_sa, boxes_tl, it.heads[0].w_geo, 8)
    head = proposal_cross_attention(phi_sa, phi_tl, u, it.heads[0]).context
    expected = phi_sa.data + fc_layer(head, it.g_w, it.g_b).data
    np.testing.assert_allclose(mhpca(phi_sa, phi_tl, boxes_sa, boxes_tl, it, 8).data, expected, atol=1e-12)


def test_permuting_queries_permutes_output():
    rng = np.random.default_rng(7)
    params = _params(CONFIG.model_copy(update={"g_init_scale": 0.5}), seed=7)
    it = params.iterations[0]
    phi_sa, phi_tl = _phi(rng, 5), _phi(rng, 4)
    boxes_sa, boxes_tl = _boxes(rng, 5), _boxes(rng, 4)
    base = mhpca(phi_sa, phi_tl, boxes_sa, boxes_tl, it, 8).data
    perm = rng.permutation(5)
    moved = mhpca(Tensor(phi_sa.data[perm]), phi_tl, boxes_sa[perm], boxes_tl, it, 8).data
    np.testing.assert_allclose(moved, base[perm], atol=1e-12)
    keys = rng.permutation(4)
    shuffled = mhpca(phi_sa, Tensor(phi_tl.data[keys]), boxes_sa, boxes_tl[keys], it, 8).data
    np.testing.assert_allclose(shuffled, base, atol=1e-12)


def test_self_attention_is_permutation_equivariant():
    rng = np.random.default_rng(8)
    params = _params(CONFIG.model_copy(update={"g_init_scale": 0.5}), seed=8)
    phi, boxes, fc2 = _phi(rng, 5), _boxes(rng, 5), _fc2(rng)
    base = iterative_perceive(phi, fc2, None, boxes, params).data
    perm = rng.permutation(5)
    moved = iterative_perceive(Tensor(phi.data[perm]), fc2, None, boxes[perm], params).data
    np.testing.assert_allclose(moved, base[perm], atol=1e-12)


def test_second_iteration_refines_the_first():
    rng = np.random.default_rng(9)
    params = _params(CONFIG.model_copy(update={"g_init_scale": 0.5}), seed=9)
    one = copy.copy(params)
    one.iterations = params.iterations[:1]
    phi, boxes, fc2 = _phi(rng, 4), _boxes(rng, 4), _fc2(rng)
    contexts = [_phi(rng, 3), _phi(rng, 3)]
    ctx_boxes = _boxes(rng, 3)
    first = iterative_perceive(phi, fc2, contexts, boxes, one, ctx_boxes).data
    both = iterative_perceive(phi, fc2, contexts, boxes, params, ctx_boxes).data
    assert not np.allclose(first, both)
    params.iterations[1].g_w.data[:] = 0.0
    params.iterations[1].g_b.data[:] = 0.0
    np.testing.assert_allclose(iterative_perceive(phi, fc2, contexts, boxes, params, ctx_boxes).data, first,
                               atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_mhpca_gradients(seed):
    rng = np.random.default_rng(seed)
    it = _params(CONFIG.model_copy(update={"g_init_scale": 0.3}), seed=seed).iterations[0]
    phi_sa, phi_tl = _phi(rng, 3), _phi(rng, 4)
    boxes_sa, boxes_tl = _boxes(rng, 3), _boxes(rng, 4)
    weights = Tensor(rng.normal(size=(3, 8)))

    def loss():
        return sum_all(mul(mhpca(phi_sa, phi_tl, boxes_sa, boxes_tl, it, 8), weights))

    params = [phi_sa, phi_tl, it.g_w, it.g_b]
    for head in it.heads:
        params += [head.w_q, head.w_k, head.w_v]
    grad_check(loss, params, h=1e-5)


@pytest.mark.parametrize("seed", range(10))
def test_geometry_weight_gradient(seed):
    rng = np.random.default_rng(seed)
    head = _params(seed=seed).iterations[0].heads[0]
    boxes_sa, boxes_tl = _boxes(rng, 3), _boxes(rng, 4)
    weights = Tensor(rng.normal(size=(3, 4)))

    def loss():
        return sum_all(mul(geometry_weight(boxes_sa, boxes_tl, head.w_geo, 8), weights))

    grad_check(loss, [head.w_geo], h=1e-6)


def test_mhpca_rejects_mismatched_summarizer():
    rng = np.random.default_rng(10)
    it = _params().iterations[0]
    with pytest.raises(DimensionError):
        mhpca(_phi(rng, 2, d=6), _phi(rng, 2, d=6), _boxes(rng, 2), _boxes(rng, 2), it, 8)


def test_reset_draws_fresh_attention():
    params = _params()
    before = [p.data.copy() for p in params.parameters()]
    params.reset(np.random.default_rng(123))
    after = [p.data for p in params.parameters()]
    assert any(not np.array_equal(a, b) for a, b in zip(before, after))
    assert all(a.shape == b.shape for a, b in zip(before, after))
    assert not any(it.g_b.data.any() for it in params.iterations)
