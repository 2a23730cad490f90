import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from moetta import autodiff as ad
from moetta.autodiff import Tape, Tensor, grad_check
from moetta.moe_ln import (
    LayerNormSlot,
    init_moe_layer,
    layernorm_forward,
    load_balancing_value,
    moe_layernorm_forward,
    route,
    top_k_indices,
)
from moetta.tta import entropy


def layer(dim=6, experts=3, seed=0, top_k=1):
    rng = np.random.default_rng(seed + 50)
    return init_moe_layer(dim, experts, (1 + 0.1 * rng.normal(size=dim), 0.1 * rng.normal(size=dim)), seed, top_k)


def tokens(b=4, t=5, d=6, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=(b, t, d)))


def grad_norm(t):
    return 0.0 if t.grad is None else float(np.linalg.norm(t.grad))


def hand_router():
    # token means e1 and e2 pick out the columns of the router matrix
    lay = layer(dim=2, experts=2)
    lay.router_weight.values[:] = np.log([[0.6, 0.7], [0.4, 0.3]])
    z = np.zeros((2, 2, 2))
    z[0, :, 0] = 1.0
    z[1, :, 1] = 1.0
    return lay, Tensor(z)


# ---------------------------------------------------------------- init


def test_init_is_deterministic_and_bounded():
    a, b = layer(seed=9), layer(seed=9)
    np.testing.assert_array_equal(a.router_weight.values, b.router_weight.values)
    assert np.abs(a.router_weight.values).max() <= np.sqrt(6 / (6 + 3))
    assert not a.expert_weight.values.any() and not a.expert_bias.values.any()
    assert not a.router_bias.values.any()


def test_init_copies_shared_pair():
    w = np.ones(4)
    lay = init_moe_layer(4, 2, (w, np.zeros(4)), seed=0)
    w[:] = 5
    assert lay.weight.values.tolist() == [1.0] * 4
    assert not lay.weight.requires_grad and not lay.bias.requires_grad


def test_top_k_bounds():
    with pytest.raises(ValueError):
        layer(experts=2, top_k=3)


# ---------------------------------------------------------------- routing


def test_zero_router_ties_to_expert_zero():
    lay = layer(experts=4)
    lay.router_weight.values[:] = 0
    r = route(tokens(), lay)
    np.testing.assert_allclose(r.probs.values, 0.25)
    assert (r.indices == 0).all()
    assert r.fraction.tolist() == [1.0, 0.0, 0.0, 0.0]


def test_hand_computed_routing():
    lay, z = hand_router()
    r = route(z, lay)
    np.testing.assert_allclose(r.probs.values, [[0.6, 0.4], [0.7, 0.3]], atol=1e-12)
    assert r.fraction.tolist() == [1.0, 0.0]
    np.testing.assert_allclose(r.mean_prob.values, [0.65, 0.35], atol=1e-12)
    assert r.lb_value == pytest.approx(1.3, abs=1e-12)


@given(st.integers(0, 10_000), st.integers(1, 8), st.integers(1, 6))
def test_routing_partitions_the_batch(seed, b, e):
    r = route(tokens(b=b, seed=seed), layer(experts=e, seed=seed))
    np.testing.assert_allclose(r.probs.values.sum(axis=1), 1.0, atol=1e-12)
    assert r.fraction.sum() == pytest.approx(1.0, abs=1e-12)
    assert r.mean_prob.values.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(r.fraction * b, np.round(r.fraction * b))


def test_routing_is_deterministic():
    lay, z = layer(seed=4), tokens(seed=4)
    assert (route(z, lay).indices == route(z, lay).indices).all()


def test_general_top_k_tie_break():
    assert top_k_indices(np.array([[0.3, 0.3, 0.4]]), 2).tolist() == [[2, 0]]


# ---------------------------------------------------------------- balancing loss


def test_uniform_rows_give_one():
    assert load_balancing_value(np.full((7, 5), 0.2)) == pytest.approx(1.0, abs=1e-12)


def test_certain_routing_to_one_expert():
    assert load_balancing_value(np.array([[1.0, 0.0], [1.0, 0.0]])) == 2.0


def test_single_row():
    assert load_balancing_value(np.array([[0.9, 0.1]])) == pytest.approx(1.8)


def test_batch_of_one_never_below_one():
    rng = np.random.default_rng(0)
    for e in (2, 4, 8, 16):
        assert min(load_balancing_value(rng.dirichlet(np.ones(e), size=1)) for _ in range(200)) >= 1 - 1e-12


def test_balancing_loss_can_drop_below_one():
    # three rows on the 0/1 tie, one row certain about expert 1: E * sum F P = 7/8
    probs = np.array([[0.5 + 1e-12, 0.5 - 1e-12]] * 3 + [[0.0, 1.0]])
    assert load_balancing_value(probs) == pytest.approx(0.875, abs=1e-9)


def test_fraction_has_no_gradient():
    lay, z = hand_router()
    with Tape() as tape:
        r = route(z, lay)
        tape.backward(r.loss)
    # d/dR of E * F . mean(p); F = (1, 0)
    p = r.probs.values
    g_logits = 2 * np.array([p[:, 0] * (1 - p[:, 0]), -p[:, 0] * p[:, 1]]).T / 2
    np.testing.assert_allclose(lay.router_bias.grad, g_logits.sum(axis=0), atol=1e-12)


# ---------------------------------------------------------------- forward


def test_zero_experts_equal_plain_layernorm():
    lay, z = layer(seed=2), tokens(seed=2)
    out, _ = moe_layernorm_forward(z, lay)
    plain = layernorm_forward(z, LayerNormSlot(lay.weight, lay.bias, lay.eps))
    assert np.abs(out.values - plain.values).max() <= 1e-12


@given(st.integers(0, 10_000))
def test_zero_experts_identity_for_any_router(seed):
    lay, z = layer(seed=seed), tokens(seed=seed)
    lay.router_weight.values[:] = np.random.default_rng(seed).normal(scale=5, size=lay.router_weight.shape)
    lay.router_bias.values[:] = np.random.default_rng(seed + 1).normal(size=lay.router_bias.shape)
    out, _ = moe_layernorm_forward(z, lay)
    plain = layernorm_forward(z, LayerNormSlot(lay.weight, lay.bias, lay.eps))
    assert np.abs(out.values - plain.values).max() <= 1e-12


def test_selected_expert_delta_is_applied():
    lay, z = layer(seed=3), tokens(seed=3)
    lay.expert_weight.values[:] = np.arange(3)[:, None] * 0.1
    out, r = moe_layernorm_forward(z, lay)
    xn = ad.normalize(z, lay.eps).values
    fused = lay.weight.values + lay.expert_weight.values[r.indices[:, 0]]
    np.testing.assert_allclose(out.values, xn * fused[:, None, :] + lay.bias.values, atol=1e-12)


def _entropy_loss(z, lay, head):
    out, _ = moe_layernorm_forward(z, lay)
    logits = ad.matmul(ad.mean(out, axis=1), head)
    return ad.mean(entropy(ad.softmax(logits)))


def test_router_gradient_needs_nonzero_experts():
    lay, z = layer(seed=5), tokens(seed=5)
    head = Tensor(np.random.default_rng(5).normal(size=(6, 4)))
    with Tape() as tape:
        tape.backward(_entropy_loss(z, lay, head))
    assert not lay.router_weight.grad.any()
    assert lay.expert_weight.grad.any()
    lay.expert_weight.values[:] = np.random.default_rng(6).normal(scale=0.3, size=lay.expert_weight.shape)
    lay.router_weight.grad = None
    with Tape() as tape:
        tape.backward(_entropy_loss(z, lay, head))
    assert np.linalg.norm(lay.router_weight.grad) > 0


def test_literal_one_changes_no_value_but_cuts_router_gradient():
    lay, z = layer(seed=7), tokens(seed=7)
    lay.expert_weight.values[:] = np.random.default_rng(7).normal(scale=0.3, size=lay.expert_weight.shape)
    a, _ = moe_layernorm_forward(z, lay)
    lay.grad_to_router = False
    b, _ = moe_layernorm_forward(z, lay)
    assert np.abs(a.values - b.values).max() <= 1e-15
    head = Tensor(np.random.default_rng(8).normal(size=(6, 4)))
    with Tape() as tape:
        tape.backward(_entropy_loss(z, lay, head))
    assert grad_norm(lay.router_weight) == 0.0


def test_entropy_gradient_matches_finite_differences():
    lay, z = layer(seed=11), tokens(b=4, seed=11)
    rng = np.random.default_rng(11)
    lay.expert_weight.values[:] = rng.normal(scale=0.3, size=lay.expert_weight.shape)
    lay.expert_bias.values[:] = rng.normal(scale=0.3, size=lay.expert_bias.shape)
    head = Tensor(rng.normal(size=(6, 4)))

    def f():
        out, r = moe_layernorm_forward(z, lay)
        logits = ad.matmul(ad.mean(out, axis=1), head)
        return ad.mean(entropy(ad.softmax(logits))) + r.loss * 0.3

    assert grad_check(f, lay.trainable()) <= 1e-4


def test_top_two_forward_and_gradient():
    lay, z = layer(seed=12, top_k=2), tokens(seed=12)
    lay.expert_weight.values[:] = np.random.default_rng(12).normal(scale=0.3, size=lay.expert_weight.shape)
    out, r = moe_layernorm_forward(z, lay)
    assert r.indices.shape == (4, 2)
    xn = ad.normalize(z, lay.eps).values
    fused = lay.weight.values + lay.expert_weight.values[r.indices].sum(axis=1)
    np.testing.assert_allclose(out.values, xn * fused[:, None, :] + lay.bias.values, atol=1e-12)
    head = Tensor(np.random.default_rng(13).normal(size=(6, 4)))
    assert grad_check(lambda: _entropy_loss(z, lay, head), lay.trainable()) <= 1e-4


def test_dimension_mismatch():
    with pytest.raises(ad.DimensionError):
        moe_layernorm_forward(tokens(d=5), layer(dim=6))
