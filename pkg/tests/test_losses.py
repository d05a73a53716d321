import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from bivaegan import losses as L
from bivaegan.dataspace import InductiveContractError
from bivaegan.nets import DegenerateOutputError, init_net

f64 = torch.float64


def linear_critic(w, b=0.0):
    net = init_net(len(w), [], 1)
    net.weights[0].copy_(torch.tensor([w], dtype=f64))
    net.biases[0].fill_(b)
    return net


@pytest.mark.parametrize("mean, logvar, expected", [
    ([[1.0]], [[0.0]], 0.5),
    ([[0.0]], [[0.0]], 0.0),
    ([[0.0, 2.0]], [[math.log(2.0), 0.0]], 0.5 * (2 - 1 - math.log(2)) + 2.0),
])
def test_kl_hand_values(mean, logvar, expected):
    got = L.kl_standard_normal(torch.tensor(mean, dtype=f64), torch.tensor(logvar, dtype=f64))
    assert float(got[0]) == pytest.approx(expected, abs=1e-12)


@settings(max_examples=50)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=6), st.floats(-3, 3))
def test_kl_nonnegative(mean, lv):
    m = torch.tensor([mean], dtype=f64)
    assert float(L.kl_standard_normal(m, torch.full_like(m, lv))) >= -1e-12


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=2, max_size=6), st.integers(0, 10_000))
def test_gradient_penalty_linear_critic_closed_form(w, seed):
    critic = linear_critic(w, 0.3)
    pts = torch.randn(4, len(w), generator=torch.Generator().manual_seed(seed), dtype=f64)
    expected = (math.sqrt(sum(x * x for x in w)) - 1) ** 2
    assert float(L.gradient_penalty(critic, pts)) == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_gradient_penalty_hand_values():
    pts = torch.zeros(2, 2, dtype=f64)
    assert float(L.gradient_penalty(linear_critic([3.0, 4.0]), pts)) == pytest.approx(16.0)
    assert float(L.gradient_penalty(linear_critic([0.6, 0.8]), pts)) == pytest.approx(0.0, abs=1e-15)


def test_gradient_penalty_conditioned_ignores_condition_weights():
    critic = linear_critic([0.6, 0.8, 5.0])
    pts = torch.ones(3, 2, dtype=f64)
    cond = torch.ones(3, 1, dtype=f64)
    assert float(L.gradient_penalty(critic, pts, cond)) == pytest.approx(0.0, abs=1e-15)


def test_hypersphere_interpolation():
    a = torch.tensor([[1.0, 0.0]], dtype=f64)
    b = torch.tensor([[0.0, 1.0]], dtype=f64)
    mid = L.hypersphere_interpolate(a, b, torch.tensor([[0.5]], dtype=f64), 1.0)
    np.testing.assert_allclose(mid.numpy(), [[2 ** -0.5, 2 ** -0.5]])
    assert torch.equal(L.hypersphere_interpolate(a, b, torch.ones(1, 1, dtype=f64), 1.0), a)
    lin = L.hypersphere_interpolate(a, b, torch.tensor([[0.25]], dtype=f64), None)
    np.testing.assert_allclose(lin.numpy(), [[0.25, 0.75]])


@settings(max_examples=50)
@given(st.floats(0, 1), st.floats(0.1, 5), st.integers(0, 1000))
def test_hypersphere_interpolation_stays_on_sphere(t, r, seed):
    g = torch.Generator().manual_seed(seed)
    a, b = torch.randn(3, 4, generator=g, dtype=f64), torch.randn(3, 4, generator=g, dtype=f64)
    a, b = r * a / a.norm(dim=1, keepdim=True), r * b / b.norm(dim=1, keepdim=True)
    out = L.hypersphere_interpolate(a, b, torch.full((3, 1), t, dtype=f64), r)
    np.testing.assert_allclose(out.norm(dim=1).numpy(), r, rtol=1e-12)


def test_hypersphere_interpolation_antipodal():
    a = torch.tensor([[1.0, 0.0]], dtype=f64)
    with pytest.raises(DegenerateOutputError):
        L.hypersphere_interpolate(a, -a, torch.tensor([[0.5]], dtype=f64), 1.0)


def test_adversary_value_linear_critic():
    critic = linear_critic([1.0, -1.0])
    real = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=f64)
    fake = torch.tensor([[0.0, 1.0], [0.0, 1.0]], dtype=f64)
    obj, adv = L.unseen_critic_loss(critic, _identity_generator(), real, fake, torch.zeros(2, 0, dtype=f64), None)
    assert float(adv) == pytest.approx(1.0)
    assert float(obj) == pytest.approx(-1.0)


def _identity_generator():
    g = init_net(2, [], 2, "linear")
    g.weights[0].copy_(torch.eye(2, dtype=f64))
    return g


def test_batch_shape_mismatch():
    critic = linear_critic([1.0, 1.0])
    with pytest.raises(ValueError):
        L._adversarial(critic, torch.ones(2, 2, dtype=f64), torch.ones(3, 2, dtype=f64), None, 1.0)


def test_l1_losses_hand_values():
    R = init_net(2, [], 2, "linear")
    R.weights[0].copy_(torch.eye(2, dtype=f64))
    v = torch.tensor([[1.0, 2.0], [0.0, 0.0]], dtype=f64)
    a = torch.tensor([[0.0, 0.0], [1.0, -1.0]], dtype=f64)
    assert float(L.regressor_supervised_loss(R, v, a)) == pytest.approx(2.5)


def test_vae_loss_perfect_reconstruction_is_kl():
    # encoder outputs mean=0, logvar=0; generator copies the attribute slot
    E = init_net(4, [], 2, "gaussian")
    G = init_net(4, [], 2, "linear")
    for p in E.parameters() + G.parameters():
        p.zero_()
    G.weights[0][:, :2].copy_(torch.eye(2, dtype=f64))
    v = torch.tensor([[0.3, 0.4]], dtype=f64)
    assert float(L.vae_loss(E, G, v, v, torch.zeros(1, 2, dtype=f64))) == pytest.approx(0.0, abs=1e-15)
    eps = torch.ones(1, 2, dtype=f64)
    # z = eps now leaks into G only through zero weights, so still exact
    assert float(L.vae_loss(E, G, v, v, eps)) == pytest.approx(0.0, abs=1e-15)


def test_level2_weights():
    parts = {k: torch.tensor(v, dtype=f64) for k, v in
             dict(vae=1.0, seen_adv=2.0, cycle=3.0, unseen_adv=4.0, seen_critic=5.0, unseen_critic=6.0).items()}
    out = L.level2_objective(parts, alpha=1, beta=10, gamma=10)
    assert float(out.totals["generator"]) == 1 + 2 + 30 + 40
    assert float(out.totals["critic"]) == 5 and float(out.totals["critic_unseen"]) == 6
    assert out.scalars()["total_generator"] == 73


def test_level1_weights():
    parts = dict(regressor_seen=torch.tensor(1.5), attr_adv=torch.tensor(2.0), attr_critic=torch.tensor(-1.0))
    out = L.level1_objective(parts, lam=0.5)
    assert float(out.totals["regressor"]) == 2.5
    assert float(out.totals["critic_attr"]) == -1.0


def test_zero_weight_terms_may_be_absent():
    out = L.level2_objective({"vae": torch.tensor(1.0), "seen_adv": torch.tensor(1.0), "cycle": torch.tensor(1.0)},
                             gamma=0.0)
    assert float(out.totals["generator"]) == 12.0
    with pytest.raises(KeyError):
        L.level2_objective({"vae": torch.tensor(1.0)})


def test_inductive_objective_rejects_unseen_terms():
    with pytest.raises(InductiveContractError):
        L.inductive_objective({"vae": torch.tensor(1.0), "unseen_adv": torch.tensor(0.0)})
    out = L.inductive_objective({"vae": torch.tensor(1.0), "seen_adv": torch.tensor(2.0),
                                 "cycle": torch.tensor(0.5), "regressor_seen": torch.tensor(0.25)})
    assert float(out.totals["generator"]) == 1 + 2 + 5
    assert float(out.totals["regressor"]) == 0.25
    assert "gamma" not in out.weights
