import time

import numpy as np
import pytest
import torch

from bivaegan import losses as L
from bivaegan.nets import (
    DegenerateOutputError,
    NonFiniteLossError,
    build_models,
    forward,
    forward_hidden,
    init_net,
    input_gradient,
    load_checkpoint,
    param_gradients,
    save_checkpoint,
)
from gradcheck import away_from_kinks, max_relative_error, random_net

TOL = 1e-4
B, DV, DA, K, H = 4, 6, 5, 5, 7


def _data(seed):
    g = torch.Generator().manual_seed(seed)
    rnd = lambda *s: torch.randn(*s, generator=g, dtype=torch.float64)
    sphere = lambda m: m / m.norm(dim=1, keepdim=True)
    return dict(v=sphere(rnd(B, DV)), a=sphere(rnd(B, DA)), a_u=sphere(rnd(B, DA)), uv=sphere(rnd(B, DV)),
                z=rnd(B, K), eps=rnd(B, K), t=torch.rand(B, 1, generator=g, dtype=torch.float64))


def _case(name, seed):
    d = _data(seed)
    E = random_net(DV + DA, [H], K, "gaussian", seed)
    G = random_net(DA + K, [H], DV, "l2", seed + 1)
    R = random_net(DV, [H], DA, "l2", seed + 2)
    D = random_net(DV + DA, [H], 1, "linear", seed + 3)
    Du = random_net(DV, [H], 1, "linear", seed + 4)
    Da = random_net(DA, [H], 1, "linear", seed + 5)
    cases = {
        "vae": (lambda: L.vae_loss(E, G, d["v"], d["a"], d["eps"]), [E, G]),
        "regressor_seen": (lambda: L.regressor_supervised_loss(R, d["v"], d["a"]), [R]),
        "attr_critic": (lambda: L.attr_critic_loss(Da, R, d["a_u"], d["uv"], d["t"])[0], [Da]),
        "attr_adv_regressor": (lambda: L.attr_critic_loss(Da, R, d["a_u"], d["uv"], None)[1], [R]),
        "seen_critic": (lambda: L.seen_critic_loss(D, G, d["v"], d["a"], d["z"], d["t"])[0], [D]),
        "seen_adv_generator": (lambda: L.seen_critic_loss(D, G, d["v"], d["a"], d["z"], None)[1], [G]),
        "unseen_critic": (lambda: L.unseen_critic_loss(Du, G, d["uv"], d["a_u"], d["z"], d["t"])[0], [Du]),
        "unseen_adv_generator": (lambda: L.unseen_critic_loss(Du, G, d["uv"], d["a_u"], d["z"], None)[1], [G]),
        "cycle": (lambda: L.cyclic_regressor_loss(R, G, d["a_u"], d["z"]), [R, G]),
        "level2_generator": (lambda: L.level2_objective({
            "vae": L.vae_loss(E, G, d["v"], d["a"], d["eps"]),
            "seen_adv": L.seen_critic_loss(D, G, d["v"], d["a"], d["z"], None)[1],
            "cycle": L.cyclic_regressor_loss(R, G, d["a_u"], d["z"]),
            "unseen_adv": L.unseen_critic_loss(Du, G, d["uv"], d["a_u"], d["z"], None)[1],
        }).totals["generator"], [E, G]),
        "level1_regressor": (lambda: L.level1_objective({
            "regressor_seen": L.regressor_supervised_loss(R, d["v"], d["a"]),
            "attr_adv": L.attr_critic_loss(Da, R, d["a_u"], d["uv"], None)[1],
        }).totals["regressor"], [R]),
    }
    return cases[name]


CASES = ["vae", "regressor_seen", "attr_critic", "attr_adv_regressor", "seen_critic", "seen_adv_generator",
         "unseen_critic", "unseen_adv_generator", "cycle", "level2_generator", "level1_regressor"]


@pytest.mark.parametrize("name", CASES)
def test_gradients_match_finite_differences(name):
    start = time.perf_counter()
    for seed in range(0, 200, 7):
        loss_fn, nets = _case(name, seed)
        if away_from_kinks(loss_fn):
            break
    else:
        pytest.fail("could not find a kink-free draw")
    assert max_relative_error(loss_fn, nets) < TOL
    assert time.perf_counter() - start < 60


def test_forward_shapes_and_heads():
    x = torch.randn(3, 4, dtype=torch.float64)
    assert forward(init_net(4, [5], 2), x).shape == (3, 2)
    mean, logvar = forward(init_net(4, [5], 2, "gaussian"), x)
    assert mean.shape == logvar.shape == (3, 2)
    out = forward(random_net(4, [5], 3, "l2", radius := 0), x)
    np.testing.assert_allclose(out.norm(dim=1).numpy(), 1.0)
    sig = forward(random_net(4, [5], 3, "sigmoid"), x)
    assert bool(((sig > 0) & (sig < 1)).all())


def test_l2_head_radius():
    net = init_net(4, [5], 3, "l2", seed=1, radius=2.5)
    out = forward(net, torch.randn(6, 4, dtype=torch.float64))
    np.testing.assert_allclose(out.norm(dim=1).numpy(), 2.5)


def test_l2_head_degenerate_output():
    net = init_net(4, [5], 3, "l2")
    for p in net.parameters():
        p.zero_()
    with pytest.raises(DegenerateOutputError):
        forward(net, torch.ones(2, 4, dtype=torch.float64))


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        forward(init_net(4, [5], 2), torch.ones(2, 3, dtype=torch.float64))


def test_forward_hidden():
    net = random_net(4, [5, 6], 2)
    x = torch.randn(3, 4, dtype=torch.float64)
    h, out = forward_hidden(net, x)
    pre, _ = forward_hidden(net, x, post_activation=False)
    assert h.shape == (3, 5)
    assert torch.equal(h, torch.where(pre > 0, pre, 0.2 * pre))
    assert torch.equal(out, forward(net, x))


def test_input_gradient_of_linear_critic():
    net = init_net(3, [], 1)
    w = torch.tensor([[0.3, -1.2, 2.0]], dtype=torch.float64)
    net.weights[0].copy_(w)
    g = input_gradient(net, torch.randn(5, 3, dtype=torch.float64))
    assert torch.equal(g, w.expand(5, 3))


def test_non_finite_loss_is_named():
    net = init_net(3, [], 1)
    with pytest.raises(NonFiniteLossError, match="probe"):
        param_gradients(lambda: forward(net, torch.ones(1, 3, dtype=torch.float64)).sum() * float("nan"),
                        [net], "probe")


def test_build_models_shapes():
    m = build_models(32, 16, hidden=64)
    assert (m.encoder.in_dim, m.encoder.out_dim) == (48, 32)
    assert (m.generator.in_dim, m.generator.out_dim) == (32, 32)
    assert (m.regressor.in_dim, m.regressor.out_dim) == (32, 16)
    assert m.critic.in_dim == 48 and m.critic_unseen.in_dim == 32 and m.critic_attr.in_dim == 16
    assert all(net.out_dim == 1 for net in (m.critic, m.critic_unseen, m.critic_attr))


def test_init_is_deterministic():
    a, b = init_net(4, [8], 2, seed=3), init_net(4, [8], 2, seed=3)
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


def test_checkpoint_round_trip(tmp_path):
    m = build_models(6, 4, hidden=8, dtype=torch.float32)
    save_checkpoint(m, tmp_path / "ck", {"epoch": 3})
    back, extra = load_checkpoint(tmp_path / "ck", dtype=torch.float32)
    assert extra["epoch"] == 3
    for (name, net), (_, other) in zip(m.items(), back.items()):
        assert net.head == other.head
        assert all(torch.equal(p, q) for p, q in zip(net.parameters(), other.parameters())), name
