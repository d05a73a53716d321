import math

import numpy as np
import pytest
import torch

import bivaegan.train as T
from bivaegan.config import ConfigError, TrainConfig, fixture_config, full_scale_config
from bivaegan.dataspace import InductiveContractError, SyntheticSpec, make_synthetic_tzsl, normalize_dataset

SPEC = SyntheticSpec(num_seen=4, num_unseen=3, feature_dim=8, attribute_dim=6, seen_per_class=24,
                     unseen_per_class=[30, 15, 5])
TINY = TrainConfig(hidden=12, batch_size=16, epochs_inductive=1, epochs_transductive=2,
                   synth_per_class_train=20, synth_per_class_eval=20, classifier_epochs=2)


@pytest.fixture(scope="module")
def ds():
    return normalize_dataset(make_synthetic_tzsl(SPEC, 0), "l2")


def params(net):
    return [p.clone() for p in net.parameters()]


def same(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


def test_config_defaults_and_strict_parsing():
    cfg = TrainConfig()
    assert (cfg.lam, cfg.alpha, cfg.beta, cfg.gamma, cfg.radius) == (1.0, 1.0, 10.0, 10.0, 1.0)
    assert (cfg.critic_steps, cfg.level2_per_level1, cfg.lr) == (5, 5, 1e-3)
    with pytest.raises(ConfigError) as err:
        TrainConfig.from_dict({"lamda": 1.0})
    assert err.value.key == "lamda"
    with pytest.raises(ConfigError):
        TrainConfig(prior_mode="oracle")
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert full_scale_config().hidden == 4096 and fixture_config().hidden == 128


def test_steps_per_epoch(ds):
    assert T.steps_per_epoch(ds, TINY) == math.ceil(96 / 16)


def test_schedule_interleave(ds):
    cfg = TINY.replace(batch_size=8)  # 12 steps per epoch
    state = T.train_inductive(ds, cfg, epochs=1)
    levels = [row["level"] for row in state.history]
    assert levels.count("level2") == 12 and levels.count("level1") == 2
    assert [i for i, lv in enumerate(levels) if lv == "level1"] == [5, 11]


def test_inductive_never_touches_unseen_features(ds):
    view = ds.inductive_view()
    state = T.train_inductive(view, TINY, epochs=1)
    assert state.epoch == 1
    assert not any("unseen_adv" in row or "attr_adv" in row for row in state.history)
    with pytest.raises(InductiveContractError):
        view.unseen_features


def _prepared(ds, transductive=True):
    state = T.init_state(ds, TINY, T.ground_truth_prior(ds))
    data = T._Tensors(ds if transductive else ds.inductive_view(), TINY.dtype)
    return state, T._Sampler(state, data, TINY)


def test_level2_step_leaves_regressor_untouched(ds):
    state, smp = _prepared(ds)
    before_r, before_g = params(state.models.regressor), params(state.models.generator)
    before_c = params(state.models.critic_unseen)
    T._level2_step(state, smp, TINY, transductive=True)
    assert same(before_r, params(state.models.regressor))
    assert not same(before_g, params(state.models.generator))
    assert not same(before_c, params(state.models.critic_unseen))


def test_critic_steps_leave_generator_untouched(ds):
    state, smp = _prepared(ds)
    frozen = {n: params(getattr(state.models, n)) for n in ("encoder", "generator", "regressor")}
    T._critic_steps(state, smp, TINY, transductive=True, level=2)
    T._critic_steps(state, smp, TINY, transductive=True, level=1)
    for name, before in frozen.items():
        assert same(before, params(getattr(state.models, name))), name


def test_generator_update_leaves_critics_untouched(ds, monkeypatch):
    state, smp = _prepared(ds)
    monkeypatch.setattr(T, "_critic_steps", lambda *a, **k: {})
    critics = {n: params(getattr(state.models, n)) for n in ("critic", "critic_unseen", "critic_attr")}
    T._level2_step(state, smp, TINY, transductive=True)
    T._level1_step(state, smp, TINY, transductive=True)
    for name, before in critics.items():
        assert same(before, params(getattr(state.models, name))), name


def test_level1_step_updates_only_regressor_side(ds):
    state, smp = _prepared(ds)
    g = params(state.models.generator)
    r = params(state.models.regressor)
    T._level1_step(state, smp, TINY, transductive=True)
    assert same(g, params(state.models.generator))
    assert not same(r, params(state.models.regressor))


def test_zero_weights_skip_critics(ds):
    cfg = TINY.replace(lam=0.0, gamma=0.0)
    state = T.init_state(ds, cfg)
    du, da = params(state.models.critic_unseen), params(state.models.critic_attr)
    T.train_transductive_epoch(state, ds, cfg)
    assert same(du, params(state.models.critic_unseen)) and same(da, params(state.models.critic_attr))


def test_divergence_ceiling(ds):
    cfg = TINY.replace(adv_ceiling=1e-12)
    state = T.init_state(ds, cfg)
    with pytest.raises(T.DivergenceError):
        T.train_transductive_epoch(state, ds, cfg)


def test_pipeline_prior_refresh_and_log(ds):
    rows = []
    state, report = T.run_pipeline(ds, TINY.replace(prior_mode="cpe"), logger=rows.append)
    prior_rows = [r for r in rows if r.get("event") == "prior"]
    assert [r["epoch"] for r in prior_rows] == [1, 2]
    # refresh precedes the epoch's first step
    first_trans = next(i for i, r in enumerate(rows) if r.get("phase") == "transductive")
    assert rows[first_trans - 1].get("event") == "prior"
    assert report.prior_tv_error == pytest.approx(prior_rows[-1]["tv_error"])
    window = list(state.adv_window)
    assert window and all(math.isfinite(v) and abs(v) < TINY.adv_ceiling for v in window)


def test_pipeline_is_deterministic(ds):
    a_state, a_rep = T.run_pipeline(ds, TINY)
    b_state, b_rep = T.run_pipeline(ds, TINY)
    for (name, net), (_, other) in zip(a_state.models.items(), b_state.models.items()):
        assert same(net.parameters(), other.parameters()), name
    assert a_rep.to_json() == b_rep.to_json()


def test_inductive_only_pipeline(ds):
    state, report = T.run_pipeline(ds, TINY.replace(transductive=False, prior_mode="uniform"))
    assert state.epoch == 3
    assert all(r["phase"] == "inductive" for r in state.history)
    assert 0 <= report.acc_unseen <= 1


def test_given_prior_override(ds):
    prior = T.given_prior(ds, TINY.replace(given_prior=[0.2, 0.3, 0.5]))
    np.testing.assert_allclose(prior.probs, [0.2, 0.3, 0.5])
    np.testing.assert_allclose(T.given_prior(ds, TINY).probs, [0.6, 0.3, 0.1])


def test_pretune_features_contract(ds):
    blind = ds.replace(unseen_labels_eval=None)
    out = T.pretune_features(blind, TINY, epochs=1)
    assert out.feature_dim == ds.feature_dim
    assert out.unseen_features.shape == ds.unseen_features.shape
    np.testing.assert_allclose(np.linalg.norm(out.seen_features, axis=1), 1.0, rtol=1e-9)
    assert out.meta["pretuned"]
