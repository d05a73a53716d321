"""Two-level alternating training, the inductive warm start, and the full pipeline."""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from . import losses as L
from .config import TrainConfig
from .dataspace import ClassPrior, SplitDataset, empirical_class_prior, l2_normalize
from .evaluation import EvalReport, tzsl_evaluate
from .nets import ModelSet, build_models, forward, init_net, param_gradients
from .optim import AdamW
from .prior import bbse_estimate, cpe_estimate, prior_tv_distance, uniform_prior

log = logging.getLogger(__name__)

StepLogger = Callable[[dict], None]


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainState:
    models: ModelSet
    optimizers: dict
    prior: ClassPrior
    rng: torch.Generator
    epoch: int = 0
    history: list = field(default_factory=list)
    prior_history: list = field(default_factory=list)
    adv_window: deque = field(default_factory=lambda: deque(maxlen=50))


def init_state(ds: SplitDataset, config: TrainConfig, prior: ClassPrior | None = None) -> TrainState:
    models = build_models(ds.feature_dim, ds.attribute_dim, config.latent_dim, config.hidden,
                          config.radius, config.seed * 10, config.dtype)
    optimizers = {
        name: AdamW(net.parameters(), config.lr, (config.beta1, config.beta2), config.weight_decay)
        for name, net in models.items()
    }
    prior = prior if prior is not None else uniform_prior(ds.num_unseen)
    return TrainState(models, optimizers, prior, torch.Generator().manual_seed(int(config.seed)))


class _Tensors:
    """Dataset arrays as tensors in the training precision."""

    def __init__(self, ds: SplitDataset, dtype):
        self.sv = torch.as_tensor(np.asarray(ds.seen_features), dtype=dtype)
        self.sy = torch.as_tensor(np.asarray(ds.seen_labels), dtype=torch.long)
        self.sa = torch.as_tensor(np.asarray(ds.seen_attributes), dtype=dtype)
        self.ua = torch.as_tensor(np.asarray(ds.unseen_attributes), dtype=dtype)
        self._ds = ds
        self._uv = None

    @property
    def uv(self) -> torch.Tensor:
        if self._uv is None:
            self._uv = torch.as_tensor(np.asarray(self._ds.unseen_features), dtype=self.sv.dtype)
        return self._uv


class _Sampler:
    def __init__(self, state: TrainState, data: _Tensors, config: TrainConfig):
        self.g, self.d, self.bs = state.rng, data, config.batch_size
        self.k = state.models.generator.in_dim - data.sa.shape[1]
        self.prior = torch.as_tensor(state.prior.probs, dtype=torch.float64)
        self.r = config.radius

    def seen(self):
        idx = torch.randint(len(self.d.sy), (self.bs,), generator=self.g)
        return self.d.sv[idx], self.d.sa[self.d.sy[idx]]

    def unseen_v(self):
        return self.d.uv[torch.randint(len(self.d.uv), (self.bs,), generator=self.g)]

    def unseen_a(self):
        return self.d.ua[torch.multinomial(self.prior, self.bs, replacement=True, generator=self.g)]

    def noise(self):
        return torch.randn(self.bs, self.k, generator=self.g, dtype=self.d.sv.dtype)

    def t(self):
        return torch.rand(self.bs, 1, generator=self.g, dtype=self.d.sv.dtype)


def _update(state: TrainState, names: list[str], loss_fn, term: str):
    nets = [getattr(state.models, n) for n in names]
    value, grads = param_gradients(loss_fn, nets, term)
    for n, g in zip(names, grads):
        state.optimizers[n].step(g, source=term)
    return value


def _critic_steps(state, smp: _Sampler, config: TrainConfig, transductive: bool, level: int) -> dict:
    m = state.models
    r = config.radius
    out = {}
    for _ in range(config.critic_steps):
        if level == 2:
            if config.alpha > 0:
                v, a = smp.seen()
                z, t = smp.noise(), smp.t()
                out["seen_critic"] = _update(
                    state, ["critic"], lambda: L.seen_critic_loss(m.critic, m.generator, v, a, z, t, r)[0],
                    "seen_critic")
            if transductive and config.gamma > 0:
                uv, ua = smp.unseen_v(), smp.unseen_a()
                z, t = smp.noise(), smp.t()
                out["unseen_critic"] = _update(
                    state, ["critic_unseen"],
                    lambda: L.unseen_critic_loss(m.critic_unseen, m.generator, uv, ua, z, t, r)[0],
                    "unseen_critic")
        elif transductive and config.lam > 0:
            uv, ua, t = smp.unseen_v(), smp.unseen_a(), smp.t()
            out["attr_critic"] = _update(
                state, ["critic_attr"],
                lambda: L.attr_critic_loss(m.critic_attr, m.regressor, ua, uv, t, r)[0], "attr_critic")
    return out


def _level2_step(state, smp: _Sampler, config: TrainConfig, transductive: bool) -> L.LossBreakdown:
    m = state.models
    critic_terms = _critic_steps(state, smp, config, transductive, level=2)
    v, a = smp.seen()
    eps, z = smp.noise(), smp.noise()
    use_unseen = transductive and config.gamma > 0
    if config.beta > 0 or use_unseen:
        ua, zu = smp.unseen_a(), smp.noise()
    if use_unseen:
        uv = smp.unseen_v()
    parts = {}

    def objective():
        parts.clear()
        parts["vae"] = L.vae_loss(m.encoder, m.generator, v, a, eps)
        if config.alpha > 0:
            parts["seen_adv"] = L.seen_critic_loss(m.critic, m.generator, v, a, z, None, config.radius)[1]
        if config.beta > 0:
            parts["cycle"] = L.cyclic_regressor_loss(m.regressor, m.generator, ua, zu)
        if use_unseen:
            parts["unseen_adv"] = L.unseen_critic_loss(m.critic_unseen, m.generator, uv, ua, zu, None,
                                                       config.radius)[1]
        if transductive:
            bd = L.level2_objective(parts, config.alpha, config.beta, config.gamma)
        else:
            bd = L.inductive_objective(parts, config.alpha, config.beta)
        return bd.totals["generator"]

    _update(state, ["encoder", "generator"], objective, "generator")
    bd = L.level2_objective({k: val.detach() for k, val in parts.items()}, config.alpha, config.beta,
                            config.gamma if transductive else 0.0)
    bd.terms.update(critic_terms)
    if use_unseen:
        state.adv_window.append(float(parts["unseen_adv"].detach()))
        smoothed = sum(state.adv_window) / len(state.adv_window)
        if not math.isfinite(smoothed) or abs(smoothed) > config.adv_ceiling:
            raise DivergenceError(f"unseen critic adversary value diverged (smoothed {smoothed})")
    return bd


def _level1_step(state, smp: _Sampler, config: TrainConfig, transductive: bool) -> L.LossBreakdown:
    m = state.models
    critic_terms = _critic_steps(state, smp, config, transductive, level=1)
    v, a = smp.seen()
    adversarial = transductive and config.lam > 0
    if adversarial:
        uv, ua = smp.unseen_v(), smp.unseen_a()
    parts = {}

    def objective():
        parts.clear()
        parts["regressor_seen"] = L.regressor_supervised_loss(m.regressor, v, a)
        if adversarial:
            parts["attr_adv"] = L.attr_critic_loss(m.critic_attr, m.regressor, ua, uv, None, config.radius)[1]
        bd = L.level1_objective(parts, config.lam) if transductive else L.inductive_objective(parts)
        return bd.totals["regressor"]

    _update(state, ["regressor"], objective, "regressor")
    bd = L.level1_objective({k: val.detach() for k, val in parts.items()}, config.lam if transductive else 0.0)
    bd.terms.update(critic_terms)
    return bd


def steps_per_epoch(ds: SplitDataset, config: TrainConfig) -> int:
    return max(1, math.ceil(len(ds.seen_labels) / config.batch_size))


def _run_epoch(state: TrainState, ds: SplitDataset, config: TrainConfig, transductive: bool,
               logger: StepLogger | None) -> TrainState:
    data = _Tensors(ds, config.dtype)
    smp = _Sampler(state, data, config)
    phase = "transductive" if transductive else "inductive"
    for step in range(steps_per_epoch(ds, config)):
        records = [("level2", _level2_step(state, smp, config, transductive))]
        if (step + 1) % config.level2_per_level1 == 0:
            records.append(("level1", _level1_step(state, smp, config, transductive)))
        for level, bd in records:
            row = {"epoch": state.epoch, "step": step, "phase": phase, "level": level, **bd.scalars()}
            state.history.append(row)
            if logger:
                logger(row)
    state.epoch += 1
    return state


def train_inductive(ds: SplitDataset, config: TrainConfig, state: TrainState | None = None,
                    epochs: int | None = None, logger: StepLogger | None = None) -> TrainState:
    """Inductive warm start; ``ds`` is reduced to a view without unseen visual features."""
    view = ds if ds.inductive else ds.inductive_view()
    state = state or init_state(view, config)
    for _ in range(config.epochs_inductive if epochs is None else epochs):
        _run_epoch(state, view, config, transductive=False, logger=logger)
    return state


def train_transductive_epoch(state: TrainState, ds: SplitDataset, config: TrainConfig,
                             logger: StepLogger | None = None) -> TrainState:
    return _run_epoch(state, ds, config, transductive=True, logger=logger)


def ground_truth_prior(ds: SplitDataset) -> ClassPrior | None:
    if ds.unseen_labels_eval is None:
        return None
    return empirical_class_prior(ds.unseen_labels_eval, ds.num_unseen)


def given_prior(ds: SplitDataset, config: TrainConfig) -> ClassPrior:
    if config.given_prior is not None:
        return ClassPrior(np.asarray(config.given_prior, dtype=np.float64))
    truth = ground_truth_prior(ds)
    if truth is None:
        raise ValueError("prior_mode='given' needs config.given_prior or unseen evaluation labels")
    return truth


def estimate_prior(state: TrainState, ds: SplitDataset, config: TrainConfig, seed: int) -> ClassPrior:
    mode = config.prior_mode
    if mode == "given":
        return given_prior(ds, config)
    if mode == "uniform":
        return uniform_prior(ds.num_unseen)
    fn = cpe_estimate if mode == "cpe" else bbse_estimate
    return fn(state.models.generator, ds.unseen_features, ds.unseen_attributes,
              config.synth_per_class_train, seed, config)


def _refresh_prior(state, ds, config, logger):
    state.prior = estimate_prior(state, ds, config, config.seed * 1000 + state.epoch)
    truth = ground_truth_prior(ds)
    row = {"epoch": state.epoch, "prior": state.prior.tolist(),
           "tv_error": None if truth is None else prior_tv_distance(state.prior, truth)}
    state.prior_history.append(row)
    if logger:
        logger({"event": "prior", **row})


def run_pipeline(ds: SplitDataset, config: TrainConfig, logger: StepLogger | None = None,
                 on_epoch_end: Callable[[TrainState], None] | None = None) -> tuple[TrainState, EvalReport]:
    """Inductive warm start, then transductive epochs each preceded by a prior refresh, then evaluation.

    With ``config.transductive`` off, all epochs are inductive and the prior is set once before evaluation.
    """
    start = given_prior(ds, config) if config.prior_mode == "given" else None
    state = init_state(ds, config, start)
    view = ds.inductive_view()
    total_inductive = config.epochs_inductive + (0 if config.transductive else config.epochs_transductive)
    for _ in range(total_inductive):
        train_inductive(view, config, state, epochs=1, logger=logger)
        if on_epoch_end:
            on_epoch_end(state)
    if config.transductive and config.reset_optimizer:
        for opt in state.optimizers.values():
            opt.reset()
    n_trans = config.epochs_transductive if config.transductive else 0
    for _ in range(n_trans):
        _refresh_prior(state, ds, config, logger)
        train_transductive_epoch(state, ds, config, logger)
        if on_epoch_end:
            on_epoch_end(state)
    if n_trans == 0:
        _refresh_prior(state, ds, config, logger)
    report = tzsl_evaluate(state, ds, config)
    truth = ground_truth_prior(ds)
    if truth is not None:
        report.prior_tv_error = prior_tv_distance(state.prior, truth)
    return state, report


# ---------------------------------------------------------------- feature pre-tuning

def pretune_features(ds: SplitDataset, config: TrainConfig, epochs: int = 15) -> SplitDataset:
    """Autoencoder with latent dim = feature dim plus regressor and classifier heads on seen latents.

    Minimizes reconstruction MSE + L1 attribute regression + cross-entropy using seen data only,
    then replaces every feature matrix by its L2-normalized encoder latents.
    """
    d_v, d_a = ds.feature_dim, ds.attribute_dim
    dtype, h, seed = config.dtype, [config.hidden], config.seed * 10 + 7
    enc = init_net(d_v, h, d_v, "linear", seed, dtype=dtype)
    dec = init_net(d_v, h, d_v, "linear", seed + 1, dtype=dtype)
    reg = init_net(d_v, h, d_a, "l2", seed + 2, config.radius, dtype)
    cls = init_net(d_v, [], ds.num_seen, "linear", seed + 3, dtype=dtype)
    nets = [enc, dec, reg, cls]
    opts = [AdamW(n.parameters(), config.lr, (config.beta1, config.beta2), config.weight_decay) for n in nets]
    sv = torch.as_tensor(np.asarray(ds.seen_features), dtype=dtype)
    sy = torch.as_tensor(np.asarray(ds.seen_labels), dtype=torch.long)
    sa = torch.as_tensor(np.asarray(ds.seen_attributes), dtype=dtype)
    gen = torch.Generator().manual_seed(int(config.seed) + 17)
    for _ in range(epochs):
        perm = torch.randperm(len(sy), generator=gen)
        for s in range(0, len(sy), config.batch_size):
            idx = perm[s:s + config.batch_size]
            v, y = sv[idx], sy[idx]

            def objective():
                latent = forward(enc, v)
                mse = ((forward(dec, latent) - v) ** 2).sum(1).mean()
                reg_l1 = (forward(reg, latent) - sa[y]).abs().sum(1).mean()
                ce = torch.nn.functional.cross_entropy(forward(cls, latent), y)
                return mse + reg_l1 + ce

            _, grads = param_gradients(objective, nets, "pretune")
            for opt, g in zip(opts, grads):
                opt.step(g, source="pretune")

    def encode(x):
        if x is None:
            return None
        with torch.no_grad():
            z = forward(enc, torch.as_tensor(np.asarray(x), dtype=dtype)).numpy()
        return l2_normalize(z, config.radius)

    return ds.replace(
        seen_features=encode(ds.seen_features),
        unseen_features_=encode(ds.unseen_features_),
        seen_test_features=encode(ds.seen_test_features),
        meta=dict(ds.meta, pretuned=True),
    )
