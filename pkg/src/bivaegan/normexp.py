"""Normalization comparison: L2 data with an L2 generator head vs. Min-Max data with a sigmoid head.

Only the generator and the two visual critics are trained, so differences come from
the feature scaling and output head rather than the regressor or the VAE.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.stats import wasserstein_distance

from . import losses as L
from .config import TrainConfig
from .dataspace import SplitDataset, normalize_dataset
from .evaluation import per_class_top1, synthesize_labeled_set, train_final_classifier
from .nets import init_net, param_gradients
from .optim import AdamW
from .train import given_prior, steps_per_epoch

HIST_BINS = 50


@dataclass
class NormRun:
    name: str
    accuracy: list = field(default_factory=list)
    real_values: np.ndarray | None = None
    synth_values: np.ndarray | None = None

    def epochs_to_fraction(self, fraction: float = 0.9) -> int:
        """First epoch (1-based) whose accuracy reaches ``fraction`` of the final accuracy."""
        target = fraction * self.accuracy[-1]
        return next(i + 1 for i, a in enumerate(self.accuracy) if a >= target)

    @property
    def emd(self) -> float:
        return float(wasserstein_distance(self.real_values, self.synth_values))


def _run(ds: SplitDataset, config: TrainConfig, head: str, radius: float | None, epochs: int) -> NormRun:
    dtype, d_v, d_a = config.dtype, ds.feature_dim, ds.attribute_dim
    k = d_a if config.latent_dim is None else config.latent_dim
    h, seed = [config.hidden], config.seed * 10
    G = init_net(d_a + k, h, d_v, head, seed + 1, config.radius, dtype)
    D = init_net(d_v + d_a, h, 1, "linear", seed + 3, dtype=dtype)
    Du = init_net(d_v, h, 1, "linear", seed + 4, dtype=dtype)
    opts = {id(n): AdamW(n.parameters(), config.lr, (config.beta1, config.beta2), config.weight_decay)
            for n in (G, D, Du)}

    sv = torch.as_tensor(ds.seen_features, dtype=dtype)
    sy = torch.as_tensor(ds.seen_labels, dtype=torch.long)
    sa = torch.as_tensor(ds.seen_attributes, dtype=dtype)
    uv = torch.as_tensor(ds.unseen_features, dtype=dtype)
    ua = torch.as_tensor(ds.unseen_attributes, dtype=dtype)
    prior = torch.as_tensor(given_prior(ds, config).probs)
    gen = torch.Generator().manual_seed(int(config.seed))
    bs = config.batch_size

    def batch():
        idx = torch.randint(len(sy), (bs,), generator=gen)
        return (sv[idx], sa[sy[idx]], uv[torch.randint(len(uv), (bs,), generator=gen)],
                ua[torch.multinomial(prior, bs, replacement=True, generator=gen)],
                torch.randn(bs, k, generator=gen, dtype=dtype), torch.randn(bs, k, generator=gen, dtype=dtype),
                torch.rand(bs, 1, generator=gen, dtype=dtype))

    def step(net, loss_fn, term):
        _, (grads,) = param_gradients(loss_fn, [net], term)
        opts[id(net)].step(grads, source=term)

    run = NormRun(head)
    for _ in range(epochs):
        for _ in range(steps_per_epoch(ds, config)):
            for _ in range(config.critic_steps):
                v, a, u, au, z, zu, t = batch()
                step(D, lambda: L.seen_critic_loss(D, G, v, a, z, t, radius)[0], "seen_critic")
                step(Du, lambda: L.unseen_critic_loss(Du, G, u, au, zu, t, radius)[0], "unseen_critic")
            v, a, u, au, z, zu, _ = batch()
            step(G, lambda: config.alpha * L.seen_critic_loss(D, G, v, a, z, None)[1]
                 + config.gamma * L.unseen_critic_loss(Du, G, u, au, zu, None)[1], "generator")
        fake_v, fake_y = synthesize_labeled_set(G, ua, config.synth_per_class_eval, config.seed + 7919, k)
        clf = train_final_classifier(fake_v, fake_y, ds.num_unseen, config, config.seed)
        run.accuracy.append(per_class_top1(clf.predict(uv), ds.unseen_labels_eval, ds.num_unseen)[1])

    # real vs. synthesized seen features, row for row with the same class attributes
    fg = torch.Generator().manual_seed(int(config.seed) + 104729)
    with torch.no_grad():
        z = torch.randn(len(sy), k, generator=fg, dtype=dtype)
        fake = G(torch.cat([sa[sy], z], dim=1))
    run.real_values = sv.numpy().ravel()
    run.synth_values = fake.numpy().ravel()
    return run


def histogram_grid(radius: float) -> np.ndarray:
    """Shared bin edges covering both ``[-radius, radius]`` and ``[0, 1]``."""
    return np.linspace(min(-radius, 0.0), max(radius, 1.0), HIST_BINS + 1)


def norm_experiment(raw: SplitDataset, config: TrainConfig, epochs: int | None = None) -> dict:
    """Train both variants on the same raw dataset and return the comparison artifacts.

    ``raw`` must hold unnormalized features; ``epochs`` defaults to ``config.epochs_transductive``.
    """
    epochs = config.epochs_transductive if epochs is None else epochs
    if epochs < 1:
        raise ValueError("norm experiment needs at least one epoch")
    runs = {
        "l2": _run(normalize_dataset(raw, "l2", config.radius), config, "l2", config.radius, epochs),
        "minmax": _run(normalize_dataset(raw, "minmax", config.radius), config, "sigmoid", None, epochs),
    }
    edges = histogram_grid(config.radius)
    hist = {"bin_left": edges[:-1], "bin_right": edges[1:]}
    for name, run in runs.items():
        hist[f"{name}_real"] = np.histogram(run.real_values, edges, density=True)[0]
        hist[f"{name}_synth"] = np.histogram(run.synth_values, edges, density=True)[0]
    curves = {"epoch": list(range(1, epochs + 1)), **{f"{n}_accuracy": r.accuracy for n, r in runs.items()}}
    summary = {name: {"emd": run.emd, "final_accuracy": run.accuracy[-1],
                      "epochs_to_90pct": run.epochs_to_fraction(0.9)} for name, run in runs.items()}
    return {"summary": summary, "histograms": hist, "curves": curves}
