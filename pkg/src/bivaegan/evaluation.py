"""Final predictive model, feature augmentation, and the zero-shot metrics."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from .config import FEATURE_SPACES, TrainConfig
from .dataspace import ClassPrior, SplitDataset
from .nets import DenseNet, ModelSet, forward, forward_hidden
from .optim import AdamW


def harmonic_mean(acc_s: float, acc_u: float) -> float:
    if acc_s + acc_u == 0:
        return 0.0
    return 2 * acc_s * acc_u / (acc_s + acc_u)


def per_class_top1(predictions, labels, num_classes: int) -> tuple[np.ndarray, float]:
    """Accuracy within each class, averaged over the classes present in ``labels``.

    Classes absent from ``labels`` get NaN in the per-class vector.
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if len(predictions) != len(labels):
        raise ValueError("predictions and labels differ in length")
    if len(labels) == 0:
        raise ValueError("cannot score an empty prediction set")
    per_class = np.full(num_classes, np.nan)
    for c in np.unique(labels):
        mask = labels == c
        per_class[c] = float(np.mean(predictions[mask] == c))
    return per_class, float(np.nanmean(per_class))


def synth_counts(prior: ClassPrior | None, num_classes: int, n_per_class: int) -> list[int]:
    """Per-class synthesis counts: ``n_per_class`` each, or the same total split by ``prior``."""
    if prior is None:
        return [n_per_class] * num_classes
    total = n_per_class * num_classes
    return [max(1, int(round(p * total))) for p in prior.probs]


def synthesize_labeled_set(G: DenseNet, attributes: torch.Tensor, counts: int | Sequence[int],
                           seed: int, latent_dim: int | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Draw ``z ~ N(0, I)`` per row and emit ``G(a_class, z)`` with its class label."""
    n_cls = attributes.shape[0]
    counts = [int(counts)] * n_cls if np.isscalar(counts) else [int(c) for c in counts]
    k = G.in_dim - attributes.shape[1] if latent_dim is None else latent_dim
    labels = torch.cat([torch.full((c,), i, dtype=torch.long) for i, c in enumerate(counts)])
    gen = torch.Generator().manual_seed(int(seed))
    z = torch.randn(len(labels), k, generator=gen, dtype=attributes.dtype)
    with torch.no_grad():
        feats = forward(G, torch.cat([attributes[labels], z], dim=1))
    return feats, labels


def project(v: torch.Tensor, R: DenseNet, space: str = "concatenated", post_activation: bool = True) -> torch.Tensor:
    """Map visual features into one of the inference spaces."""
    if space not in FEATURE_SPACES:
        raise ValueError(f"unknown feature space {space!r}")
    if space == "visual":
        return v
    with torch.no_grad():
        h, a_hat = forward_hidden(R, v, post_activation)
    return {"attribute": a_hat, "hidden": h, "concatenated": torch.cat([v, h, a_hat], dim=1)}[space]


def augment(v: torch.Tensor, R: DenseNet, post_activation: bool = True) -> torch.Tensor:
    """``[v, h, R(v)]`` with ``h`` the regressor's first-layer representation."""
    return project(v, R, "concatenated", post_activation)


@dataclass
class LinearClassifier:
    weight: torch.Tensor
    bias: torch.Tensor
    missing_classes: list[int] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return x @ self.weight.T + self.bias

    def predict(self, x: torch.Tensor) -> np.ndarray:
        with torch.no_grad():
            return self.logits(x).argmax(dim=1).numpy()


def train_final_classifier(features: torch.Tensor, labels: torch.Tensor, num_classes: int,
                           config: TrainConfig, seed: int | None = None) -> LinearClassifier:
    """Single linear layer + softmax cross-entropy, ``config.classifier_epochs`` epochs of AdamW."""
    if len(labels) == 0:
        raise ValueError("classifier training set is empty")
    seed = config.seed if seed is None else seed
    present = set(torch.unique(labels).tolist())
    missing = [c for c in range(num_classes) if c not in present]
    if missing:
        warnings.warn(f"classes {missing} absent from the classifier training set; they are unreachable")
    gen = torch.Generator().manual_seed(int(seed))
    weight = torch.zeros(num_classes, features.shape[1], dtype=features.dtype)
    bias = torch.zeros(num_classes, dtype=features.dtype)
    opt = AdamW([weight, bias], config.lr, (config.beta1, config.beta2), config.weight_decay)
    n = len(labels)
    for _ in range(config.classifier_epochs):
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            w = weight.detach().requires_grad_(True)
            b = bias.detach().requires_grad_(True)
            loss = torch.nn.functional.cross_entropy(features[idx] @ w.T + b, labels[idx])
            opt.step(torch.autograd.grad(loss, [w, b]), source="classifier_cross_entropy")
    if missing:
        bias[missing] = -torch.inf
    return LinearClassifier(weight, bias, missing)


@dataclass
class EvalReport:
    mode: str
    feature_space: str
    prior_mode: str
    seed: int
    acc_unseen: float
    per_class_unseen: list
    acc_seen: float | None = None
    per_class_seen: list | None = None
    harmonic: float | None = None
    method: str = "classifier"
    prior: list | None = None
    prior_tv_error: float | None = None
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), sort_keys=True, indent=2)

    CSV_FIELDS = ("mode", "feature_space", "method", "prior_mode", "seed", "acc_unseen",
                  "acc_seen", "harmonic", "prior_tv_error")

    def csv_row(self) -> dict:
        d = self.to_dict()
        return {k: ("" if d[k] is None else d[k]) for k in self.CSV_FIELDS}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return None if np.isnan(obj) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def _tensor(x, dtype) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _eval_prior(state, ds: SplitDataset, config: TrainConfig) -> ClassPrior | None:
    if config.eval_prior == "uniform":
        return None
    return getattr(state, "prior", None)


def tzsl_evaluate(state, ds: SplitDataset, config: TrainConfig, space: str | None = None,
                  seed: int | None = None) -> EvalReport:
    """Train the final classifier on synthesized unseen features and score the real unseen set.

    ``state`` needs ``models`` (a ModelSet) and optionally ``prior`` (ClassPrior).
    """
    if ds.unseen_labels_eval is None:
        raise ValueError("dataset has no unseen evaluation labels")
    space = config.feature_space if space is None else space
    seed = config.seed if seed is None else seed
    models: ModelSet = state.models
    dtype = config.dtype
    prior = _eval_prior(state, ds, config)
    ua = _tensor(ds.unseen_attributes, dtype)
    counts = synth_counts(prior, ds.num_unseen, config.synth_per_class_eval)
    fake_v, fake_y = synthesize_labeled_set(models.generator, ua, counts, seed + 7919)
    post = config.hidden_post_activation
    clf = train_final_classifier(project(fake_v, models.regressor, space, post), fake_y,
                                 ds.num_unseen, config, seed)
    real = _tensor(ds.unseen_features, dtype)
    preds = clf.predict(project(real, models.regressor, space, post))
    per_class, acc = per_class_top1(preds, ds.unseen_labels_eval, ds.num_unseen)
    return EvalReport(
        mode="tzsl", feature_space=space, prior_mode=config.prior_mode, seed=seed,
        acc_unseen=acc, per_class_unseen=per_class.tolist(),
        prior=None if prior is None else prior.tolist(), config=config.to_dict(),
        meta=dict(ds.meta, synth_counts=counts),
    )


def gzsl_scores(pred_seen, labels_seen, pred_unseen, labels_unseen, num_seen: int, num_unseen: int):
    """Per-class accuracies over the joint label space (unseen labels offset by ``num_seen``)."""
    n = num_seen + num_unseen
    pcs, acc_s = per_class_top1(pred_seen, labels_seen, n)
    pcu, acc_u = per_class_top1(pred_unseen, np.asarray(labels_unseen) + num_seen, n)
    return pcs[:num_seen], acc_s, pcu[num_seen:], acc_u, harmonic_mean(acc_s, acc_u)


def gtzsl_evaluate(state, ds: SplitDataset, config: TrainConfig, synthesize_unseen: bool = True,
                   seed: int | None = None) -> EvalReport:
    """Generalized protocol: one classifier over seen + unseen classes."""
    if ds.seen_test_features is None:
        raise ValueError("generalized evaluation needs a held-out seen test split")
    if ds.unseen_labels_eval is None:
        raise ValueError("dataset has no unseen evaluation labels")
    seed = config.seed if seed is None else seed
    space = config.feature_space
    models: ModelSet = state.models
    dtype = config.dtype
    post = config.hidden_post_activation
    n_s, n_u = ds.num_seen, ds.num_unseen
    sa, ua = _tensor(ds.seen_attributes, dtype), _tensor(ds.unseen_attributes, dtype)
    xs, ys = synthesize_labeled_set(models.generator, sa, config.synth_per_class_eval, seed + 104729)
    feats, labels = [xs], [ys]
    if synthesize_unseen:
        prior = _eval_prior(state, ds, config)
        xu, yu = synthesize_labeled_set(models.generator, ua, synth_counts(prior, n_u, config.synth_per_class_eval),
                                        seed + 7919)
        feats.append(xu)
        labels.append(yu + n_s)
    if config.gzsl_mix_real_seen:
        feats.append(_tensor(ds.seen_features, dtype))
        labels.append(torch.as_tensor(np.asarray(ds.seen_labels), dtype=torch.long))
    x = project(torch.cat(feats), models.regressor, space, post)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        clf = train_final_classifier(x, torch.cat(labels), n_s + n_u, config, seed)
    pred_s = clf.predict(project(_tensor(ds.seen_test_features, dtype), models.regressor, space, post))
    pred_u = clf.predict(project(_tensor(ds.unseen_features, dtype), models.regressor, space, post))
    pcs, acc_s, pcu, acc_u, h = gzsl_scores(pred_s, ds.seen_test_labels, pred_u, ds.unseen_labels_eval, n_s, n_u)
    return EvalReport(
        mode="gtzsl", feature_space=space, prior_mode=config.prior_mode, seed=seed,
        acc_unseen=acc_u, per_class_unseen=pcu.tolist(), acc_seen=acc_s, per_class_seen=pcs.tolist(),
        harmonic=h, config=config.to_dict(), meta=dict(ds.meta, synthesize_unseen=synthesize_unseen),
    )


def nearest_attribute_predict(pseudo_attributes, class_attributes) -> np.ndarray:
    """1-NN in attribute space: ``argmin_c ||a_hat - a_c||_2``."""
    pa = np.asarray(pseudo_attributes, dtype=np.float64)
    ca = np.asarray(class_attributes, dtype=np.float64)
    d = ((pa[:, None, :] - ca[None, :, :]) ** 2).sum(axis=2)
    return d.argmin(axis=1)


def infer_in_space(state, ds: SplitDataset, space: str, method: str, config: TrainConfig) -> EvalReport:
    if method not in ("nearest_attribute", "classifier"):
        raise ValueError(f"unknown inference method {method!r}")
    if method == "nearest_attribute":
        if space != "attribute":
            raise ValueError("nearest_attribute inference only works in the attribute space")
        real = _tensor(ds.unseen_features, config.dtype)
        pseudo = project(real, state.models.regressor, "attribute").numpy()
        preds = nearest_attribute_predict(pseudo, ds.unseen_attributes)
        per_class, acc = per_class_top1(preds, ds.unseen_labels_eval, ds.num_unseen)
        return EvalReport(mode="tzsl", feature_space=space, prior_mode=config.prior_mode, seed=config.seed,
                          acc_unseen=acc, per_class_unseen=per_class.tolist(), method=method,
                          config=config.to_dict(), meta=dict(ds.meta))
    return tzsl_evaluate(state, ds, config, space=space)
