"""Unseen-class prior estimation: cluster prior estimation (CPE), BBSE, and helpers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .config import TrainConfig
from .dataspace import ClassPrior
from .evaluation import synthesize_labeled_set, train_final_classifier
from .nets import DenseNet

# (counts per class, seed) -> (features, labels)
Sampler = Callable[[list, int], tuple]


class SingularConfusionError(np.linalg.LinAlgError):
    pass


@dataclass
class KMeansResult:
    centers: np.ndarray
    assignments: np.ndarray
    iterations: int
    inertia: float
    inertia_trace: list = field(default_factory=list)


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (points ** 2).sum(1)[:, None] - 2 * points @ centers.T + (centers ** 2).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans(points, k: int, init_centers, max_iters: int = 100, tol: float = 1e-4) -> KMeansResult:
    """Lloyd iterations from the given centers; no restarts.

    Cluster ``j`` keeps the identity of ``init_centers[j]``. An empty cluster is
    reseeded at the point farthest from its nearest center.
    """
    points = np.asarray(points, dtype=np.float64)
    centers = np.array(init_centers, dtype=np.float64, copy=True)
    if points.size == 0:
        raise ValueError("kmeans needs at least one point")
    if centers.shape != (k, points.shape[1]):
        raise ValueError(f"init_centers must have shape {(k, points.shape[1])}, got {centers.shape}")
    trace = []
    iterations = 0
    for iterations in range(1, max_iters + 1):
        d = _sq_dists(points, centers)
        assign = d.argmin(1)
        trace.append(float(d[np.arange(len(points)), assign].sum()))
        new = centers.copy()
        for j in range(k):
            members = points[assign == j]
            if len(members):
                new[j] = members.mean(0)
            else:
                far = _sq_dists(points, new).min(1).argmax()
                new[j] = points[far]
        shift = float(np.sqrt(((new - centers) ** 2).sum(1)).max())
        centers = new
        if shift < tol:
            break
    d = _sq_dists(points, centers)
    assign = d.argmin(1)
    inertia = float(d[np.arange(len(points)), assign].sum())
    trace.append(inertia)
    return KMeansResult(centers, assign, iterations, inertia, trace)


def uniform_prior(n: int) -> ClassPrior:
    if n < 1:
        raise ValueError("uniform prior needs at least one class")
    return ClassPrior(np.full(n, 1.0 / n))


def prior_tv_distance(p, q) -> float:
    p = np.asarray(getattr(p, "probs", p), dtype=np.float64)
    q = np.asarray(getattr(q, "probs", q), dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"prior lengths differ: {p.shape} vs {q.shape}")
    return 0.5 * float(np.abs(p - q).sum())


def _clip_renormalize(p: np.ndarray) -> ClassPrior:
    p = np.clip(p, 0.0, None)
    if p.sum() <= 0:
        raise SingularConfusionError("prior solve produced no positive mass")
    return ClassPrior(p / p.sum())


def generator_sampler(G: DenseNet, attributes) -> Sampler:
    attrs = torch.as_tensor(np.asarray(attributes), dtype=G.weights[0].dtype)

    def sample(counts, seed):
        return synthesize_labeled_set(G, attrs, counts, seed)

    return sample


def _as_sampler(source, attributes) -> Sampler:
    return generator_sampler(source, attributes) if isinstance(source, DenseNet) else source


def _fit(x, y, n, config, seed):
    return train_final_classifier(torch.as_tensor(x), torch.as_tensor(y), n, config, seed)


def cpe_estimate(generator, unseen_features, unseen_attributes, synth_per_class: int, seed: int,
                 config: TrainConfig | None = None) -> ClassPrior:
    """Cluster prior estimation.

    A classifier trained on a uniformly-labeled synthesized set pseudo-labels the
    real unseen features; the pseudo-class centers initialize k-means, and the
    cluster-size fractions become the prior (cluster j carries class j).
    ``generator`` is a DenseNet or a sampler ``(counts, seed) -> (features, labels)``.
    """
    config = config or TrainConfig()
    n_u = np.asarray(unseen_attributes).shape[0]
    sample = _as_sampler(generator, unseen_attributes)
    fake_v, fake_y = sample([synth_per_class] * n_u, seed)
    clf = _fit(fake_v, fake_y, n_u, config, seed)
    real = np.asarray(unseen_features, dtype=np.float64)
    pseudo = clf.predict(torch.as_tensor(real, dtype=fake_v.dtype))
    fake_np, fake_y_np = np.asarray(fake_v, dtype=np.float64), np.asarray(fake_y)
    centers = np.empty((n_u, real.shape[1]))
    for c in range(n_u):
        members = real[pseudo == c]
        centers[c] = members.mean(0) if len(members) else fake_np[fake_y_np == c].mean(0)
    km = kmeans(real, n_u, centers, config.kmeans_max_iters, config.kmeans_tol)
    counts = np.bincount(km.assignments, minlength=n_u).astype(np.float64)
    return ClassPrior(counts / counts.sum())


def bbse_solve(confusion, predicted_dist, ridge: float = 1e-6, max_condition: float = 1e8) -> ClassPrior:
    """Solve ``C p = p_hat`` (ridge-regularized), clip negatives, renormalize.

    ``confusion[y_hat, y] = P(predict y_hat | true y)``.
    """
    C = np.asarray(confusion, dtype=np.float64)
    q = np.asarray(predicted_dist, dtype=np.float64)
    cond = np.linalg.cond(C)
    if not np.isfinite(cond) or cond > max_condition:
        raise SingularConfusionError(
            f"confusion matrix is numerically singular (condition number {cond:.3g}); use CPE instead")
    n = C.shape[1]
    p = np.linalg.solve(C.T @ C + ridge * np.eye(n), C.T @ q)
    return _clip_renormalize(p)


def confusion_matrix(pred, labels, n: int) -> np.ndarray:
    """Column-normalized: entry ``[y_hat, y]`` is the fraction of class ``y`` predicted as ``y_hat``."""
    C = np.zeros((n, n))
    np.add.at(C, (np.asarray(pred), np.asarray(labels)), 1.0)
    col = C.sum(0, keepdims=True)
    return C / np.where(col == 0, 1.0, col)


def bbse_estimate(generator, unseen_features, unseen_attributes, synth_per_class: int, seed: int,
                  config: TrainConfig | None = None) -> ClassPrior:
    """Black-box shift estimation from two independent synthesized labeled sets."""
    config = config or TrainConfig()
    n_u = np.asarray(unseen_attributes).shape[0]
    sample = _as_sampler(generator, unseen_attributes)
    x1, y1 = sample([synth_per_class] * n_u, seed)
    x2, y2 = sample([synth_per_class] * n_u, seed + 1)
    clf = _fit(x1, y1, n_u, config, seed)
    C = confusion_matrix(clf.predict(torch.as_tensor(x2)), y2, n_u)
    real = torch.as_tensor(np.asarray(unseen_features), dtype=torch.as_tensor(x1).dtype)
    p_hat = np.bincount(clf.predict(real), minlength=n_u) / len(real)
    return bbse_solve(C, p_hat)
