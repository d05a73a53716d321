"""Training objectives as pure functions of nets and minibatch tensors.

Critic losses return ``(critic_objective, adversary_value)``. The adversary value is
``mean(D(real)) - mean(D(fake))``; the critic minimizes
``-adversary_value + GP_WEIGHT * gradient_penalty``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .dataspace import InductiveContractError
from .nets import DegenerateOutputError, DenseNet, forward, reparameterize

GP_WEIGHT = 10.0


def hypersphere_interpolate(a: torch.Tensor, b: torch.Tensor, t: torch.Tensor, r: float | None) -> torch.Tensor:
    """Rowwise ``L2(t*a + (1-t)*b, r)``; plain linear interpolation when ``r`` is None.

    ``t`` broadcasts against the rows (scalar or shape ``(n, 1)``).
    """
    mix = t * a + (1 - t) * b
    if r is None:
        return mix
    norm = mix.norm(dim=-1, keepdim=True)
    if bool((norm == 0).any()):
        raise DegenerateOutputError("interpolating antipodal points passes through the origin")
    return r * mix / norm


def _critic_input(x: torch.Tensor, condition: torch.Tensor | None) -> torch.Tensor:
    return x if condition is None else torch.cat([x, condition], dim=1)


def gradient_penalty(critic: DenseNet, points: torch.Tensor, condition: torch.Tensor | None = None) -> torch.Tensor:
    """Mean of ``(||grad_x D(x)||_2 - 1)^2``; gradients taken w.r.t. ``points`` only.

    Built with ``create_graph=True`` so it stays differentiable in the critic's parameters.
    """
    x = points.detach().requires_grad_(True)
    out = forward(critic, _critic_input(x, condition))
    (grad,) = torch.autograd.grad(out.sum(), x, create_graph=True)
    return ((grad.norm(dim=1) - 1) ** 2).mean()


def _adversarial(critic, real, fake, t, radius, condition=None):
    if real.shape != fake.shape:
        raise ValueError(f"real batch {tuple(real.shape)} and fake batch {tuple(fake.shape)} differ")
    adv = forward(critic, _critic_input(real, condition)).mean() - forward(critic, _critic_input(fake, condition)).mean()
    if t is None:
        return -adv, adv
    interp = hypersphere_interpolate(real.detach(), fake.detach(), t, radius)
    return -adv + GP_WEIGHT * gradient_penalty(critic, interp, condition), adv


def regressor_supervised_loss(R: DenseNet, seen_v: torch.Tensor, seen_a: torch.Tensor) -> torch.Tensor:
    return (forward(R, seen_v) - seen_a).abs().sum(dim=1).mean()


def attr_critic_loss(D_a: DenseNet, R: DenseNet, real_a_u: torch.Tensor, unseen_v: torch.Tensor,
                     t_draws: torch.Tensor | None, radius: float | None = 1.0):
    """Attribute-space critic: real unseen attributes vs. ``R(unseen_v)``.

    ``t_draws=None`` skips the penalty (generator-side evaluation).
    """
    return _adversarial(D_a, real_a_u, forward(R, unseen_v), t_draws, radius)


def seen_critic_loss(D: DenseNet, G: DenseNet, seen_v, seen_a, z, t_draws, radius: float | None = 1.0):
    fake = forward(G, torch.cat([seen_a, z], dim=1))
    return _adversarial(D, seen_v, fake, t_draws, radius, condition=seen_a)


def unseen_critic_loss(D_u: DenseNet, G: DenseNet, unseen_v, sampled_a_u, z, t_draws, radius: float | None = 1.0):
    fake = forward(G, torch.cat([sampled_a_u, z], dim=1))
    return _adversarial(D_u, unseen_v, fake, t_draws, radius)


def cyclic_regressor_loss(R: DenseNet, G: DenseNet, sampled_a_u, z) -> torch.Tensor:
    fake = forward(G, torch.cat([sampled_a_u, z], dim=1))
    return (forward(R, fake) - sampled_a_u).abs().sum(dim=1).mean()


def kl_standard_normal(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Per-row KL(N(mean, diag exp(logvar)) || N(0, I))."""
    return 0.5 * (mean ** 2 + logvar.exp() - 1 - logvar).sum(dim=1)


def vae_loss(E: DenseNet, G: DenseNet, seen_v, seen_a, eps) -> torch.Tensor:
    """Batch mean of KL plus squared reconstruction error summed over feature dims."""
    mean, logvar = forward(E, torch.cat([seen_v, seen_a], dim=1))
    if not bool(torch.isfinite(logvar).all()):
        raise FloatingPointError("encoder produced a non-finite log-variance")
    z = reparameterize(mean, logvar, eps)
    recon = forward(G, torch.cat([seen_a, z], dim=1))
    return (kl_standard_normal(mean, logvar) + ((recon - seen_v) ** 2).sum(dim=1)).mean()


# ---------------------------------------------------------------- compositions

@dataclass
class LossBreakdown:
    """Named loss terms, the weights used, and the weighted totals each net minimizes."""

    terms: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    totals: dict = field(default_factory=dict)

    def scalars(self) -> dict:
        out = {k: float(v) for k, v in self.terms.items()}
        out.update({f"total_{k}": float(v) for k, v in self.totals.items()})
        return out


def _weighted(parts: dict, signed_weights: dict):
    """Sum of ``w * parts[k]``; zero-weight terms may be absent."""
    total = 0.0
    for key, w in signed_weights.items():
        if key in parts:
            total = total + w * parts[key]
        elif w != 0:
            raise KeyError(f"missing loss term {key!r} with non-zero weight {w}")
    return total


def level1_objective(parts: dict, lam: float = 1.0) -> LossBreakdown:
    """Regressor: ``L_R^s + lam * attr_adv``; attribute critic: its own objective.

    The regressor lowers ``mean D(real) - mean D(R(v))`` by making its outputs score as real.

    ``parts`` keys: ``regressor_seen``, ``attr_adv``, ``attr_critic`` (any subset).
    """
    out = LossBreakdown(terms=dict(parts), weights={"lambda": lam})
    if "regressor_seen" in parts:
        out.totals["regressor"] = _weighted(parts, {"regressor_seen": 1.0, "attr_adv": lam})
    if "attr_critic" in parts:
        out.totals["critic_attr"] = parts["attr_critic"]
    return out


def level2_objective(parts: dict, alpha: float = 1.0, beta: float = 10.0, gamma: float = 10.0) -> LossBreakdown:
    """Encoder+generator: ``L_VAE + alpha*seen_adv + beta*cycle + gamma*unseen_adv``.

    ``parts`` keys: ``vae``, ``seen_adv``, ``cycle``, ``unseen_adv``, ``seen_critic``, ``unseen_critic``.
    """
    out = LossBreakdown(terms=dict(parts), weights={"alpha": alpha, "beta": beta, "gamma": gamma})
    if "vae" in parts:
        out.totals["generator"] = _weighted(
            parts, {"vae": 1.0, "seen_adv": alpha, "cycle": beta, "unseen_adv": gamma})
    if "seen_critic" in parts:
        out.totals["critic"] = parts["seen_critic"]
    if "unseen_critic" in parts:
        out.totals["critic_unseen"] = parts["unseen_critic"]
    return out


UNSEEN_VISUAL_TERMS = ("attr_adv", "attr_critic", "unseen_adv", "unseen_critic")


def inductive_objective(parts: dict, alpha: float = 1.0, beta: float = 10.0) -> LossBreakdown:
    """Level-1 is ``L_R^s`` alone; level-2 drops the unseen-critic term."""
    bad = [k for k in UNSEEN_VISUAL_TERMS if k in parts]
    if bad:
        raise InductiveContractError(f"inductive objective received terms computed from unseen visual data: {bad}")
    out = level2_objective(parts, alpha, beta, 0.0)
    out.weights.pop("gamma")
    if "regressor_seen" in parts:
        out.totals["regressor"] = parts["regressor_seen"]
    return out
