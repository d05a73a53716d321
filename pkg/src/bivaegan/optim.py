"""AdamW with decoupled weight decay, over plain lists of tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch


@dataclass
class OptimizerState:
    exp_avg: list[torch.Tensor] = field(default_factory=list)
    exp_avg_sq: list[torch.Tensor] = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_params(cls, params) -> "OptimizerState":
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params], 0)


def adamw_step(params: list[torch.Tensor], grads: list[torch.Tensor], state: OptimizerState,
               lr: float = 1e-3, beta1: float = 0.5, beta2: float = 0.999,
               weight_decay: float = 0.0, eps: float = 1e-8, source: str = "loss") -> OptimizerState:
    """Update ``params`` in place and return the advanced state."""
    if len(params) != len(grads) or len(params) != len(state.exp_avg):
        raise ValueError("params, grads and optimizer state must line up")
    for g in grads:
        if not bool(torch.isfinite(g).all()):
            raise FloatingPointError(f"non-finite gradient from {source!r}")
    state.step += 1
    bc1 = 1 - beta1 ** state.step
    bc2 = 1 - beta2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
            if p.shape != g.shape:
                raise ValueError(f"grad shape {tuple(g.shape)} != param shape {tuple(p.shape)}")
            p.mul_(1 - lr * weight_decay)
            m.mul_(beta1).add_(g, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            denom = (v / bc2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / bc1)
    return state


class AdamW:
    """Stateful wrapper holding one ``OptimizerState`` for a fixed parameter list."""

    def __init__(self, params, lr=1e-3, betas=(0.5, 0.999), weight_decay=0.0, eps=1e-8):
        self.params = list(params)
        self.lr, self.betas, self.weight_decay, self.eps = lr, tuple(betas), weight_decay, eps
        self.state = OptimizerState.for_params(self.params)

    def step(self, grads, source: str = "loss"):
        adamw_step(self.params, list(grads), self.state, self.lr, self.betas[0], self.betas[1],
                   self.weight_decay, self.eps, source)

    def reset(self):
        self.state = OptimizerState.for_params(self.params)

