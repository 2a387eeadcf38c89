"""AdamW with decoupled weight decay, driven by an externally scheduled lr/wd."""

from __future__ import annotations

import math
from typing import Sequence

import torch


class NonFiniteGradientError(FloatingPointError):
    pass


@torch.no_grad()
def adamw_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor],
               exp_avg: Sequence[torch.Tensor], exp_avg_sq: Sequence[torch.Tensor],
               lr: float, wd: float, t: int, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, decay: Sequence[bool] | None = None, names=None):
    """One AdamW update, in place, returning ``(params, (exp_avg, exp_avg_sq))``.

    Decay is decoupled: ``p <- p * (1 - lr * wd)`` first, then the
    bias-corrected Adam step. ``decay[i] = False`` exempts a tensor from decay.
    """
    if t < 1:
        raise ValueError("step count t must be >= 1")
    if not (len(params) == len(grads) == len(exp_avg) == len(exp_avg_sq)):
        raise ValueError("params, grads and moments must have equal length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter {tuple(p.shape)}")
        if not torch.isfinite(g).all():
            who = names[i] if names else f"#{i}"
            raise NonFiniteGradientError(f"non-finite gradient for parameter {who}; step aborted")
    bc1 = 1 - beta1**t
    bc2 = 1 - beta2**t
    for i, (p, g, m, v) in enumerate(zip(params, grads, exp_avg, exp_avg_sq)):
        if wd and (decay is None or decay[i]):
            p.mul_(1 - lr * wd)
        m.mul_(beta1).add_(g, alpha=1 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
        denom = (v.sqrt() / math.sqrt(bc2)).add_(eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
    return params, (exp_avg, exp_avg_sq)


def decays(name: str, p: torch.Tensor) -> bool:
    """Weight decay applies to matrices only: not to biases, norms, tokens or positions."""
    return p.ndim == 2 and not name.endswith(("pos_embed", "cls_token", "mask_token"))


class AdamW:
    """Holds moments for a fixed list of named parameters."""

    def __init__(self, named_params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.decay = [decays(n, p) for n, p in named_params]
        self.exp_avg = [torch.zeros_like(p) for p in self.params]
        self.exp_avg_sq = [torch.zeros_like(p) for p in self.params]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float, wd: float):
        grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in self.params]
        adamw_step(self.params, grads, self.exp_avg, self.exp_avg_sq, lr, wd, self.t + 1,
                   self.beta1, self.beta2, self.eps, self.decay, self.names)
        self.t += 1

    def state_arrays(self) -> dict[str, torch.Tensor]:
        out = {}
        for n, m, v in zip(self.names, self.exp_avg, self.exp_avg_sq):
            out[f"exp_avg/{n}"] = m
            out[f"exp_avg_sq/{n}"] = v
        return out

