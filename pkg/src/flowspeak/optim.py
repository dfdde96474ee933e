"""Noam learning-rate schedule and a rectified Adam optimizer."""

from __future__ import annotations

import math

import torch


class OptimizerError(ValueError):
    pass


def noam_lr(step: int, base_lr: float, warmup: int) -> float:
    """Linear warmup to ``base_lr`` at ``warmup``, then ``step ** -0.5`` decay.

    Equal to ``base_lr * warmup**0.5 * min(step**-0.5, step * warmup**-1.5)``,
    written so that ``step == warmup`` gives ``base_lr`` exactly.
    """
    if step < 1:
        raise OptimizerError(f"noam_lr is defined for step >= 1, got {step}")
    if warmup < 1:
        raise OptimizerError(f"warmup must be >= 1, got {warmup}")
    if step < warmup:
        return base_lr * step / warmup
    return base_lr * math.sqrt(warmup / step)


def radam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8, names=None):
    """One rectified-Adam update, in place.

    ``state`` is a dict holding ``step`` and per-parameter ``exp_avg`` /
    ``exp_avg_sq`` lists; it is created on first use. When the variance
    rectification term is not yet tractable (``rho_t <= 4``) the update falls
    back to bias-corrected momentum.
    """
    beta1, beta2 = betas
    if not state:
        state["step"] = 0
        state["exp_avg"] = [torch.zeros_like(p) for p in params]
        state["exp_avg_sq"] = [torch.zeros_like(p) for p in params]
    state["step"] += 1
    t = state["step"]
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    beta2_t = beta2**t
    rho_t = rho_inf - 2.0 * t * beta2_t / (1.0 - beta2_t)
    bias1 = 1.0 - beta1**t
    if rho_t > 4.0:
        rect = math.sqrt(
            (rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)
        )
    else:
        rect = None
    with torch.no_grad():
        for k, (p, g) in enumerate(zip(params, grads)):
            if g is None:
                continue
            if not torch.isfinite(g).all():
                name = names[k] if names else f"#{k}"
                raise OptimizerError(f"non-finite gradient for parameter {name}")
            m = state["exp_avg"][k]
            v = state["exp_avg_sq"][k]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            m_hat = m / bias1
            if rect is None:
                p.sub_(lr * m_hat)
            else:
                adaptive = math.sqrt(1.0 - beta2_t) / (v.sqrt() + eps)
                p.sub_(lr * rect * m_hat * adaptive)
    return params, state


class RAdam(torch.optim.Optimizer):
    """``torch.optim`` wrapper around :func:`radam_step`."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        super().__init__(params, dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay))

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        names = getattr(self, "param_names", {})
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is None:
                    continue
                g = p.grad
                if group["weight_decay"]:
                    g = g.add(p, alpha=group["weight_decay"])
                state = self.state[p]
                st = {}
                if state:
                    st = {"step": state["step"], "exp_avg": [state["exp_avg"]],
                          "exp_avg_sq": [state["exp_avg_sq"]]}
                radam_step([p], [g], st, group["lr"], group["betas"], group["eps"],
                           [names.get(id(p), "?")])
                state["step"] = st["step"]
                state["exp_avg"] = st["exp_avg"][0]
                state["exp_avg_sq"] = st["exp_avg_sq"][0]
        return loss
