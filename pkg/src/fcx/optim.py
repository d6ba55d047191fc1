"""LAMB optimizer, cosine learning-rate schedule and step-indexed batch sizes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class LambState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.0


@dataclass(frozen=True)
class LrSchedule:
    lr_init: float
    lr_final: float
    total_steps: int

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


PRETRAIN_LR = (3e-3, 3e-4)
FINETUNE_LR = (1e-4, 1e-5)
DEFAULT_BATCH_SCHEDULE = ((0, 4), (12000, 8))


def cosine_lr(t: int, sched: LrSchedule) -> float:
    """Cosine decay from lr_init at t=0 to lr_final at t=T; clamped past T."""
    if t < 0:
        raise ValueError("step must be non-negative")
    t = min(t, sched.total_steps)
    return sched.lr_final + 0.5 * (sched.lr_init - sched.lr_final) * (
        1.0 + math.cos(math.pi * t / sched.total_steps))


def batch_size_at(step: int, schedule) -> int:
    if not schedule:
        raise ValueError("empty batch-size schedule")
    if schedule[0][0] != 0:
        raise ValueError("batch-size schedule must start at step 0")
    size = schedule[0][1]
    for start, s in schedule:
        if start <= step:
            size = s
        else:
            break
    return int(size)


def lamb_update(w: torch.Tensor, g: torch.Tensor, m: torch.Tensor, v: torch.Tensor, t: int,
                lr: float, beta1: float, beta2: float, eps: float, weight_decay: float) -> None:
    """In-place LAMB update of one tensor; m, v are updated in place too."""
    m.mul_(beta1).add_(g, alpha=1 - beta1)
    v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    r = m_hat / (v_hat.sqrt() + eps)
    if weight_decay:
        r = r + weight_decay * w
    w_norm = torch.linalg.vector_norm(w)
    r_norm = torch.linalg.vector_norm(r)
    if w_norm > 0 and r_norm > 0:
        trust = w_norm / r_norm
    else:
        trust = 1.0
    w.sub_(lr * trust * r)


def lamb_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: LambState,
              lr: float) -> dict[str, torch.Tensor]:
    """Functional LAMB step over named tensors; returns updated copies."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for name, g in grads.items():
        if not torch.all(torch.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    out = {}
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(w.shape)} for {name!r}")
        if name not in state.m:
            state.m[name] = torch.zeros_like(w)
            state.v[name] = torch.zeros_like(w)
        w = w.clone()
        lamb_update(w, g, state.m[name], state.v[name], state.t, lr,
                    state.beta1, state.beta2, state.eps, state.weight_decay)
        out[name] = w
    return out


class Lamb(torch.optim.Optimizer):
    """LAMB with bias correction and an unclamped layer-wise trust ratio."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-6,
                 weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError(f"invalid learning rate {lr}")
        super().__init__(params, dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay))
        self.names: dict[int, str] = {}

    def name_params(self, named_params) -> "Lamb":
        self.names = {id(p): n for n, p in named_params}
        return self

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is not None and not torch.all(torch.isfinite(p.grad)):
                    name = self.names.get(id(p), f"<tensor {tuple(p.shape)}>")
                    raise NonFiniteGradient(f"non-finite gradient for parameter {name}")
        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["m"] = torch.zeros_like(p)
                    state["v"] = torch.zeros_like(p)
                state["step"] += 1
                lamb_update(p, p.grad, state["m"], state["v"], state["step"], group["lr"],
                            beta1, beta2, group["eps"], group["weight_decay"])
        return loss

    def set_lr(self, lr: float) -> None:
        for group in self.param_groups:
            group["lr"] = lr
