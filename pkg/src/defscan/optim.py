"""AdamW with decoupled weight decay, plus the warmup/cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InputError
from .tensor import Parameter


@dataclass
class AdamState:
    """Per-parameter moment estimates and the shared step counter."""

    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def init_adam_state(params: list[np.ndarray]) -> AdamState:
    return AdamState(
        step=0,
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
    )


def adamw_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState,
               lr: float, betas: tuple[float, float] = (0.9, 0.999),
               eps: float = 1e-8, weight_decay: float = 0.0):
    """One decoupled-weight-decay Adam update; pure, returns new lists/state.

    Weight decay multiplies each parameter by (1 - lr * wd) independently of
    the gradient-driven update.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("params/grads/state length mismatch")
    b1, b2 = betas
    t = state.step + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise DimensionError(f"grad shape {g.shape} != param shape {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p = p * (1.0 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_params.append(p)
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(step=t, m=new_m, v=new_v)


class AdamW:
    """In-place optimizer over a fixed parameter list."""

    def __init__(self, params: list[Parameter], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = init_adam_state([p.data for p in self.params])

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                 for p in self.params]
        new_values, self.state = adamw_step(
            [p.data for p in self.params], grads, self.state,
            lr=lr, betas=self.betas, eps=self.eps, weight_decay=self.weight_decay,
        )
        for p, nv in zip(self.params, new_values):
            p.data = nv


def lr_at(step: int, base_lr: float, total_steps: int, warmup_steps: int = 0,
          schedule: str = "cosine") -> float:
    """Learning rate for 0-based ``step``: linear warmup then cosine decay to 0."""
    if step < 0:
        raise InputError("step must be non-negative")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    if schedule == "constant":
        return base_lr
    if schedule != "cosine":
        raise InputError(f"unknown schedule: {schedule!r}")
    span = max(1, total_steps - warmup_steps)
    frac = min(1.0, (step - warmup_steps) / span)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * frac))
