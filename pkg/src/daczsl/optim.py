"""Parameter groups and the optimizers used by the training loop.

SGD with coupled weight decay drives the discriminators; AdamW with
decoupled decay drives the encoders and the prompt table. A frozen group
is left bit-identical by any optimizer call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import Tensor


class ConfigError(ValueError):
    """A configuration value violates its documented constraints."""


@dataclass
class ParameterGroup:
    """A named set of parameter tensors updated together.

    Optimizer state (moment accumulators, step count) lives on the group so
    freezing and checkpointing see one coherent unit.
    """

    name: str
    tensors: list[Tensor] = field(default_factory=list)
    frozen: bool = False
    state: dict = field(default_factory=dict)

    def zero_grad(self) -> None:
        for t in self.tensors:
            t.zero_grad()


def step_sgd(group: ParameterGroup, lr: float, weight_decay: float = 0.0) -> bool:
    """SGD update theta <- theta - lr * (grad + weight_decay * theta).

    Returns True when the group was stepped; False (the warning flag) when
    the group is frozen, in which case nothing is touched.
    """
    if group.frozen:
        return False
    for t in group.tensors:
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        t.data -= lr * (g + weight_decay * t.data)
        t.zero_grad()
    return True


def step_adamw(group: ParameterGroup, lr: float, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.0) -> bool:
    """AdamW update with bias correction and decoupled weight decay.

    The decay term lr * weight_decay * theta is subtracted separately from
    the adaptive-moment step. Returns False without touching anything when
    the group is frozen.
    """
    if group.frozen:
        return False
    adam = group.state.setdefault("adamw", {"step": 0, "m": {}, "v": {}})
    adam["step"] += 1
    step = adam["step"]
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    for i, t in enumerate(group.tensors):
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        m = adam["m"].setdefault(i, np.zeros_like(t.data))
        v = adam["v"].setdefault(i, np.zeros_like(t.data))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        t.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        t.data -= lr * weight_decay * t.data
        t.zero_grad()
    return True


def cosine_lr(base_lr: float, epoch: int, total_epochs: int,
              warmup_epochs: int = 0) -> float:
    """Learning rate at ``epoch``: linear warmup then a cosine decay to zero.

    The ramp runs 0 -> base_lr over ``warmup_epochs``; afterwards the rate is
    base_lr * 0.5 * (1 + cos(pi * progress)) with progress spanning the
    post-warmup epochs so the final epoch lands on zero.
    """
    if warmup_epochs >= total_epochs:
        raise ConfigError(
            f"warmup_epochs ({warmup_epochs}) must be < total_epochs ({total_epochs})")
    if not 0 <= epoch < total_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {total_epochs})")
    if epoch < warmup_epochs:
        return base_lr * epoch / warmup_epochs
    span = total_epochs - warmup_epochs - 1
    progress = 0.0 if span <= 0 else (epoch - warmup_epochs) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
