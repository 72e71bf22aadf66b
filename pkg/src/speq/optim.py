"""SGD with momentum and per-parameter learning-rate multipliers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class ParamGroup:
    tensor: Tensor
    lr_mult: float = 1.0
    weight_decay: float = 0.0
    name: str = ""


@dataclass
class SGD:
    """Momentum SGD.

    Per step, for every parameter ``p`` with gradient ``g``::

        g <- g + weight_decay * p
        v <- momentum * v + g
        p <- p - lr * lr_mult * v
    """

    params: list[ParamGroup]
    lr: float
    momentum: float = 0.9
    buffers: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.params = [p if isinstance(p, ParamGroup) else ParamGroup(p) for p in self.params]
        self.buffers = [np.zeros_like(p.tensor.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.grad = None

    def step(self) -> None:
        for group, buf in zip(self.params, self.buffers):
            t = group.tensor
            if t.grad is None:
                raise ValueError(f"parameter {group.name or t.shape} has no gradient")
            g = t.grad
            if group.weight_decay:
                g = g + group.weight_decay * t.data
            buf *= self.momentum
            buf += g
            t.data = (t.data - (self.lr * group.lr_mult) * buf).astype(t.dtype)


def step_decay_lr(base_lr: float, epoch: int, total_epochs: int,
                  milestones: tuple[float, ...] = (0.6, 0.85), factor: float = 0.1) -> float:
    """Learning rate decayed by ``factor`` at each fractional milestone of training."""
    lr = base_lr
    for m in milestones:
        if epoch >= int(round(m * total_epochs)):
            lr *= factor
    return lr
