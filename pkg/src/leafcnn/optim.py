"""SGD with momentum, weight decay and the step learning-rate policy."""

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeMismatchError


@dataclass
class OptimizerConfig:
    base_lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 0.0005
    gamma: float = 0.1
    step_epochs: int = 10
    batch_size: int = 100
    total_epochs: int = 30

    def __post_init__(self):
        if min(self.base_lr, self.momentum, self.weight_decay) < 0:
            raise ValueError("optimizer hyperparameters must be nonnegative")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0,1), got {self.gamma}")
        if self.step_epochs <= 0 or self.batch_size <= 0 or self.total_epochs <= 0:
            raise ValueError("step_epochs, batch_size, total_epochs must be positive")


def lr_at_epoch(cfg, epoch):
    """Step policy: base_lr * gamma ** floor(epoch / step_epochs)."""
    if not 0 <= epoch < cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    return cfg.base_lr * cfg.gamma ** (epoch // cfg.step_epochs)


def init_velocity(params):
    """Zero momentum buffers mirroring the parameter map."""
    return {name: np.zeros_like(p) for name, p in params.items()}


def sgd_step(params, grads, velocity, lr, cfg):
    """One SGD update, per slot and in place:

        g' = grad + weight_decay * param
        v  = momentum * v - lr * g'
        param += v

    Weight decay is folded into the gradient before the momentum update and
    applies to every slot, biases included.
    """
    for name, p in params.items():
        g = grads[name]
        v = velocity[name]
        if g.shape != p.shape or v.shape != p.shape:
            raise ShapeMismatchError(
                f"slot {name}: param {p.shape}, grad {g.shape}, velocity {v.shape}"
            )
        gp = g + p.dtype.type(cfg.weight_decay) * p
        np.multiply(v, p.dtype.type(cfg.momentum), out=v)
        v -= p.dtype.type(lr) * gp
        p += v
    return params, velocity
