"""SGD with heavy-ball momentum over name-keyed parameter maps."""
from __future__ import annotations

from typing import Dict, Mapping, Optional

import numpy as np

from ..errors import DimensionError
from .tensor import GradientMap, Tensor


def sgd_momentum_step(params: Mapping[str, Tensor], grads: GradientMap, lr: float, mu: float,
                      velocity: Optional[Dict[str, np.ndarray]] = None) -> Dict[str, np.ndarray]:
    """``v <- mu*v + g``; ``theta <- theta - lr*v``.

    Parameters are updated by rebinding ``.data`` (never in place), so any
    snapshot holding the old arrays stays valid. Returns the new velocity map.
    """
    velocity = {} if velocity is None else velocity
    new_velocity = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise DimensionError(f"sgd: gradient {g.shape} does not match parameter {name} {p.data.shape}")
        v = velocity.get(name)
        if v is None:
            v = g.copy()
        else:
            if v.shape != p.data.shape:
                raise DimensionError(f"sgd: velocity {v.shape} does not match parameter {name} {p.data.shape}")
            v = mu * v + g
        p.data = p.data - lr * v
        new_velocity[name] = v
    return new_velocity


class SGD:
    """Stateful wrapper that keeps the velocity between steps."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 0.01, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, grads: GradientMap) -> None:
        # parameters may have grown (new head columns) since the last step
        for name, v in list(self.velocity.items()):
            shape = self.params[name].data.shape
            if v.shape != shape:
                grown = np.zeros(shape)
                grown[tuple(slice(0, s) for s in v.shape)] = v
                self.velocity[name] = grown
        self.velocity = sgd_momentum_step(self.params, grads, self.lr, self.momentum, self.velocity)
