"""RMSProp with per-parameter squared-gradient accumulators."""

from __future__ import annotations

import numpy as np

from pcmu.errors import ConfigError


class RmsProp:
    """v <- rho*v + (1-rho)*g^2;  p <- p - lr*g/sqrt(v + eps), elementwise."""

    def __init__(self, learning_rate: float, rho: float = 0.99,
                 eps: float = 1e-8):
        if learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if not 0.0 < rho < 1.0:
            raise ConfigError("rho must be in (0,1)")
        if eps <= 0:
            raise ConfigError("eps must be positive")
        self.learning_rate = learning_rate
        self.rho = rho
        self.eps = eps
        self.accumulators = None

    def apply(self, params, grads) -> None:
        """One update step; params are modified in place."""
        if self.accumulators is None:
            self.accumulators = [np.zeros_like(p) for p in params]
        if len(params) != len(self.accumulators):
            raise ConfigError("parameter count changed under the optimizer")
        for p, g, v in zip(params, grads, self.accumulators):
            if p.shape != g.shape:
                raise ConfigError(
                    f"gradient shape {g.shape} != parameter shape {p.shape}")
            v *= self.rho
            v += (1.0 - self.rho) * g * g
            p -= self.learning_rate * g / np.sqrt(v + self.eps)

    def state_arrays(self):
        return [] if self.accumulators is None else self.accumulators

    def set_state_arrays(self, arrays) -> None:
        self.accumulators = [np.array(a, dtype=np.float64) for a in arrays]
