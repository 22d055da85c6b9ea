"""Dense (fully connected) stacks with manual reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pcmu.errors import ConfigError
from pcmu.nn import backend

ACTIVATIONS = {"linear": backend.ACT_LINEAR, "relu": backend.ACT_RELU,
               "tanh": backend.ACT_TANH}


def glorot_uniform(shape, rng) -> np.ndarray:
    """Uniform init in +-sqrt(6/(fan_in+fan_out))."""
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class DenseStack:
    """A stack of affine layers with per-layer activations.

    weights[i] has shape (in_i, out_i); adjacent widths must match.
    """

    weights: list
    biases: list
    activations: list  # int codes, see backend

    @classmethod
    def create(cls, widths, activations, rng) -> "DenseStack":
        if len(widths) != len(activations) + 1:
            raise ConfigError("need one activation per layer")
        acts = []
        for a in activations:
            if a not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {a!r}")
            acts.append(ACTIVATIONS[a])
        ws = [glorot_uniform((widths[i], widths[i + 1]), rng)
              for i in range(len(widths) - 1)]
        bs = [np.zeros(widths[i + 1]) for i in range(len(widths) - 1)]
        return cls(ws, bs, acts)

    @property
    def in_width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_width(self) -> int:
        return self.weights[-1].shape[1]

    def forward(self, x: np.ndarray):
        """x: (batch, in_width). Returns (output, cache)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.in_width:
            raise ConfigError(
                f"input width {x.shape[1]} != expected {self.in_width}")
        return backend.dense_forward(x, self.weights, self.biases,
                                     self.activations)

    def backward(self, cache, grad_out: np.ndarray):
        """Returns (grads aligned with arrays(), grad wrt input)."""
        gw, gb, gx = backend.dense_backward(grad_out, self.weights,
                                            self.activations, cache)
        grads = []
        for w, b in zip(gw, gb):
            grads.append(w)
            grads.append(b)
        return grads, gx

    def arrays(self) -> list:
        """Parameter arrays in a fixed order (weight, bias per layer)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def set_arrays(self, arrays) -> None:
        expected = self.arrays()
        if len(arrays) != len(expected):
            raise ConfigError("parameter count mismatch")
        for dst, src in zip(expected, arrays):
            if dst.shape != src.shape:
                raise ConfigError("parameter shape mismatch")
            dst[...] = src

    def copy(self) -> "DenseStack":
        return DenseStack([w.copy() for w in self.weights],
                          [b.copy() for b in self.biases],
                          list(self.activations))
