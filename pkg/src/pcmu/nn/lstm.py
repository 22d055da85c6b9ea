"""Multi-layer LSTM stacks, optionally bidirectional, with full-sequence BPTT.

Gate blocks are packed [input, forget, cell, output]; the forget-gate bias
is initialised to +1, which helps short-sequence training.  The backward
direction simply consumes the time-reversed sequence, so output step t of a
bidirectional stack is the concatenation of the forward state at t and the
backward state at t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pcmu.errors import ConfigError
from pcmu.nn import backend
from pcmu.nn.dense import glorot_uniform


@dataclass
class LstmLayer:
    wx: np.ndarray  # (in, 4H)
    wh: np.ndarray  # (H, 4H)
    b: np.ndarray   # (4H,)

    @classmethod
    def create(cls, in_width: int, hidden: int, rng) -> "LstmLayer":
        wx = glorot_uniform((in_width, 4 * hidden), rng)
        wh = glorot_uniform((hidden, 4 * hidden), rng)
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0  # forget gate
        return cls(wx, wh, b)

    @property
    def hidden(self) -> int:
        return self.wh.shape[0]


class LstmStack:
    """n_layers LSTM layers; each layer feeds the next one's input."""

    def __init__(self, layers, bidirectional: bool):
        self.layers = layers  # list of lists: [layer][direction]
        self.bidirectional = bidirectional

    @classmethod
    def create(cls, in_width: int, hidden: int, n_layers: int,
               bidirectional: bool, rng) -> "LstmStack":
        n_dir = 2 if bidirectional else 1
        layers = []
        width = in_width
        for _ in range(n_layers):
            layers.append([LstmLayer.create(width, hidden, rng)
                           for _ in range(n_dir)])
            width = hidden * n_dir
        return cls(layers, bidirectional)

    @property
    def out_width(self) -> int:
        n_dir = 2 if self.bidirectional else 1
        return self.layers[-1][0].hidden * n_dir

    def forward(self, x: np.ndarray):
        """x: (T, batch, in_width); returns (out (T, batch, out_width), cache)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[0] < 1:
            raise ConfigError("sequence input must be (T, batch, features) with T >= 1")
        caches = []
        cur = x
        for directions in self.layers:
            outs = []
            layer_caches = []
            for d, layer in enumerate(directions):
                inp = cur[::-1] if d == 1 else cur
                h, cache = backend.lstm_forward(np.ascontiguousarray(inp),
                                                layer.wx, layer.wh, layer.b)
                outs.append(h[::-1] if d == 1 else h)
                layer_caches.append(cache)
            cur = outs[0] if len(outs) == 1 else np.concatenate(outs, axis=2)
            caches.append(layer_caches)
        return cur, caches

    def backward(self, caches, grad_out: np.ndarray):
        """Returns (grads aligned with arrays(), grad wrt stack input)."""
        grads_per_layer = []
        g = np.asarray(grad_out, dtype=np.float64)
        for directions, layer_caches in zip(reversed(self.layers),
                                            reversed(caches)):
            hidden = directions[0].hidden
            gx_sum = None
            layer_grads = []
            for d, (layer, cache) in enumerate(zip(directions, layer_caches)):
                g_dir = g[:, :, d * hidden:(d + 1) * hidden]
                if d == 1:
                    g_dir = g_dir[::-1]
                gx, gwx, gwh, gb = backend.lstm_backward(
                    np.ascontiguousarray(g_dir), layer.wx, layer.wh, cache)
                if d == 1:
                    gx = gx[::-1]
                gx_sum = gx if gx_sum is None else gx_sum + gx
                layer_grads.append((gwx, gwh, gb))
            grads_per_layer.append(layer_grads)
            g = gx_sum
        grads = []
        for layer_grads in reversed(grads_per_layer):
            for gwx, gwh, gb in layer_grads:
                grads.extend((gwx, gwh, gb))
        return grads, g

    def arrays(self) -> list:
        out = []
        for directions in self.layers:
            for layer in directions:
                out.extend((layer.wx, layer.wh, layer.b))
        return out

    def set_arrays(self, arrays) -> None:
        expected = self.arrays()
        if len(arrays) != len(expected):
            raise ConfigError("parameter count mismatch")
        for dst, src in zip(expected, arrays):
            if dst.shape != src.shape:
                raise ConfigError("parameter shape mismatch")
            dst[...] = src

    def copy(self) -> "LstmStack":
        layers = [[LstmLayer(l.wx.copy(), l.wh.copy(), l.b.copy())
                   for l in directions] for directions in self.layers]
        return LstmStack(layers, self.bidirectional)
