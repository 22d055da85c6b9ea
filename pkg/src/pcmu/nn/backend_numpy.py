"""Pure-numpy implementations of the trainable-network primitives.

This is the fallback used when the compiled extension is unavailable; both
implementations expose the same functions and are interchangeable (see
``pcmu.nn.backend``).  Shapes are fixed conventions:

* dense inputs are ``(batch, features)``,
* sequence inputs are time-major ``(T, batch, features)``,
* LSTM gate blocks are packed ``[input, forget, cell, output]`` along the
  last axis, so ``wx`` is ``(in, 4H)``, ``wh`` is ``(H, 4H)`` and ``b`` is
  ``(4H,)``.
"""

import numpy as np

ACT_LINEAR = 0
ACT_RELU = 1
ACT_TANH = 2


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def dense_forward(x, ws, bs, acts):
    """Run an affine+activation stack; returns (output, cache)."""
    inputs = []
    outs = []
    out = x
    for w, b, act in zip(ws, bs, acts):
        inputs.append(out)
        z = out @ w + b
        if act == ACT_RELU:
            out = np.maximum(z, 0.0)
        elif act == ACT_TANH:
            out = np.tanh(z)
        else:
            out = z
        outs.append(out)
    return out, (inputs, outs)


def dense_backward(grad_out, ws, acts, cache):
    """Reverse-mode gradients of dense_forward.

    Returns (grad_ws, grad_bs, grad_x) where grad_x is the gradient with
    respect to the stack input.
    """
    inputs, outs = cache
    g = grad_out
    grad_ws = [None] * len(ws)
    grad_bs = [None] * len(ws)
    for layer in reversed(range(len(ws))):
        act = acts[layer]
        if act == ACT_RELU:
            g = g * (outs[layer] > 0)
        elif act == ACT_TANH:
            g = g * (1.0 - outs[layer] ** 2)
        grad_ws[layer] = inputs[layer].T @ g
        grad_bs[layer] = g.sum(axis=0)
        g = g @ ws[layer].T
    return grad_ws, grad_bs, g


def lstm_forward(x, wx, wh, b):
    """Single-direction LSTM layer over a full sequence.

    x: (T, B, I).  Initial hidden and cell states are zero.  Returns the
    hidden-state sequence (T, B, H) and a cache for lstm_backward.
    """
    t_len, batch, _ = x.shape
    hidden = wh.shape[0]
    gates = (x.reshape(t_len * batch, -1) @ wx + b).reshape(t_len, batch, 4 * hidden)
    cs = np.empty((t_len, batch, hidden))
    hs = np.empty((t_len, batch, hidden))
    h = np.zeros((batch, hidden))
    c = np.zeros((batch, hidden))
    for t in range(t_len):
        g = gates[t] + h @ wh
        gi = _sigmoid(g[:, :hidden])
        gf = _sigmoid(g[:, hidden:2 * hidden])
        gc = np.tanh(g[:, 2 * hidden:3 * hidden])
        go = _sigmoid(g[:, 3 * hidden:])
        c = gf * c + gi * gc
        h = go * np.tanh(c)
        gates[t, :, :hidden] = gi
        gates[t, :, hidden:2 * hidden] = gf
        gates[t, :, 2 * hidden:3 * hidden] = gc
        gates[t, :, 3 * hidden:] = go
        cs[t] = c
        hs[t] = h
    return hs, (x, gates, cs, hs)


def lstm_backward(grad_h, wx, wh, cache):
    """Full-sequence backpropagation through time for lstm_forward.

    grad_h: (T, B, H) gradients on every hidden state.  Returns
    (grad_x, grad_wx, grad_wh, grad_b).
    """
    x, gates, cs, hs = cache
    t_len, batch, in_dim = x.shape
    hidden = wh.shape[0]
    d_gates = np.empty((t_len, batch, 4 * hidden))
    dh_rec = np.zeros((batch, hidden))
    dc = np.zeros((batch, hidden))
    for t in reversed(range(t_len)):
        gi = gates[t, :, :hidden]
        gf = gates[t, :, hidden:2 * hidden]
        gc = gates[t, :, 2 * hidden:3 * hidden]
        go = gates[t, :, 3 * hidden:]
        tc = np.tanh(cs[t])
        dh = grad_h[t] + dh_rec
        do = dh * tc
        dc = dc + dh * go * (1.0 - tc * tc)
        c_prev = cs[t - 1] if t > 0 else np.zeros((batch, hidden))
        di = dc * gc
        dgc = dc * gi
        df = dc * c_prev
        dc = dc * gf
        d_gates[t, :, :hidden] = di * gi * (1.0 - gi)
        d_gates[t, :, hidden:2 * hidden] = df * gf * (1.0 - gf)
        d_gates[t, :, 2 * hidden:3 * hidden] = dgc * (1.0 - gc * gc)
        d_gates[t, :, 3 * hidden:] = do * go * (1.0 - go)
        dh_rec = d_gates[t] @ wh.T
    flat = d_gates.reshape(t_len * batch, 4 * hidden)
    grad_wx = x.reshape(t_len * batch, in_dim).T @ flat
    h_prev = np.concatenate([np.zeros((1, batch, hidden)), hs[:-1]], axis=0)
    grad_wh = h_prev.reshape(t_len * batch, hidden).T @ flat
    grad_b = flat.sum(axis=0)
    grad_x = (flat @ wx.T).reshape(t_len, batch, in_dim)
    return grad_x, grad_wx, grad_wh, grad_b
