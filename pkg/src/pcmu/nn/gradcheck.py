"""Finite-difference verification of analytic gradients.

Central differences with h = 1e-5 in 64-bit arithmetic; intended for
down-sized networks where touching every parameter is affordable.
"""

from __future__ import annotations

import numpy as np


def max_rel_error(params, analytic_grads, loss_fn, h: float = 1e-5) -> float:
    """Worst relative error between analytic and numeric gradients.

    params: list of arrays (perturbed in place and restored);
    analytic_grads: arrays aligned with params; loss_fn() re-evaluates the
    scalar loss from the current parameter values.
    """
    worst = 0.0
    for p, g in zip(params, analytic_grads):
        flat_p = p.reshape(-1)
        flat_g = np.asarray(g).reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + h
            up = loss_fn()
            flat_p[i] = orig - h
            down = loss_fn()
            flat_p[i] = orig
            numeric = (up - down) / (2.0 * h)
            analytic = flat_g[i]
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst
