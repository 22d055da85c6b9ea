"""Kernel backend selection.

The compiled extension is preferred when it importable; otherwise the numpy
fallback is used.  ``PCMU_PURE_PYTHON=1`` forces the fallback.  ``use()``
switches backends at runtime (benchmarks and cross-checking tests).
"""

import os

from pcmu.nn import backend_numpy

ACT_LINEAR = backend_numpy.ACT_LINEAR
ACT_RELU = backend_numpy.ACT_RELU
ACT_TANH = backend_numpy.ACT_TANH

_COMPILED = None
if os.environ.get("PCMU_PURE_PYTHON") != "1":
    try:
        from pcmu import _kernels as _COMPILED
    except ImportError:
        _COMPILED = None

_active = _COMPILED if _COMPILED is not None else backend_numpy

dense_forward = _active.dense_forward
dense_backward = _active.dense_backward
lstm_forward = _active.lstm_forward
lstm_backward = _active.lstm_backward


def available() -> tuple:
    """Names of the importable backends."""
    return ("numpy",) if _COMPILED is None else ("compiled", "numpy")


def name() -> str:
    return "compiled" if _active is _COMPILED else "numpy"


def use(which: str) -> None:
    """Switch the active backend ("compiled" or "numpy")."""
    global _active, dense_forward, dense_backward, lstm_forward, lstm_backward
    if which == "compiled":
        if _COMPILED is None:
            raise RuntimeError("compiled kernels are not available")
        _active = _COMPILED
    elif which == "numpy":
        _active = backend_numpy
    else:
        raise ValueError(f"unknown backend {which!r}")
    dense_forward = _active.dense_forward
    dense_backward = _active.dense_backward
    lstm_forward = _active.lstm_forward
    lstm_backward = _active.lstm_backward
