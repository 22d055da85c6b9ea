"""Minimal trainable-network kernel: dense stacks, LSTM stacks, losses,
RMSProp, and finite-difference gradient verification."""

from pcmu.nn import backend
from pcmu.nn.dense import DenseStack, glorot_uniform
from pcmu.nn.gradcheck import max_rel_error
from pcmu.nn.losses import mse_loss, sigmoid_bce, softmax, softmax_xent
from pcmu.nn.lstm import LstmLayer, LstmStack
from pcmu.nn.optim import RmsProp

__all__ = [
    "backend", "DenseStack", "glorot_uniform", "max_rel_error",
    "mse_loss", "sigmoid_bce", "softmax", "softmax_xent",
    "LstmLayer", "LstmStack", "RmsProp",
]
