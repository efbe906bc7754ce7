from .tensor import Tensor, no_grad, parameter, grad_enabled
from .layers import (
    LSTM, MLP, ConvEncoder, Dense, LstmState, Module, BEAM_CNN, activate, brnn_forward,
    conv1d_block, conv_output_length, dense_forward, lstm_step,
)
from .optim import OptimizerState, Plateau, StepDecay, adam_step, scheduler_step

__all__ = [
    "Tensor", "no_grad", "parameter", "grad_enabled",
    "LSTM", "MLP", "ConvEncoder", "Dense", "LstmState", "Module", "BEAM_CNN",
    "activate", "brnn_forward", "conv1d_block", "conv_output_length", "dense_forward", "lstm_step",
    "OptimizerState", "Plateau", "StepDecay", "adam_step", "scheduler_step",
]
