"""Parameterised layers built on :mod:`fena.nn.ops`."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError
from . import ops
from .tensor import Tensor, as_tensor, parameter

ACTIVATIONS = ("tanh", "linear", "eswish", "snake")

# Layer stack of the static-input CNN encoder: (kind, kernel, stride, channels)
# for conv, (kind, size, stride) for pooling, (kind, rate) for dropout.
BEAM_CNN = (
    ("conv", 3, 1, 8), ("pool", 2, 2), ("dropout", 0.2),
    ("conv", 3, 1, 16), ("pool", 2, 2), ("dropout", 0.2),
    ("conv", 5, 1, 16), ("pool", 2, 2), ("dropout", 0.2),
    ("conv", 5, 2, 16), ("pool", 2, 2), ("dropout", 0.2),
)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


class Module:
    """Minimal container: parameters are Tensor attributes or child modules."""

    training = False

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(prefix + key + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def activate(kind: str, x: Tensor, param: Tensor | None = None, where: str = "activation") -> Tensor:
    """Apply one of the supported activations.

    ``param`` is the trainable scalar for ``eswish`` (beta) or ``snake``
    (log of a1).  Non-finite input raises with ``where`` in the message.
    """
    ops.check_finite(x, where)
    if kind == "tanh":
        return ops.tanh(x)
    if kind == "linear":
        return x
    if kind == "eswish":
        return ops.eswish(x, param)
    if kind == "snake":
        return ops.snake(x, param)
    raise ValueError(f"unknown activation {kind!r}")


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, activation: str, rng: np.random.Generator, name: str = "dense"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.name = name
        self.activation = activation
        self.W = parameter(glorot_uniform(rng, (n_out, n_in), n_in, n_out))
        self.b = parameter(np.zeros(n_out))
        if activation == "eswish":
            self.beta = parameter(np.ones(1))
        elif activation == "snake":
            self.log_a = parameter(np.zeros(1))  # a1 = 1

    @property
    def act_param(self) -> Tensor | None:
        return getattr(self, "beta", None) if self.activation == "eswish" else getattr(self, "log_a", None)

    def __call__(self, x: Tensor) -> Tensor:
        return dense_forward(self.W, self.b, self.activation, x, self.act_param, where=self.name)


def dense_forward(W: Tensor, b: Tensor, kind: str, x: Tensor, param: Tensor | None = None,
                  where: str = "dense") -> Tensor:
    """``activate(kind, x @ W.T + b)`` over a batch of row vectors."""
    x = as_tensor(x)
    squeeze = x.data.ndim == 1
    if squeeze:
        x = ops.reshape(x, (1, x.shape[0]))
    if x.shape[1] != W.shape[1]:
        raise ShapeError(f"dense_forward[{where}]", W.shape, x.shape)
    y = activate(kind, ops.linear(x, W, b), param, where=where)
    return ops.reshape(y, (W.shape[0],)) if squeeze else y


class MLP(Module):
    """Stack of dense layers; ``sizes`` and ``activations`` pair up layer by layer."""

    def __init__(self, n_in: int, sizes, activations, rng: np.random.Generator, name: str = "mlp"):
        if len(sizes) != len(activations):
            raise ValueError(f"{name}: {len(sizes)} sizes but {len(activations)} activations")
        self.layers = []
        prev = n_in
        for i, (n, act) in enumerate(zip(sizes, activations)):
            self.layers.append(Dense(prev, n, act, rng, name=f"{name}[{i}]"))
            prev = n
        self.n_out = prev

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


@dataclass
class LstmState:
    hidden: Tensor
    cell: Tensor

    def __post_init__(self):
        if self.hidden.shape != self.cell.shape:
            raise ShapeError("LstmState", self.hidden.shape, self.cell.shape)

    @classmethod
    def zeros(cls, batch: int, cells: int) -> "LstmState":
        return cls(Tensor(np.zeros((batch, cells))), Tensor(np.zeros((batch, cells))))


class LSTM(Module):
    """One direction of LSTM cells, no peepholes, forget-gate bias initialised to 1."""

    def __init__(self, n_in: int, cells: int, rng: np.random.Generator):
        H = cells
        self.cells = H
        self.W = parameter(glorot_uniform(rng, (4 * H, n_in), n_in, 4 * H))
        self.U = parameter(np.concatenate([orthogonal(rng, H) for _ in range(4)], axis=0))
        b = np.zeros(4 * H)
        b[H:2 * H] = 1.0
        self.b = parameter(b)

    def step(self, x_t: Tensor, state: LstmState) -> tuple[Tensor, LstmState]:
        return lstm_step(self, x_t, state)

    def sequence(self, x: Tensor, state: LstmState, reverse: bool = False) -> Tensor:
        return ops.lstm_sequence(x, state.hidden, state.cell, self.W, self.U, self.b, reverse=reverse)


def lstm_step(params: LSTM, x_t: Tensor, state: LstmState) -> tuple[Tensor, LstmState]:
    """One LSTM update composed from primitive ops (reference path for the fused kernel)."""
    H = params.cells
    if x_t.data.ndim != 2 or x_t.shape[1] != params.W.shape[1]:
        raise ShapeError("lstm_step", x_t.shape, params.W.shape, detail="input width")
    if state.hidden.shape != (x_t.shape[0], H):
        raise ShapeError("lstm_step", state.hidden.shape, (x_t.shape[0], H), detail="state width")
    z = ops.add(ops.linear(x_t, params.W, params.b),
                ops.matmul(state.hidden, ops.transpose(params.U, (1, 0))))
    i = ops.sigmoid(z[:, :H])
    f = ops.sigmoid(z[:, H:2 * H])
    g = ops.tanh(z[:, 2 * H:3 * H])
    o = ops.sigmoid(z[:, 3 * H:])
    c = ops.add(ops.mul(f, state.cell), ops.mul(i, g))
    h = ops.mul(o, ops.tanh(c))
    return h, LstmState(h, c)


def brnn_forward(fwd: LSTM, bwd: LSTM, seq: Tensor, init_fwd: LstmState, init_bwd: LstmState) -> Tensor:
    """Bidirectional pass over ``seq`` (B, T, F); output (B, T, 2H) as [forward ; backward]."""
    seq = as_tensor(seq)
    if seq.data.ndim != 3 or seq.shape[1] < 1:
        raise ShapeError("brnn_forward", seq.shape, detail="need a non-empty (batch, time, features) sequence")
    hf = fwd.sequence(seq, init_fwd, reverse=False)
    hb = bwd.sequence(seq, init_bwd, reverse=True)
    return ops.concat([hf, hb], axis=2)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, rng: np.random.Generator):
        self.stride = stride
        self.W = parameter(glorot_uniform(rng, (c_out, c_in, kernel), c_in * kernel, c_out * kernel))
        self.b = parameter(np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv1d(x, self.W, self.b, self.stride)


def conv_output_length(length: int, layers=BEAM_CNN) -> tuple[int, int]:
    """(length, channels) after the stack, before flattening."""
    channels = None
    for spec in layers:
        if spec[0] == "conv":
            _, k, s, n = spec
            length = (length - k) // s + 1
            channels = n
        elif spec[0] == "pool":
            _, k, s = spec
            length = (length - k) // s + 1
        if length < 1:
            raise ShapeError("conv stack", (length,), detail="input too short for receptive field")
    return length, channels


class ConvEncoder(Module):
    """Conv/pool/dropout stack followed by flattening, (B, C, L) -> (B, features)."""

    def __init__(self, c_in: int, length: int, rng: np.random.Generator, layers=BEAM_CNN, name: str = "cnn"):
        self.name = name
        self.spec = tuple(tuple(s) for s in layers)
        self.rng = rng
        self.convs = []
        c = c_in
        for s in self.spec:
            if s[0] == "conv":
                self.convs.append(Conv1d(c, s[3], s[1], s[2], rng))
                c = s[3]
        out_len, out_c = conv_output_length(length, self.spec)
        self.c_in, self.length = c_in, length
        self.n_out = out_len * out_c

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 3 or x.shape[1] != self.c_in:
            raise ShapeError(self.name, x.shape, detail=f"expected (B, {self.c_in}, L)")
        convs = iter(self.convs)
        for s in self.spec:
            if s[0] == "conv":
                x = next(convs)(x)
            elif s[0] == "pool":
                x = ops.maxpool1d(x, s[1], s[2])
            elif s[0] == "dropout":
                x = ops.dropout(x, s[1], self.rng, self.training)
        return ops.reshape(x, (x.shape[0], x.shape[1] * x.shape[2]))


def conv1d_block(encoder: ConvEncoder, x: Tensor) -> Tensor:
    return encoder(x)
