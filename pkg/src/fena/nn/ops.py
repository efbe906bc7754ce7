"""Differentiable primitives.

Shapes are checked before any arithmetic and mismatches raise
:class:`~fena.errors.ShapeError`; nothing is broadcast implicitly except the
explicit bias/scalar forms (``add_bias``, ``eswish`` and ``snake`` parameters).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from ..errors import NumericError, ShapeError
from .tensor import Tensor, as_tensor, record


def check_finite(x: Tensor, where: str) -> Tensor:
    if not np.isfinite(x.data).all():
        raise NumericError(f"non-finite values in {where}")
    return x


def _same(op, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same("add", a, b)
    return record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same("sub", a, b)
    return record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same("mul", a, b)
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return record(a.data * c, (a,), lambda g: (g * c,))


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a constant array of identical shape."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape != a.shape:
        raise ShapeError("mul_const", a.shape, c.shape)
    return record(a.data * c, (a,), lambda g: (g * c,))


def scalar_mul(a: Tensor, s: Tensor) -> Tensor:
    """Multiply every entry of ``a`` by the single-element tensor ``s``."""
    if s.size != 1:
        raise ShapeError("scalar_mul", a.shape, s.shape, detail="second operand must hold one value")
    sv = s.data.reshape(())
    ad = a.data

    def back(g):
        return g * sv, np.array(np.sum(g * ad)).reshape(s.shape)

    return record(ad * sv, (a, s), back)


def square(a: Tensor) -> Tensor:
    ad = a.data
    return record(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = a.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return record(np.sum(a.data, axis=axis), (a,), back)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis), 1.0 / n)


# -- structural ----------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError("reshape", a.shape, shape)
    old = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def take(a: Tensor, index) -> Tensor:
    shape = a.shape
    basic = _is_basic(index)

    def back(g):
        full = np.zeros(shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return record(np.array(a.data[index]), (a,), back)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = list(tensors[0].shape)
    ax = axis % len(ref)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(o != r for i, (o, r) in enumerate(zip(other, ref)) if i != ax):
            raise ShapeError("concat", tensors[0].shape, t.shape, detail=f"axis={axis}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=ax))

    return record(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), back)


# -- dense ---------------------------------------------------------------------

def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W.T + b`` for ``x`` of shape (N, in), ``W`` (out, in), ``b`` (out,)."""
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[1]:
        raise ShapeError("linear", x.shape, W.shape, detail="need x (N, in) and W (out, in)")
    if b.shape != (W.shape[0],):
        raise ShapeError("linear", W.shape, b.shape, detail="bias length must equal rows of W")
    xd, Wd = x.data, W.data

    def back(g):
        return g @ Wd, g.T @ xd, g.sum(axis=0)

    return record(xd @ Wd.T + b.data, (x, W, b), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError("add_bias", x.shape, b.shape)
    lead = tuple(range(x.data.ndim - 1))
    return record(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


# -- activations ---------------------------------------------------------------

def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return record(y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return expit(z)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return record(s, (x,), lambda g: (g * s * (1.0 - s),))


def eswish(x: Tensor, beta: Tensor) -> Tensor:
    """E-Swish ``beta * x * sigmoid(x)`` with a trainable scalar ``beta``."""
    if beta.size != 1:
        raise ShapeError("eswish", x.shape, beta.shape, detail="beta must be a scalar")
    xd = x.data
    s = _sigmoid(xd)
    bv = beta.data.reshape(())
    xs = xd * s

    def back(g):
        # d/dx = beta * (s + x s (1 - s)), built in place to limit temporaries
        dx = xs * (1.0 - s)
        dx += s
        dx *= g
        dx *= bv
        db = np.array(np.vdot(g, xs)).reshape(beta.shape)
        return dx, db

    return record(bv * xs, (x, beta), back)


def snake(x: Tensor, log_a: Tensor) -> Tensor:
    """Snake ``x + sin(a x) / a`` with ``a = exp(log_a)`` so that ``a > 0``."""
    if log_a.size != 1:
        raise ShapeError("snake", x.shape, log_a.shape, detail="log_a must be a scalar")
    a = float(np.exp(log_a.data.reshape(())))
    xd = x.data
    ax = a * xd
    sn, cs = np.sin(ax), np.cos(ax)

    def back(g):
        dx = g * (1.0 + cs)
        # d/da [sin(a x)/a] = x cos(a x)/a - sin(a x)/a^2 ; chain through a = exp(log_a)
        dda = xd * cs / a - sn / (a * a)
        dlog = np.array(np.sum(g * dda) * a).reshape(log_a.shape)
        return dx, dlog

    return record(xd + sn / a, (x, log_a), back)


# -- recurrent -----------------------------------------------------------------

def lstm_sequence(x: Tensor, h0: Tensor, c0: Tensor, W: Tensor, U: Tensor, b: Tensor,
                  reverse: bool = False) -> Tensor:
    """Run an LSTM over a whole sequence as one tape node.

    Gate layout along the 4H axis is (input, forget, candidate, output).
    ``x`` is (B, T, in), ``h0``/``c0`` are (B, H); the result is the hidden
    state at every step, (B, T, H), aligned with the input time index even when
    ``reverse`` is set.  The backward pass is full (untruncated) BPTT.
    """
    if x.data.ndim != 3:
        raise ShapeError("lstm_sequence", x.shape, detail="x must be (batch, time, features)")
    B, T, n_in = x.shape
    H = U.shape[1]
    if T < 1:
        raise ShapeError("lstm_sequence", x.shape, detail="empty sequence")
    if W.shape != (4 * H, n_in):
        raise ShapeError("lstm_sequence", x.shape, W.shape, detail="input kernel must be (4H, in)")
    if U.shape != (4 * H, H) or b.shape != (4 * H,):
        raise ShapeError("lstm_sequence", U.shape, b.shape, detail="recurrent kernel (4H, H), bias (4H,)")
    if h0.shape != (B, H) or c0.shape != (B, H):
        raise ShapeError("lstm_sequence", h0.shape, c0.shape, detail=f"states must be ({B}, {H})")

    xd, Wd, Ud = x.data, W.data, U.data
    xw = (xd.reshape(B * T, n_in) @ Wd.T + b.data).reshape(B, T, 4 * H)
    steps = range(T - 1, -1, -1) if reverse else range(T)
    gates = np.empty((T, B, 4 * H))
    cells = np.empty((T, B, H))
    tanh_c = np.empty((T, B, H))
    hs = np.empty((B, T, H))
    h_prev_at = np.empty((T, B, H))
    c_prev_at = np.empty((T, B, H))
    h, c = h0.data, c0.data
    UdT = Ud.T
    for t in steps:
        z = xw[:, t] + h @ UdT
        ifo = _sigmoid(np.concatenate((z[:, :2 * H], z[:, 3 * H:]), axis=1))
        gi, gf, go = ifo[:, :H], ifo[:, H:2 * H], ifo[:, 2 * H:]
        gg = np.tanh(z[:, 2 * H:3 * H])
        h_prev_at[t], c_prev_at[t] = h, c
        c = gf * c + gi * gg
        tc = np.tanh(c)
        h = go * tc
        gates[t, :, :H], gates[t, :, H:2 * H] = gi, gf
        gates[t, :, 2 * H:3 * H], gates[t, :, 3 * H:] = gg, go
        cells[t], tanh_c[t] = c, tc
        hs[:, t] = h

    def back(gh):
        dxw = np.empty((B, T, 4 * H))
        dU = np.zeros_like(Ud)
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        dz = np.empty((B, 4 * H))
        for t in (range(T) if reverse else range(T - 1, -1, -1)):
            gi, gf = gates[t, :, :H], gates[t, :, H:2 * H]
            gg, go = gates[t, :, 2 * H:3 * H], gates[t, :, 3 * H:]
            tc = tanh_c[t]
            dh = gh[:, t] + dh_next
            dc = dh * go * (1.0 - tc * tc) + dc_next
            dz[:, :H] = dc * gg * gi * (1.0 - gi)
            dz[:, H:2 * H] = dc * c_prev_at[t] * gf * (1.0 - gf)
            dz[:, 2 * H:3 * H] = dc * gi * (1.0 - gg * gg)
            dz[:, 3 * H:] = dh * tc * go * (1.0 - go)
            dc_next = dc * gf
            dU += dz.T @ h_prev_at[t]
            dh_next = dz @ Ud
            dxw[:, t] = dz
        flat = dxw.reshape(B * T, 4 * H)
        dW = flat.T @ xd.reshape(B * T, n_in)
        db = flat.sum(axis=0)
        dx = (flat @ Wd).reshape(B, T, n_in)
        return dx, dh_next, dc_next, dW, dU, db

    return record(hs, (x, h0, c0, W, U, b), back)


# -- convolution -----------------------------------------------------------------

def conv1d(x: Tensor, W: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """Valid 1-D cross-correlation. ``x`` (B, C, L), ``W`` (O, C, k), ``b`` (O,)."""
    if x.data.ndim != 3 or W.data.ndim != 3 or x.shape[1] != W.shape[1]:
        raise ShapeError("conv1d", x.shape, W.shape, detail="need x (B, C, L) and W (O, C, k)")
    B, C, L = x.shape
    O, _, k = W.shape
    if L < k:
        raise ShapeError("conv1d", x.shape, W.shape, detail=f"input length {L} shorter than kernel {k}")
    if b.shape != (O,):
        raise ShapeError("conv1d", W.shape, b.shape)
    L_out = (L - k) // stride + 1
    cols = sliding_window_view(x.data, k, axis=2)[:, :, ::stride, :]  # (B, C, L_out, k)
    cols2 = np.ascontiguousarray(cols.transpose(0, 2, 1, 3)).reshape(B * L_out, C * k)
    W2 = W.data.reshape(O, C * k)
    y = (cols2 @ W2.T + b.data).reshape(B, L_out, O).transpose(0, 2, 1)

    def back(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(B * L_out, O)
        dW = (g2.T @ cols2).reshape(O, C, k)
        db = g2.sum(axis=0)
        dcols = (g2 @ W2).reshape(B, L_out, C, k)
        dx = np.zeros((B, C, L))
        stop = stride * (L_out - 1) + 1
        for j in range(k):
            dx[:, :, j:j + stop:stride] += dcols[:, :, :, j].transpose(0, 2, 1)
        return dx, dW, db

    return record(np.ascontiguousarray(y), (x, W, b), back)


def maxpool1d(x: Tensor, size: int = 2, stride: int = 2) -> Tensor:
    if x.data.ndim != 3:
        raise ShapeError("maxpool1d", x.shape, detail="need (B, C, L)")
    B, C, L = x.shape
    if L < size:
        raise ShapeError("maxpool1d", x.shape, detail=f"input length {L} shorter than window {size}")
    L_out = (L - size) // stride + 1
    win = sliding_window_view(x.data, size, axis=2)[:, :, ::stride, :]
    arg = win.argmax(axis=3)
    y = np.take_along_axis(win, arg[..., None], axis=3)[..., 0]

    def back(g):
        dx = np.zeros((B, C, L))
        stop = stride * (L_out - 1) + 1
        for j in range(size):
            dx[:, :, j:j + stop:stride] += g * (arg == j)
        return (dx,)

    return record(np.ascontiguousarray(y), (x,), back)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: scaled at train time, identity at inference."""
    if not training or rate <= 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep) / keep
    return mul_const(x, mask)
