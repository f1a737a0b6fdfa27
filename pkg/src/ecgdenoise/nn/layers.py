"""Layer primitives: strided conv1d and its transpose, batch norm, (bi)LSTM.

Tensors are channels-last, ``[batch, length, channels]``. Convolutions use
"same" padding: ``(K - 1) // 2`` zeros on the left, the rest on the right, so
a stride-``s`` conv maps length ``L`` to ``ceil(L / s)`` and the transpose
maps ``L`` to ``L * s``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ValidationError
from .tensor import Tensor, _make, as_tensor, sigmoid_np


# --------------------------------------------------------------------------
# convolution kernels on raw arrays


def _windows(x: np.ndarray, k: int, stride: int, pad_left: int, n_out: int) -> np.ndarray:
    """Zero-padded strided windows, shape ``[B, n_out, C, K]``."""
    total = (n_out - 1) * stride + k
    pad_right = max(0, total - x.shape[1] - pad_left)
    xp = np.pad(x, ((0, 0), (pad_left, pad_right), (0, 0)))
    return sliding_window_view(xp, k, axis=1)[:, : (n_out - 1) * stride + 1 : stride]


def conv_forward(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    k = w.shape[0]
    n_out = -(-x.shape[1] // stride)
    win = _windows(x, k, stride, (k - 1) // 2, n_out)
    return np.tensordot(win, w, axes=([2, 3], [1, 0]))


def conv_input_grad(dy: np.ndarray, w: np.ndarray, stride: int, length: int) -> np.ndarray:
    """Adjoint of :func:`conv_forward` w.r.t. its input, for an input of ``length``."""
    k = w.shape[0]
    pad_left = (k - 1) // 2
    n_out = dy.shape[1]
    span = (n_out - 1) * stride + 1
    padded = max(length + k - 1, span + k - 1)
    z = np.tensordot(dy, w, axes=([2], [2]))  # [B, n_out, K, Cin]
    dxp = np.zeros((dy.shape[0], padded, w.shape[1]), dtype=np.result_type(dy, w))
    for j in range(k):
        dxp[:, j:j + span:stride] += z[:, :, j]
    return dxp[:, pad_left:pad_left + length]


def conv_weight_grad(x: np.ndarray, dy: np.ndarray, k: int, stride: int) -> np.ndarray:
    win = _windows(x, k, stride, (k - 1) // 2, dy.shape[1])
    return np.tensordot(win, dy, axes=([0, 1], [0, 1])).transpose(1, 0, 2)


def _check_conv(x: np.ndarray, w: np.ndarray, b: np.ndarray, cin_axis: int, cout_axis: int,
                stride: int, op: str) -> None:
    if stride < 1:
        raise ValidationError(f"{op}: stride must be >= 1")
    if x.ndim != 3 or w.ndim != 3:
        raise ValidationError(f"{op}: expected 3-d input and weight, got {x.shape} and {w.shape}")
    if x.shape[2] != w.shape[cin_axis]:
        raise ValidationError(f"{op}: input {x.shape} does not match weight {w.shape}")
    if b.shape != (w.shape[cout_axis],):
        raise ValidationError(f"{op}: bias {b.shape} does not match weight {w.shape}")


def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """``y[n,t,o] = b[o] + sum_{k,c} x[n, t*stride + k - K//2, c] w[k,c,o]``."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    _check_conv(x.data, w.data, b.data, 1, 2, stride, "conv1d")
    if w.shape[0] % 2 == 0:
        raise ValidationError(f"conv1d: kernel size must be odd, got {w.shape[0]}")
    xd, wd = x.data, w.data
    y = conv_forward(xd, wd, stride) + b.data

    def bwd(g):
        return (conv_input_grad(g, wd, stride, xd.shape[1]),
                conv_weight_grad(xd, g, wd.shape[0], stride),
                g.sum(axis=(0, 1)))

    return _make(y, (x, w, b), bwd, "conv1d")


def conv1d_transpose(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """Adjoint of :func:`conv1d` (weight ``[K, Cout, Cin]``); output length ``L * stride``."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    _check_conv(x.data, w.data, b.data, 2, 1, stride, "conv1d_transpose")
    if w.shape[0] % 2 == 0:
        raise ValidationError(f"conv1d_transpose: kernel size must be odd, got {w.shape[0]}")
    xd, wd = x.data, w.data
    length = xd.shape[1] * stride
    y = conv_input_grad(xd, wd, stride, length) + b.data

    def bwd(g):
        return (conv_forward(g, wd, stride),
                conv_weight_grad(g, xd, wd.shape[0], stride),
                g.sum(axis=(0, 1)))

    return _make(y, (x, w, b), bwd, "conv1d_transpose")


# --------------------------------------------------------------------------
# batch norm


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5
    num_batches: int = 0

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.9, eps: float = 1e-5,
              dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum, eps, 0)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               training: bool) -> Tensor:
    """Per-channel normalization over batch and time.

    Training mode uses batch statistics (biased variance) and folds them into
    the running averages as ``running = m * running + (1 - m) * batch``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,) or state.running_mean.shape != (c,):
        raise ValidationError(f"batch_norm: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
    xd, gd = x.data, gamma.data
    axes = tuple(range(xd.ndim - 1))
    if training:
        mu = xd.mean(axis=axes)
        var = ((xd - mu) ** 2).mean(axis=axes)
        m = state.momentum
        state.running_mean = (m * state.running_mean + (1 - m) * mu).astype(state.running_mean.dtype)
        state.running_var = (m * state.running_var + (1 - m) * var).astype(state.running_var.dtype)
        state.num_batches += 1
    else:
        if state.num_batches == 0:
            raise ValidationError("batch_norm: inference before any running-statistics update")
        mu, var = state.running_mean.astype(xd.dtype), state.running_var.astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + state.eps)).astype(xd.dtype)
    xhat = (xd - mu) * inv
    y = gd * xhat + beta.data
    n = xd.size // c

    def bwd(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gd
        if training:
            dx = inv / n * (n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        else:
            dx = dxhat * inv
        return dx, dgamma, dbeta

    return _make(y, (x, gamma, beta), bwd, "batch_norm")


# --------------------------------------------------------------------------
# LSTM


@dataclass
class _LstmCache:
    xs: np.ndarray      # [D, L, B, C] time-major inputs per direction
    gates: np.ndarray   # [D, L, B, 4H] post-activation i, f, g, o
    c: np.ndarray       # [D, L+1, B, H], c[:, 0] = 0
    tanh_c: np.ndarray  # [D, L, B, H]
    h: np.ndarray       # [D, L+1, B, H], h[:, 0] = 0


def _lstm_core(xs: np.ndarray, w: np.ndarray, u: np.ndarray, b: np.ndarray):
    """Run ``D`` independent LSTMs in lockstep over time-major ``xs`` [D, L, B, C].

    Gate order: i, f, g, o.
    """
    d, length, bsz, n_in = xs.shape
    hid = u.shape[1]
    dtype = np.result_type(xs, w, u, b)
    xw = np.matmul(xs.reshape(d, length * bsz, n_in), w).reshape(d, length, bsz, 4 * hid)
    xw += b[:, None, None, :]
    gates = np.empty((d, length, bsz, 4 * hid), dtype=dtype)
    c = np.zeros((d, length + 1, bsz, hid), dtype=dtype)
    h = np.zeros((d, length + 1, bsz, hid), dtype=dtype)
    tanh_c = np.empty((d, length, bsz, hid), dtype=dtype)
    for t in range(length):
        z = xw[:, t] + np.matmul(h[:, t], u)
        g = gates[:, t]
        g[:] = sigmoid_np(z)
        g[..., 2 * hid:3 * hid] = np.tanh(z[..., 2 * hid:3 * hid])
        c[:, t + 1] = g[..., hid:2 * hid] * c[:, t] + g[..., :hid] * g[..., 2 * hid:3 * hid]
        np.tanh(c[:, t + 1], out=tanh_c[:, t])
        h[:, t + 1] = g[..., 3 * hid:] * tanh_c[:, t]
    return _LstmCache(xs, gates, c, tanh_c, h)


def _lstm_core_backward(cache: _LstmCache, dh_seq: np.ndarray, w: np.ndarray, u: np.ndarray):
    """``dh_seq`` is ``[D, L, B, H]`` in each direction's own time order.

    Returns the input gradient time-major, ``[D, L, B, C]``.
    """
    d, length, bsz, four_h = cache.gates.shape
    hid = four_h // 4
    dz = np.empty_like(cache.gates)
    dh_next = np.zeros((d, bsz, hid), dtype=dz.dtype)
    dc_next = np.zeros_like(dh_next)
    ut = np.swapaxes(u, 1, 2)
    for t in range(length - 1, -1, -1):
        g = cache.gates[:, t]
        it, ft, gt, ot = g[..., :hid], g[..., hid:2 * hid], g[..., 2 * hid:3 * hid], g[..., 3 * hid:]
        tc = cache.tanh_c[:, t]
        dh = dh_seq[:, t] + dh_next
        dc = dh * ot * (1 - tc * tc) + dc_next
        dzt = dz[:, t]
        dzt[..., :hid] = dc * gt * it * (1 - it)
        dzt[..., hid:2 * hid] = dc * cache.c[:, t] * ft * (1 - ft)
        dzt[..., 2 * hid:3 * hid] = dc * it * (1 - gt * gt)
        dzt[..., 3 * hid:] = dh * tc * ot * (1 - ot)
        dc_next = dc * ft
        dh_next = np.matmul(dzt, ut)
    n_in = cache.xs.shape[-1]
    dz2 = dz.reshape(d, length * bsz, four_h)
    hprev = cache.h[:, :-1].reshape(d, length * bsz, hid)
    du = np.matmul(np.swapaxes(hprev, 1, 2), dz2)
    dw = np.matmul(np.swapaxes(cache.xs.reshape(d, length * bsz, n_in), 1, 2), dz2)
    db = dz2.sum(axis=1)
    dxs = np.matmul(dz2, np.swapaxes(w, 1, 2)).reshape(d, length, bsz, n_in)
    return dxs, dw, du, db


def _check_lstm(x, w, u, b, op):
    if x.ndim != 3:
        raise ValidationError(f"{op}: input must be [B, L, C], got {x.shape}")
    hid = u.shape[0]
    if u.shape != (hid, 4 * hid) or w.shape != (x.shape[2], 4 * hid) or b.shape != (4 * hid,):
        raise ValidationError(
            f"{op}: input {x.shape} incompatible with W {w.shape}, U {u.shape}, b {b.shape}")


def lstm(x: Tensor, w: Tensor, u: Tensor, b: Tensor, reverse: bool = False) -> Tensor:
    """Single-direction LSTM from zero state; ``reverse`` runs over flipped time
    and flips the output back."""
    x, w, u, b = (as_tensor(t) for t in (x, w, u, b))
    _check_lstm(x.data, w.data, u.data, b.data, "lstm")
    xs = np.ascontiguousarray(np.swapaxes(x.data[:, ::-1] if reverse else x.data, 0, 1))
    cache = _lstm_core(xs[None], w.data[None], u.data[None], b.data[None])
    h = np.transpose(cache.h[0, 1:], (1, 0, 2))
    if reverse:
        h = h[:, ::-1]

    def bwd(g):
        gs = g[:, ::-1] if reverse else g
        dxs, dw, du, db = _lstm_core_backward(cache, np.transpose(gs, (1, 0, 2))[None],
                                              w.data[None], u.data[None])
        dx = np.swapaxes(dxs[0], 0, 1)
        dx = dx[:, ::-1] if reverse else dx
        return np.ascontiguousarray(dx), dw[0], du[0], db[0]

    return _make(np.ascontiguousarray(h), (x, w, u, b), bwd, "lstm")


def bilstm(x: Tensor, fwd: tuple[Tensor, Tensor, Tensor], bwd_params: tuple[Tensor, Tensor, Tensor]) -> Tensor:
    """Forward and backward LSTMs over ``x`` concatenated on channels -> ``[B, L, 2H]``.

    Both directions run in one time loop; the result equals
    ``concat(lstm(x, *fwd), lstm(x, *bwd, reverse=True))``.
    """
    x = as_tensor(x)
    fw = tuple(as_tensor(t) for t in fwd)
    bw = tuple(as_tensor(t) for t in bwd_params)
    _check_lstm(x.data, *(t.data for t in fw), "bilstm forward")
    _check_lstm(x.data, *(t.data for t in bw), "bilstm backward")
    if fw[1].shape != bw[1].shape:
        raise ValidationError(f"bilstm: hidden sizes differ ({fw[1].shape[0]} vs {bw[1].shape[0]})")
    w = np.stack([fw[0].data, bw[0].data])
    u = np.stack([fw[1].data, bw[1].data])
    b = np.stack([fw[2].data, bw[2].data])
    xt = np.swapaxes(x.data, 0, 1)
    xs = np.stack([xt, xt[::-1]])
    cache = _lstm_core(xs, w, u, b)
    hid = u.shape[1]
    hf = np.transpose(cache.h[0, 1:], (1, 0, 2))
    hb = np.transpose(cache.h[1, 1:], (1, 0, 2))[:, ::-1]
    out = np.concatenate([hf, hb], axis=-1)

    def backward_fn(g):
        gf = np.transpose(g[..., :hid], (1, 0, 2))
        gb = np.transpose(g[:, ::-1, hid:], (1, 0, 2))
        dxs, dw, du, db = _lstm_core_backward(cache, np.stack([gf, gb]), w, u)
        dx = np.swapaxes(dxs[0] + dxs[1][::-1], 0, 1)
        return (np.ascontiguousarray(dx), dw[0], du[0], db[0], dw[1], du[1], db[1])

    return _make(out, (x, *fw, *bw), backward_fn, "bilstm")
