"""Small reverse-mode array engine used by every layer in the package.

Each op is a ``forward`` function returning ``(out, cache)`` and a matching
``*_backward`` function that consumes exactly that cache. Arrays are plain
numpy arrays in NCHW layout; learnable arrays are wrapped in :class:`Param`
so they can carry a gradient buffer.
"""
from __future__ import annotations

import math

import numba
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A forward or backward pass produced NaN or Inf."""


class Param:
    """A learnable array with its gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray):
        self.data = data
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.data.shape

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Param(shape={self.data.shape}, dtype={self.data.dtype})"


def check_finite(a: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(a).all():
        raise NumericError(f"non-finite values in {what}")
    return a


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _out_size(h, k, s, p):
    return (h + 2 * p - k) // s + 1


def _windows(xp, k, stride):
    # (N, C, Ho, Wo, K, K) view, no copy
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    if stride > 1:
        win = win[:, :, ::stride, ::stride]
    return win


def _scatter_windows(dwin, x_shape, k, stride, p, dtype):
    """Adjoint of ``_windows``: add window gradients back onto the padded input."""
    n, c, h, w = x_shape
    ho, wo = dwin.shape[2], dwin.shape[3]
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dwin[:, :, :, :, i, j]
    if p:
        dxp = dxp[:, :, p:p + h, p:p + w]
    return dxp


# --------------------------------------------------------------------------
# convolutions

def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0):
    """Dense 2-D convolution (cross-correlation), ``w`` is (O, I, K, K)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and OIKK weight")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, weight expects {w.shape[1]}")
    if w.shape[2] != w.shape[3]:
        raise ShapeError("only square kernels are supported")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    k = w.shape[2]
    n, c, h, wd = x.shape
    ho, wo = _out_size(h, k, stride, padding), _out_size(wd, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError("kernel larger than padded input")
    if k == 1 and padding == 0:
        xs = x[:, :, ::stride, ::stride]
        out = (w[:, :, 0, 0] @ xs.reshape(n, c, -1)).reshape(n, -1, ho, wo)
        cache = ("1x1", x, w, stride, padding)
    else:
        win = _windows(_pad(x, padding), k, stride)
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)
        out = (cols @ w.reshape(w.shape[0], -1).T).reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)
        out = np.ascontiguousarray(out)
        cache = ("col", x, w, stride, padding, cols)
    return check_finite(out, "conv2d output"), cache


def conv2d_backward(dout: np.ndarray, cache, need_dx: bool = True):
    """Gradients ``(dx, dw)``; ``dx`` is None when ``need_dx`` is false."""
    kind, x, w, stride, padding = cache[:5]
    o, c, k, _ = w.shape
    if kind == "1x1":
        n, _, ho, wo = dout.shape
        xs = np.ascontiguousarray(x[:, :, ::stride, ::stride]).reshape(n, c, ho * wo)
        d = dout.reshape(n, o, ho * wo)
        dw = (d @ xs.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        dxs = (w[:, :, 0, 0].T @ d).reshape(n, c, ho, wo)
        if stride == 1:
            dx = dxs
        else:
            dx = np.zeros_like(x)
            dx[:, :, ::stride, ::stride] = dxs
        return dx, dw
    cols = cache[5]
    n, _, ho, wo = dout.shape
    d2 = dout.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
    dw = (d2.T @ cols).reshape(w.shape)
    if not need_dx:
        return None, dw
    dcols = (d2 @ w.reshape(o, -1)).reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    dx = _scatter_windows(dcols, x.shape, k, stride, padding, x.dtype)
    return dx, dw


@numba.njit(cache=True)
def _dw_forward_kernel(xp, w, stride, ho, wo):
    # xp is (C, Hp, Wp, N): batch innermost so the inner loop vectorizes
    c, _, _, n = xp.shape
    k = w.shape[1]
    out = np.zeros((c, ho, wo, n), dtype=xp.dtype)
    for ch in range(c):
        for y in range(ho):
            for x in range(wo):
                for i in range(k):
                    for j in range(k):
                        wv = w[ch, i, j]
                        yi = y * stride + i
                        xj = x * stride + j
                        for b in range(n):
                            out[ch, y, x, b] += wv * xp[ch, yi, xj, b]
    return out


@numba.njit(cache=True)
def _dw_backward_kernel(g, xp, w, stride):
    c, ho, wo, n = g.shape
    k = w.shape[1]
    dxp = np.zeros_like(xp)
    dwb = np.zeros((c, k, k, n), dtype=xp.dtype)
    for ch in range(c):
        for y in range(ho):
            for x in range(wo):
                for i in range(k):
                    for j in range(k):
                        wv = w[ch, i, j]
                        yi = y * stride + i
                        xj = x * stride + j
                        for b in range(n):
                            gv = g[ch, y, x, b]
                            dxp[ch, yi, xj, b] += wv * gv
                            dwb[ch, i, j, b] += gv * xp[ch, yi, xj, b]
    return dxp, dwb.sum(axis=3)


def _to_chwn_padded(x, p):
    n, c, h, w = x.shape
    xp = np.zeros((c, h + 2 * p, w + 2 * p, n), dtype=x.dtype)
    xp[:, p:p + h, p:p + w, :] = x.transpose(1, 2, 3, 0)
    return xp


def depthwise_conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0):
    """Per-channel convolution, ``w`` is (C, 1, K, K)."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != 1:
        raise ShapeError("depthwise_conv2d expects NCHW input and C1KK weight")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"input has {x.shape[1]} channels, weight has {w.shape[0]} filters")
    if w.shape[2] != w.shape[3]:
        raise ShapeError("only square kernels are supported")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    if x.dtype != w.dtype:
        raise TypeError(f"dtype mismatch: input {x.dtype}, weight {w.dtype}")
    k = w.shape[2]
    n, c, h, wd = x.shape
    ho, wo = _out_size(h, k, stride, padding), _out_size(wd, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError("kernel larger than padded input")
    xp = _to_chwn_padded(x, padding)
    w3 = np.ascontiguousarray(w[:, 0])
    out = _dw_forward_kernel(xp, w3, stride, ho, wo).transpose(3, 0, 1, 2)
    out = np.ascontiguousarray(out)
    return check_finite(out, "depthwise_conv2d output"), (x.shape, xp, w3, stride, padding)


def depthwise_conv2d_backward(dout: np.ndarray, cache):
    x_shape, xp, w3, stride, padding = cache
    g = np.ascontiguousarray(dout.transpose(1, 2, 3, 0), dtype=xp.dtype)
    dxp, dw = _dw_backward_kernel(g, xp, w3, stride)
    _, _, h, wd = x_shape
    dx = dxp[:, padding:padding + h, padding:padding + wd, :].transpose(3, 0, 1, 2)
    return np.ascontiguousarray(dx), dw[:, None]


# --------------------------------------------------------------------------
# batch norm

def _csum(a):
    # per-channel sum over N, H, W; einsum is much faster than .sum(axis=(0, 2, 3))
    return np.einsum("nchw->c", a)


def _cdot(a, b):
    return np.einsum("nchw,nchw->c", a, b)


def batchnorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, mode: str,
              running_mean: np.ndarray | None = None, running_var: np.ndarray | None = None,
              eps: float = BN_EPS):
    """Per-channel batch normalization over (N, H, W).

    In ``train`` mode the batch statistics are used and returned in the cache
    as ``(mean, var)`` (biased variance) so the caller can update its running
    estimates. ``eval`` mode uses the supplied running statistics.
    """
    if x.ndim != 4:
        raise ShapeError("batchnorm expects NCHW input")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm state has {gamma.shape[0]} channels, input has {c}")
    count = x.shape[0] * x.shape[2] * x.shape[3]
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("train-mode batchnorm needs a batch of at least 2")
        mean = _csum(x) / count
        centered = x - mean[None, :, None, None]
        var = _cdot(centered, centered) / count
    elif mode == "eval":
        if running_mean is None or running_var is None:
            raise ValueError("eval-mode batchnorm needs running statistics")
        mean, var = running_mean, running_var
        centered = x - mean[None, :, None, None]
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = centered * inv_std[None, :, None, None]
    out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return check_finite(out, "batchnorm output"), (mode, xhat, inv_std, gamma, mean, var)


def batchnorm_backward(dout: np.ndarray, cache):
    mode, xhat, inv_std, gamma, _, _ = cache
    dgamma = _cdot(dout, xhat)
    dbeta = _csum(dout)
    if mode == "eval":
        dx = dout * (gamma * inv_std)[None, :, None, None]
    else:
        m = dout.shape[0] * dout.shape[2] * dout.shape[3]
        # dxhat = dout * gamma folded into per-channel scale factors
        scale = (gamma * inv_std)[None, :, None, None]
        dx = scale * (dout - (dbeta / m)[None, :, None, None] - xhat * (dgamma / m)[None, :, None, None])
    return dx, dgamma, dbeta


# --------------------------------------------------------------------------
# dense layers, activations, loss

def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """``x @ w + b`` with ``w`` shaped (in, out)."""
    if x.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: input {x.shape}, weight {w.shape}, bias {b.shape}")
    return check_finite(x @ w + b, "linear output"), (x, w)


def linear_backward(dout, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def relu(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def global_avg_pool(x: np.ndarray):
    if x.ndim != 4:
        raise ShapeError("global_avg_pool expects NCHW input")
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_backward(dout, shape):
    n, c, h, w = shape
    return np.broadcast_to(dout[:, :, None, None] / (h * w), shape).astype(dout.dtype)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} disagree")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"label index out of range for {k} classes")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    n = logits.shape[0]
    loss = float(-logp[np.arange(n), labels].mean())
    if not math.isfinite(loss):
        raise NumericError("non-finite loss")
    return loss, (np.exp(logp), labels)


def softmax_cross_entropy_backward(cache, scale: float = 1.0):
    probs, labels = cache
    n = probs.shape[0]
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    return d * (scale / n)


# --------------------------------------------------------------------------
# optimisation

def sgd_step(params, state: dict, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
    """Momentum SGD on every param that received a gradient this step.

    ``state`` maps ``id(param)`` to its velocity buffer and is updated in place.
    Params whose ``grad`` is None are skipped entirely, so their velocity and
    weight decay are left alone.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must be in [0, 1)")
    for p in params:
        if p.grad is None:
            continue
        if p.grad.shape != p.data.shape:
            raise ShapeError(f"grad {p.grad.shape} vs param {p.data.shape}")
        g = p.grad + weight_decay * p.data if weight_decay else p.grad
        v = state.get(id(p))
        v = g.copy() if v is None else momentum * v + g
        state[id(p)] = v
        p.data -= (lr * v).astype(p.data.dtype, copy=False)


def cosine_lr(step: int, total: int, lr0: float) -> float:
    if lr0 <= 0:
        raise ValueError("lr0 must be positive")
    if step < 0 or step > total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if total == 0:
        return lr0
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * step / total))
