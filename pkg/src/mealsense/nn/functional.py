"""Differentiable operators used by the two networks.

Shapes follow the channels-first convention for sequences: ``[B, C, L]``.
Each operator computes its forward pass with numpy and supplies a closed-form
backward; all of them are covered by finite-difference checks in the tests.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from ..errors import ClassOutOfRange, DegenerateBatch, ShapeMismatch
from .tensor import Tensor, unbroadcast

MASK_VALUE = -1e9


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# --- convolutions -----------------------------------------------------------


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[B, C_in, L]`` with ``weight[C_out, C_in, K]``."""
    if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"conv1d input {x.shape} vs weight {weight.shape}")
    B, C, L = x.shape
    O, _, K = weight.shape
    if K > L + 2 * padding:
        raise ShapeMismatch(f"kernel {K} longer than padded input {L + 2 * padding}")
    Lo = (L + 2 * padding - K) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    # [B, C, Lo, K] -> [B, Lo, C, K] -> [B*Lo, C*K]
    win = sliding_window_view(xp, K, axis=2)[:, :, ::stride, :][:, :, :Lo, :]
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(B * Lo, C * K)
    w2 = weight.data.reshape(O, C * K)
    out = (cols @ w2.T).reshape(B, Lo, O).transpose(0, 2, 1)
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = np.ascontiguousarray(out)

    def back(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(B * Lo, O)
        gw = (g2.T @ cols).reshape(weight.shape)
        dcols = (g2 @ w2).reshape(B, Lo, C, K)
        gxp = np.zeros((B, C, L + 2 * padding), dtype=g.dtype)
        span = stride * (Lo - 1) + 1
        for k in range(K):
            gxp[:, :, k : k + span : stride] += dcols[:, :, :, k].transpose(0, 2, 1)
        gx = gxp[:, :, padding : padding + L] if padding else gxp
        gb = g.sum(axis=(0, 2)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, back, "conv1d")


def conv1d_transposed(y: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Adjoint of :func:`conv1d` (zero padding) sharing its weight layout.

    ``weight[C_y, C_out, K]`` maps ``y[B, C_y, L]`` to ``[B, C_out, (L-1)*stride + K]``.
    """
    if y.ndim != 3 or weight.ndim != 3 or y.shape[1] != weight.shape[0]:
        raise ShapeMismatch(f"conv1d_transposed input {y.shape} vs weight {weight.shape}")
    B, Cy, L = y.shape
    _, Co, K = weight.shape
    Lo = (L - 1) * stride + K
    span = stride * (L - 1) + 1

    y2 = np.ascontiguousarray(y.data.transpose(0, 2, 1)).reshape(B * L, Cy)
    w2 = weight.data.reshape(Cy, Co * K)
    z = (y2 @ w2).reshape(B, L, Co, K)
    out = np.zeros((B, Co, Lo), dtype=z.dtype)
    for k in range(K):
        out[:, :, k : k + span : stride] += z[:, :, :, k].transpose(0, 2, 1)
    if bias is not None:
        out += bias.data[None, :, None]

    def back(g):
        gz = np.empty((B, L, Co, K), dtype=g.dtype)
        for k in range(K):
            gz[:, :, :, k] = g[:, :, k : k + span : stride].transpose(0, 2, 1)
        gz2 = gz.reshape(B * L, Co * K)
        gy = (gz2 @ w2.T).reshape(B, L, Cy).transpose(0, 2, 1)
        gw = (y2.T @ gz2).reshape(weight.shape)
        gb = g.sum(axis=(0, 2)) if bias is not None else None
        return np.ascontiguousarray(gy), gw, gb

    parents = (y, weight) if bias is None else (y, weight, bias)
    return Tensor._make(out, parents, back, "conv1d_transposed")


# --- normalization -----------------------------------------------------------


def batch_norm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel normalization of ``x[B, C, L]``.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance, like most
    frameworks). In eval mode the running statistics are used.
    """
    if x.ndim != 3 or gamma.shape != (x.shape[1],):
        raise ShapeMismatch(f"batch_norm1d input {x.shape} vs gamma {gamma.shape}")
    B, C, L = x.shape
    n = B * L
    if training:
        if n <= 1:
            raise DegenerateBatch(f"batch statistics need B*L > 1, got {n}")
        mean = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (n / (n - 1))
    else:
        mean = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None]) * inv_std[None, :, None]
    out = xhat * gamma.data[None, :, None] + beta.data[None, :, None]

    def back(g):
        gbeta = g.sum(axis=(0, 2))
        ggamma = (g * xhat).sum(axis=(0, 2))
        dxhat = g * gamma.data[None, :, None]
        if training:
            gx = (inv_std[None, :, None] / n) * (
                n * dxhat
                - dxhat.sum(axis=(0, 2), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
            )
        else:
            gx = dxhat * inv_std[None, :, None]
        return gx, ggamma, gbeta

    return Tensor._make(out, (x, gamma, beta), back, "batch_norm1d")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis."""
    D = x.shape[-1]
    if gamma.shape != (D,):
        raise ShapeMismatch(f"layer_norm input {x.shape} vs gamma {gamma.shape}")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = xhat * gamma.data + beta.data

    def back(g):
        lead = tuple(range(g.ndim - 1))
        gbeta = g.sum(axis=lead)
        ggamma = (g * xhat).sum(axis=lead)
        dxhat = g * gamma.data
        gx = (inv_std / D) * (
            D * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta

    return Tensor._make(out, (x, gamma, beta), back, "layer_norm")


# --- pointwise ---------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return Tensor._make(x.data * pos, (x,), lambda g: (g * pos,), "relu")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    out = (x.data * cdf).astype(x.dtype)

    def back(g):
        pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
        return ((g * (cdf + x.data * pdf)).astype(x.dtype),)

    return Tensor._make(out, (x,), back, "gelu")


def max_pool1d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling over the last axis (kernel == stride)."""
    if kernel != stride:
        raise ShapeMismatch("only kernel == stride pooling is supported")
    B, C, L = x.shape
    Lo = L // kernel
    if Lo == 0:
        raise ShapeMismatch(f"cannot pool length {L} with kernel {kernel}")
    blocks = x.data[:, :, : Lo * kernel].reshape(B, C, Lo, kernel)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros((B, C, Lo, kernel), dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, : Lo * kernel] = gb.reshape(B, C, Lo * kernel)
        return (gx,)

    return Tensor._make(out, (x,), back, "max_pool1d")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x[..., in] @ weight[out, in].T + bias[out]``."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeMismatch(f"linear input {x.shape} vs weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, weight.shape[1])
    out = x2 @ weight.data.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (weight.shape[0],))

    def back(g):
        g2 = g.reshape(-1, weight.shape[0])
        gx = (g2 @ weight.data).reshape(x.shape)
        gw = g2.T @ x2
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, back, "linear")


def _softmax(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    y = _softmax(x.data)
    return Tensor._make(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),), "softmax")


# --- attention ---------------------------------------------------------------


def attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: np.ndarray | Tensor | None = None,
    bias: Tensor | None = None,
) -> Tensor:
    """Scaled dot-product attention over the last two axes of ``[..., T, d]``.

    ``mask`` is a constant additive term (use :data:`MASK_VALUE` to block a
    pair); ``bias`` is a learnable additive term. Both broadcast against the
    ``[..., T, T]`` score array.
    """
    if q.shape != k.shape or k.shape[:-1] != v.shape[:-1]:
        raise ShapeMismatch(f"attention q{q.shape} k{k.shape} v{v.shape}")
    d = q.shape[-1]
    scale = 1.0 / math.sqrt(d)
    kt = np.swapaxes(k.data, -1, -2)
    s = (q.data @ kt) * scale
    if bias is not None:
        s = s + bias.data
    if mask is not None:
        s = s + (mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=s.dtype))
    p = _softmax(s)
    out = p @ v.data

    def back(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(v.data, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
        gq = (gs @ k.data) * scale
        gk = (np.swapaxes(gs, -1, -2) @ q.data) * scale
        gb = unbroadcast(gs, bias.shape) if bias is not None else None
        return gq, gk, gv, gb

    parents = (q, k, v) if bias is None else (q, k, v, bias)
    return Tensor._make(out, parents, back, "attention")


def attention_weights(q: np.ndarray, k: np.ndarray, mask=None, bias=None) -> np.ndarray:
    """Post-softmax attention matrix, for inspection."""
    s = (q @ np.swapaxes(k, -1, -2)) / math.sqrt(q.shape[-1])
    if bias is not None:
        s = s + bias
    if mask is not None:
        s = s + mask
    return _softmax(s)


# --- losses --------------------------------------------------------------------


def mse_loss(x: Tensor, target, mask: np.ndarray | None = None) -> Tensor:
    """Mean squared error; with ``mask`` the mean runs over selected entries only.

    ``mask`` is boolean and broadcasts against ``x`` (a ``[B, 1, L]`` timestep
    mask selects every channel at the chosen timesteps).
    """
    t = _as_tensor(target, x)
    if x.shape != t.shape:
        raise ShapeMismatch(f"mse_loss shapes {x.shape} vs {t.shape}")
    diff = x.data - t.data
    if mask is None:
        w = None
        n = diff.size
        val = np.asarray((diff * diff).sum() / n, dtype=x.dtype)
    else:
        w = np.broadcast_to(np.asarray(mask, dtype=bool), diff.shape).astype(x.dtype)
        n = float(w.sum())
        if n == 0:
            raise ShapeMismatch("mse_loss mask selects no entries")
        val = np.asarray((diff * diff * w).sum() / n, dtype=x.dtype)

    def back(g):
        gx = (2.0 / n) * diff * g
        if w is not None:
            gx = gx * w
        gx = gx.astype(x.dtype)
        return gx, -gx

    return Tensor._make(val, (x, t), back, "mse_loss")


def cross_entropy(logits: Tensor, y) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[y]``."""
    y = np.asarray(y, dtype=np.int64)
    if logits.ndim != 2 or y.shape != (logits.shape[0],):
        raise ShapeMismatch(f"cross_entropy logits {logits.shape} vs labels {y.shape}")
    B, C = logits.shape
    if C < 2:
        raise ShapeMismatch("cross_entropy needs at least two classes")
    if y.size and (y.min() < 0 or y.max() >= C):
        raise ClassOutOfRange(f"labels must lie in [0, {C})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(B)
    val = np.asarray((lse - z[rows, y]).mean(), dtype=logits.dtype)

    def back(g):
        p = np.exp(z - lse[:, None])
        p[rows, y] -= 1.0
        return ((p * (g / B)).astype(logits.dtype),)

    return Tensor._make(val, (logits,), back, "cross_entropy")
