"""Differentiable array operations: eager forwards with hand-written VJPs.

Shapes are written channels-last; every operation accepts extra leading
(batch) axes ahead of the documented ones.  Operations never mutate their
inputs and always allocate fresh outputs.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigurationError, DimensionError, InputError
from .tensor import Tensor, accumulate_grad, active_tape, unbroadcast

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def _record(out: Tensor, vjp) -> None:
    tape = active_tape()
    if tape is not None:
        tape.record(out, vjp)


def _as_const(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# elementwise / structural
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; ``b`` may be a Tensor, array, or scalar constant."""
    b_is_t = isinstance(b, Tensor)
    bd = b.data if b_is_t else _as_const(b)
    out = Tensor(a.data + bd)

    def vjp(g):
        accumulate_grad(a, unbroadcast(g, a.data.shape))
        if b_is_t:
            accumulate_grad(b, unbroadcast(g, bd.shape))

    _record(out, vjp)
    return out


def sub(a: Tensor, b) -> Tensor:
    b_is_t = isinstance(b, Tensor)
    bd = b.data if b_is_t else _as_const(b)
    out = Tensor(a.data - bd)

    def vjp(g):
        accumulate_grad(a, unbroadcast(g, a.data.shape))
        if b_is_t:
            accumulate_grad(b, unbroadcast(-g, bd.shape))

    _record(out, vjp)
    return out


def mul(a: Tensor, b) -> Tensor:
    """Elementwise (broadcasting) product."""
    b_is_t = isinstance(b, Tensor)
    bd = b.data if b_is_t else _as_const(b)
    out = Tensor(a.data * bd)

    def vjp(g):
        accumulate_grad(a, unbroadcast(g * bd, a.data.shape))
        if b_is_t:
            accumulate_grad(b, unbroadcast(g * a.data, bd.shape))

    _record(out, vjp)
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    _record(out, lambda g: accumulate_grad(a, -g))
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * s)
    _record(out, lambda g: accumulate_grad(a, g * s))
    return out


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))

    def vjp(g):
        accumulate_grad(a, g * out.data)

    _record(out, vjp)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape).copy())
    _record(out, lambda g: accumulate_grad(a, g.reshape(a.data.shape)))
    return out


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice along the last axis (fresh copy)."""
    out = Tensor(a.data[..., start:stop].copy())

    def vjp(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        accumulate_grad(a, full)

    _record(out, vjp)
    return (out)


def permute_rows(a: Tensor, order: np.ndarray, inverse: np.ndarray) -> Tensor:
    """Gather rows (axis -2) of ``a`` by a permutation.

    ``order``/``inverse`` are int arrays of shape (N,) or (..., N) matching
    a's leading axes.  The permutation is a constant in the backward pass.
    """
    if order.ndim == 1:
        out = Tensor(a.data[..., order, :].copy())

        def vjp(g):
            accumulate_grad(a, g[..., inverse, :])

    else:
        out = Tensor(np.take_along_axis(a.data, order[..., None], axis=-2))

        def vjp(g):
            accumulate_grad(a, np.take_along_axis(g, inverse[..., None], axis=-2))

    _record(out, vjp)
    return out


# ---------------------------------------------------------------------------
# linear maps
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the trailing two axes (stacked leading axes ok)."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def vjp(g):
        accumulate_grad(a, unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
        accumulate_grad(b, unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))

    _record(out, vjp)
    return out


def linear(x: Tensor, w: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis: y[..., j] = sum_i x[..., i] w[i, j] + b[j]."""
    if w.ndim != 2:
        raise DimensionError(f"linear weight must be 2-D, got {w.shape}")
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear extents disagree: x {x.shape} vs w {w.shape}")
    y = x.data @ w.data
    if bias is not None:
        y = y + bias.data
    out = Tensor(y)

    def vjp(g):
        accumulate_grad(x, g @ w.data.T)
        x2 = x.data.reshape(-1, w.data.shape[0])
        g2 = g.reshape(-1, w.data.shape[1])
        accumulate_grad(w, x2.T @ g2)
        if bias is not None:
            accumulate_grad(bias, g2.sum(axis=0))

    _record(out, vjp)
    return out


def pointwise_conv(x: Tensor, w: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """1x1 convolution: per-position linear map over channels.

    x: [..., H, W, C_in], w: [C_in, C_out].
    """
    if x.ndim < 3:
        raise DimensionError(f"pointwise_conv expects spatial input, got {x.shape}")
    return linear(x, w, bias)


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def _conv_geometry(H, W, K, stride, pad):
    Ho = (H + 2 * pad - K) // stride + 1
    Wo = (W + 2 * pad - K) // stride + 1
    if Ho < 1 or Wo < 1:
        raise DimensionError(
            f"convolution output empty: input {H}x{W}, kernel {K}, stride {stride}, pad {pad}"
        )
    return Ho, Wo


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """Dense 2-D correlation with zero padding.

    x: [..., H, W, C_in], w: [K, K, C_in, C_out], bias: [C_out].
    """
    K = w.shape[0]
    if w.ndim != 4 or w.shape[1] != K:
        raise DimensionError(f"conv2d weight must be [K,K,Cin,Cout], got {w.shape}")
    if x.shape[-1] != w.shape[2]:
        raise DimensionError(f"conv2d channels disagree: x {x.shape} vs w {w.shape}")
    H, W = x.shape[-3], x.shape[-2]
    Ho, Wo = _conv_geometry(H, W, K, stride, pad)

    widths = [(0, 0)] * (x.ndim - 3) + [(pad, pad), (pad, pad), (0, 0)]
    xp = np.pad(x.data, widths)
    lead = x.shape[:-3]
    out_d = np.zeros(lead + (Ho, Wo, w.shape[3]))
    for ki in range(K):
        for kj in range(K):
            xs = xp[..., ki:ki + stride * Ho:stride, kj:kj + stride * Wo:stride, :]
            out_d += xs @ w.data[ki, kj]
    if bias is not None:
        out_d += bias.data
    out = Tensor(out_d)

    def vjp(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for ki in range(K):
            for kj in range(K):
                sl = (Ellipsis, slice(ki, ki + stride * Ho, stride),
                      slice(kj, kj + stride * Wo, stride), slice(None))
                xs2 = xp[sl].reshape(-1, w.data.shape[2])
                gw[ki, kj] = xs2.T @ g.reshape(-1, w.data.shape[3])
                gxp[sl] += g @ w.data[ki, kj].T
        gx = gxp[..., pad:pad + H, pad:pad + W, :] if pad else gxp
        accumulate_grad(x, gx)
        accumulate_grad(w, gw)
        if bias is not None:
            accumulate_grad(bias, g.reshape(-1, g.shape[-1]).sum(axis=0))

    _record(out, vjp)
    return out


def depthwise_conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None,
                     stride: int = 1, pad: int = 0) -> Tensor:
    """Per-channel 2-D correlation with zero padding.

    x: [..., H, W, C], w: [K, K, C], bias: [C].  K must be odd; pass
    pad=(K-1)//2 for same-resolution output.
    """
    K = w.shape[0]
    if w.ndim != 3 or w.shape[1] != K:
        raise DimensionError(f"depthwise weight must be [K,K,C], got {w.shape}")
    if K % 2 == 0:
        raise ConfigurationError(f"depthwise kernel size must be odd, got {K}")
    if x.shape[-1] != w.shape[2]:
        raise DimensionError(f"depthwise channels disagree: x {x.shape} vs w {w.shape}")
    H, W = x.shape[-3], x.shape[-2]
    Ho, Wo = _conv_geometry(H, W, K, stride, pad)

    widths = [(0, 0)] * (x.ndim - 3) + [(pad, pad), (pad, pad), (0, 0)]
    xp = np.pad(x.data, widths)
    out_d = np.zeros(x.shape[:-3] + (Ho, Wo, x.shape[-1]))
    for ki in range(K):
        for kj in range(K):
            xs = xp[..., ki:ki + stride * Ho:stride, kj:kj + stride * Wo:stride, :]
            out_d += xs * w.data[ki, kj]
    if bias is not None:
        out_d += bias.data
    out = Tensor(out_d)

    def vjp(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for ki in range(K):
            for kj in range(K):
                sl = (Ellipsis, slice(ki, ki + stride * Ho, stride),
                      slice(kj, kj + stride * Wo, stride), slice(None))
                C = w.data.shape[2]
                gw[ki, kj] = (xp[sl] * g).reshape(-1, C).sum(axis=0)
                gxp[sl] += g * w.data[ki, kj]
        gx = gxp[..., pad:pad + H, pad:pad + W, :] if pad else gxp
        accumulate_grad(x, gx)
        accumulate_grad(w, gw)
        if bias is not None:
            accumulate_grad(bias, g.reshape(-1, g.shape[-1]).sum(axis=0))

    _record(out, vjp)
    return out


# ---------------------------------------------------------------------------
# normalization and activations
# ---------------------------------------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the channel (last) axis, then apply the affine pair."""
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(
            f"layer_norm affine shape {gamma.shape}/{beta.shape} != ({C},)"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def vjp(g):
        accumulate_grad(gamma, (g * xhat).reshape(-1, C).sum(axis=0))
        accumulate_grad(beta, g.reshape(-1, C).sum(axis=0))
        gh = g * gamma.data
        m1 = gh.mean(axis=-1, keepdims=True)
        m2 = (gh * xhat).mean(axis=-1, keepdims=True)
        accumulate_grad(x, inv * (gh - m1 - xhat * m2))

    _record(out, vjp)
    return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    pos = z >= 0
    out = np.empty_like(z)
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


ACTIVATION_KINDS = ("tanh", "gelu", "silu", "sigmoid", "softplus")


def activation(kind: str, x: Tensor) -> Tensor:
    """Elementwise nonlinearity with matching VJP.

    GELU uses the exact erf form, not the tanh approximation.
    """
    z = x.data
    if kind == "tanh":
        y = np.tanh(z)

        def grad_local():
            return 1.0 - y * y

    elif kind == "sigmoid":
        y = _sigmoid(z)

        def grad_local():
            return y * (1.0 - y)

    elif kind == "silu":
        s = _sigmoid(z)
        y = z * s

        def grad_local():
            return s + z * s * (1.0 - s)

    elif kind == "gelu":
        phi_cdf = 0.5 * (1.0 + erf(z * _INV_SQRT2))
        y = z * phi_cdf

        def grad_local():
            return phi_cdf + z * np.exp(-0.5 * z * z) * _INV_SQRT2PI

    elif kind == "softplus":
        y = np.logaddexp(0.0, z)

        def grad_local():
            return _sigmoid(z)

    else:
        raise ConfigurationError(f"unknown activation kind: {kind!r}")

    out = Tensor(y)
    _record(out, lambda g: accumulate_grad(x, g * grad_local()))
    return out


def tanh(x: Tensor) -> Tensor:
    return activation("tanh", x)


def gelu(x: Tensor) -> Tensor:
    return activation("gelu", x)


def silu(x: Tensor) -> Tensor:
    return activation("silu", x)


def sigmoid(x: Tensor) -> Tensor:
    return activation("sigmoid", x)


def softplus(x: Tensor) -> Tensor:
    return activation("softplus", x)


# ---------------------------------------------------------------------------
# pooling and gating
# ---------------------------------------------------------------------------

def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: [..., H, W, C] -> [..., C]."""
    if x.ndim < 3:
        raise DimensionError(f"global_avg_pool expects spatial input, got {x.shape}")
    H, W = x.shape[-3], x.shape[-2]
    out = Tensor(x.data.mean(axis=(-3, -2)))

    def vjp(g):
        gx = np.broadcast_to(g[..., None, None, :] / (H * W), x.data.shape)
        accumulate_grad(x, gx)

    _record(out, vjp)
    return out


def channel_attention(x: Tensor, w1: Tensor, b1: Tensor,
                      w2: Tensor, b2: Tensor) -> Tensor:
    """Squeeze-and-excitation gate: pooled stats -> bottleneck MLP -> sigmoid scale.

    x: [..., H, W, C]; w1: [C, Ch], w2: [Ch, C].  The hidden activation is
    GELU.  Output is x rescaled per channel.
    """
    squeezed = global_avg_pool(x)
    hidden = gelu(linear(squeezed, w1, b1))
    gate = sigmoid(linear(hidden, w2, b2))
    gate_map = reshape(gate, gate.shape[:-1] + (1, 1, gate.shape[-1]))
    return mul(x, gate_map)


def ca_hidden_width(channels: int, reduction: int) -> int:
    """Bottleneck width for channel attention, clamped to at least 1."""
    return max(1, channels // reduction)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def cross_entropy(logits: Tensor, labels: Sequence[int], smoothing: float = 0.0) -> Tensor:
    """Mean label-smoothed negative log-likelihood over a batch.

    logits: [B, num_classes]; labels: length-B ints.  Uses log-sum-exp
    stabilization.  Returns a scalar tensor.
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [B, K] logits, got {logits.shape}")
    B, K = logits.shape
    lab = np.asarray(labels, dtype=np.int64)
    if lab.shape != (B,):
        raise DimensionError(f"labels length {lab.shape} != batch {B}")
    if lab.min(initial=0) < 0 or lab.max(initial=0) >= K:
        raise InputError(f"label out of range [0, {K})")
    if not 0.0 <= smoothing < 1.0:
        raise InputError(f"smoothing must be in [0, 1), got {smoothing}")

    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    logp = z - lse
    q = np.full((B, K), smoothing / K)
    q[np.arange(B), lab] += 1.0 - smoothing
    out = Tensor(-(q * logp).sum() / B)

    def vjp(g):
        p = np.exp(logp)
        accumulate_grad(logits, (p - q) * (float(g) / B))

    _record(out, vjp)
    return out
