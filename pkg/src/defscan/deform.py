"""Content-adaptive scanning: learned point offsets and token-index offsets.

A small network predicts three offset channels per token.  The first two
displace each token's reference point (features are re-read there by
bilinear interpolation, optionally plus a learned scalar bias table); the
third perturbs the token's normalized index, and sorting the perturbed
indices yields a new scan order.  Sorting has a zero derivative almost
everywhere, so the index path uses a straight-through rule: the channel-mean
of each sequence position's gradient is routed back to the token's index
offset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigurationError, DimensionError, InputError
from .scan_orders import ScanOrder, identity_order
from .tensor import Module, Parameter, Tensor, accumulate_grad, active_tape

# Pixel coordinates this close to a lattice point are treated as exactly
# integral, so unperturbed reference points reproduce grid values bitwise.
_SNAP_EPS = 1e-9


@dataclass
class OffsetField:
    """Squashed, normalized offsets: dp [.., H, W, 2], dt [.., H, W, 1].

    dp[..., 0] is horizontal (bounded by 1/W), dp[..., 1] vertical (bounded
    by 1/H); |dt| < 1.
    """

    dp: Tensor
    dt: Tensor


@dataclass
class ReferenceGrid:
    """Normalized token coordinates, align-corners: p[i, j] = (x_j, y_i)."""

    p: Tensor


@dataclass
class TokenIndex:
    """Normalized token positions t_r[k] = 2k/(N-1) - 1, strictly increasing."""

    t_r: np.ndarray


def make_reference_grid(H: int, W: int) -> ReferenceGrid:
    """Grid point (i, j) maps to (2j/(W-1) - 1, 2i/(H-1) - 1); a degenerate
    axis of extent 1 maps to coordinate 0."""
    if H < 1 or W < 1:
        raise ConfigurationError(f"grid must be at least 1x1, got {H}x{W}")
    xs = np.zeros(W) if W == 1 else 2.0 * np.arange(W) / (W - 1) - 1.0
    ys = np.zeros(H) if H == 1 else 2.0 * np.arange(H) / (H - 1) - 1.0
    p = np.stack(np.meshgrid(xs, ys, indexing="xy"), axis=-1)
    return ReferenceGrid(p=Tensor(p))


def make_token_index(n: int) -> TokenIndex:
    if n < 2:
        raise ConfigurationError(f"token index needs at least 2 tokens, got {n}")
    return TokenIndex(t_r=2.0 * np.arange(n) / (n - 1) - 1.0)


def squash_split_normalize(o: Tensor, H: int, W: int) -> OffsetField:
    """tanh-squash the raw offsets, split channels, normalize the point part.

    o: [.., H, W, 3].  Channel 0 is divided by W, channel 1 by H; channel 2
    (the index offset) is left unscaled.
    """
    if o.shape[-1] != 3 or o.shape[-3] != H or o.shape[-2] != W:
        raise DimensionError(f"offset map must be [.., {H}, {W}, 3], got {o.shape}")
    squashed = ops.tanh(o)
    dp = ops.mul(ops.slice_last(squashed, 0, 2), np.array([1.0 / W, 1.0 / H]))
    dt = ops.slice_last(squashed, 2, 3)
    return OffsetField(dp=dp, dt=dt)


# ---------------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------------

def _pixel_coords(c: np.ndarray, extent: int):
    """Map normalized [-1, 1] to pixel [0, extent-1]; returns (lo, hi, frac)."""
    pix = (c + 1.0) * 0.5 * (extent - 1)
    lo = np.floor(pix)
    frac = pix - lo
    # snap to the lattice so exact grid coordinates gather exactly
    at_lo = frac < _SNAP_EPS
    at_hi = frac > 1.0 - _SNAP_EPS
    lo = np.where(at_hi, lo + 1.0, lo)
    frac = np.where(at_lo | at_hi, 0.0, frac)
    lo = np.clip(lo, 0, extent - 1).astype(np.int64)
    hi = np.minimum(lo + 1, extent - 1)
    return lo, hi, frac


def bilinear_sample(x: Tensor, coords: Tensor) -> Tensor:
    """Align-corners bilinear interpolation.

    x: [H, W, C] or [.., H, W, C]; coords: [.., M, 2] with coords[..., 0]
    horizontal and coords[..., 1] vertical, clamped to [-1, 1].  When x has
    no leading axes it is shared across the coordinate batch.  Gradients
    flow to both x and coords.
    """
    if x.ndim < 3 or coords.shape[-1] != 2:
        raise DimensionError(f"bilinear_sample got x {x.shape}, coords {coords.shape}")
    H, W, C = x.shape[-3], x.shape[-2], x.shape[-1]
    lead_x = x.shape[:-3]
    lead_c = coords.shape[:-2]
    if lead_x and lead_x != lead_c:
        raise DimensionError(
            f"leading axes disagree: x {x.shape} vs coords {coords.shape}"
        )

    cl = np.clip(coords.data, -1.0, 1.0)
    inside = (np.abs(coords.data) < 1.0)  # clamp gradient mask
    j0, j1, fx = _pixel_coords(cl[..., 0], W)
    i0, i1, fy = _pixel_coords(cl[..., 1], H)

    xd = x.data
    if lead_x:
        # sparse batch indices, with a trailing unit axis for the point axis
        idx = tuple(ix[..., None] for ix in np.indices(lead_c, sparse=True))

        def corner(ii, jj):
            return xd[idx + (ii, jj)]
    else:
        def corner(ii, jj):
            return xd[ii, jj]

    v00, v01 = corner(i0, j0), corner(i0, j1)
    v10, v11 = corner(i1, j0), corner(i1, j1)
    wx, wy = fx[..., None], fy[..., None]
    top = (1.0 - wx) * v00 + wx * v01
    bot = (1.0 - wx) * v10 + wx * v11
    out = Tensor((1.0 - wy) * top + wy * bot)

    def vjp(g):
        gx = np.zeros_like(xd)
        w00 = (1.0 - wx) * (1.0 - wy)
        w01 = wx * (1.0 - wy)
        w10 = (1.0 - wx) * wy
        w11 = wx * wy
        if lead_x:
            np.add.at(gx, idx + (i0, j0), w00 * g)
            np.add.at(gx, idx + (i0, j1), w01 * g)
            np.add.at(gx, idx + (i1, j0), w10 * g)
            np.add.at(gx, idx + (i1, j1), w11 * g)
        else:
            np.add.at(gx, (i0, j0), w00 * g)
            np.add.at(gx, (i0, j1), w01 * g)
            np.add.at(gx, (i1, j0), w10 * g)
            np.add.at(gx, (i1, j1), w11 * g)
        accumulate_grad(x, gx)

        d_fx = ((v01 - v00) * (1.0 - wy) + (v11 - v10) * wy) * g
        d_fy = ((v10 - v00) * (1.0 - wx) + (v11 - v01) * wx) * g
        gc = np.stack([
            d_fx.sum(axis=-1) * (0.5 * (W - 1)),
            d_fy.sum(axis=-1) * (0.5 * (H - 1)),
        ], axis=-1)
        accumulate_grad(coords, np.where(inside, gc, 0.0))

    _record_on_tape(out, vjp)
    return out


def _record_on_tape(out: Tensor, vjp) -> None:
    tape = active_tape()
    if tape is not None:
        tape.record(out, vjp)


class OffsetBias(Module):
    """Learnable scalar table added to deformably sampled features.

    Sized to the stage's feature resolution at construction; initialized to
    zero so it is inert at the start of training.
    """

    def __init__(self, H: int, W: int):
        self.table = Parameter(np.zeros((H, W)))
        self.h = H
        self.w = W


def _resample_bias(bias: OffsetBias, H: int, W: int) -> Tensor:
    """Bias table as [H, W, 1], bilinearly resampled on resolution mismatch."""
    table = ops.reshape(bias.table, (bias.h, bias.w, 1))
    if (bias.h, bias.w) == (H, W):
        return table
    grid = make_reference_grid(H, W).p
    flat = bilinear_sample(table, ops.reshape(Tensor(grid.data), (H * W, 2)))
    return ops.reshape(flat, (H, W, 1))


def sample_with_bias(x: Tensor, grid: ReferenceGrid, dp: Tensor,
                     bias: OffsetBias | None = None,
                     bias_lookup: str = "absolute_halved") -> Tensor:
    """Re-read features at displaced reference points, plus the bias term.

    x: [.., H, W, C]; dp: [.., H, W, 2].  Features are sampled at p + dp.
    The bias table is sampled with the displacement halved (p + dp/2), a
    compensation for the table being stored at lattice rather than doubled
    resolution; ``bias_lookup="relative"`` instead indexes the table by
    dp/2 around its center.
    """
    H, W, C = x.shape[-3], x.shape[-2], x.shape[-1]
    if dp.shape[-3:] != (H, W, 2) or dp.shape[:-3] != x.shape[:-3]:
        raise DimensionError(f"offsets {dp.shape} do not match features {x.shape}")
    lead = x.shape[:-3]
    n = H * W

    p_hat = ops.add(dp, grid.p.data)
    sampled = bilinear_sample(x, ops.reshape(p_hat, lead + (n, 2)))
    out = ops.reshape(sampled, lead + (H, W, C))

    if bias is not None:
        table = _resample_bias(bias, H, W)
        if bias_lookup == "absolute_halved":
            p_bias = ops.add(ops.scale(dp, 0.5), grid.p.data)
        elif bias_lookup == "relative":
            p_bias = ops.scale(dp, 0.5)
        else:
            raise ConfigurationError(f"unknown bias_lookup: {bias_lookup!r}")
        comp = bilinear_sample(table, ops.reshape(p_bias, lead + (n, 2)))
        out = ops.add(out, ops.reshape(comp, lead + (H, W, 1)))
    return out


# ---------------------------------------------------------------------------
# index offsets and reordering
# ---------------------------------------------------------------------------

def order_from_index(t_index: TokenIndex, dt: np.ndarray) -> ScanOrder:
    """Stable ascending argsort of t_r + dt; ties keep the original order."""
    t_r = t_index.t_r
    dt = np.asarray(dt, dtype=np.float64)
    if dt.shape[-1] != t_r.shape[0]:
        raise DimensionError(f"dt length {dt.shape} != index length {t_r.shape}")
    keys = t_r + dt
    order = np.argsort(keys, axis=-1, kind="stable")
    return ScanOrder.from_order(order)


def flatten_by_order(x_hat: Tensor, order: ScanOrder) -> Tensor:
    """Row-major flatten then gather: seq[i] = x_hat[order[i]]."""
    H, W, C = x_hat.shape[-3], x_hat.shape[-2], x_hat.shape[-1]
    n = H * W
    if order.n_tokens != n:
        raise DimensionError(f"order length {order.n_tokens} != tokens {n}")
    flat = ops.reshape(x_hat, x_hat.shape[:-3] + (n, C))
    return ops.permute_rows(flat, order.order, order.inverse)


def unflatten_by_order(seq: Tensor, order: ScanOrder, H: int, W: int) -> Tensor:
    """Exact inverse of :func:`flatten_by_order`."""
    n, C = seq.shape[-2], seq.shape[-1]
    if order.n_tokens != n or n != H * W:
        raise DimensionError(f"sequence length {n} != order/{H}x{W}")
    restored = ops.permute_rows(seq, order.inverse, order.order)
    return ops.reshape(restored, seq.shape[:-2] + (H, W, C))


def straight_through_index_grad(grad_seq: np.ndarray, order: ScanOrder) -> np.ndarray:
    """Surrogate gradient for the index offsets.

    Token j receives the channel-mean of the sequence gradient at the
    position it was sorted into: grad_dt[j] = mean_c grad_seq[inverse[j], c].
    """
    grad_seq = np.asarray(grad_seq, dtype=np.float64)
    if grad_seq.shape[-2] != order.n_tokens:
        raise DimensionError(
            f"grad rows {grad_seq.shape} != order length {order.n_tokens}"
        )
    means = grad_seq.mean(axis=-1)
    if order.inverse.ndim == 1:
        return means[..., order.inverse]
    return np.take_along_axis(means, order.inverse, axis=-1)


def reorder_tokens(x_flat: Tensor, dt_flat: Tensor,
                   t_index: TokenIndex) -> tuple[Tensor, ScanOrder]:
    """Sort tokens by perturbed indices; gather with a straight-through VJP.

    x_flat: [.., N, C]; dt_flat: [.., N].  The permutation is constant in
    the backward pass for the feature path; dt receives the channel-mean
    replication rule instead of the (zero a.e.) sort derivative.
    """
    if x_flat.shape[:-1] != dt_flat.shape:
        raise DimensionError(
            f"token/offset shapes disagree: {x_flat.shape} vs {dt_flat.shape}"
        )
    scan = order_from_index(t_index, dt_flat.data)
    if scan.order.ndim == 1:
        seq_data = x_flat.data[..., scan.order, :].copy()
    else:
        seq_data = np.take_along_axis(x_flat.data, scan.order[..., None], axis=-2)
    out = Tensor(seq_data)

    def vjp(g):
        if scan.order.ndim == 1:
            accumulate_grad(x_flat, g[..., scan.inverse, :])
        else:
            accumulate_grad(x_flat, np.take_along_axis(g, scan.inverse[..., None], axis=-2))
        accumulate_grad(dt_flat, straight_through_index_grad(g, scan))

    _record_on_tape(out, vjp)
    return out, scan


# ---------------------------------------------------------------------------
# the offset network and the full pipeline
# ---------------------------------------------------------------------------

class OffsetNetwork(Module):
    """Predicts the 3 offset channels from features.

    depthwise KxK -> (channel attention) -> GELU -> layer norm -> 1x1 without
    bias.  The final projection is zero-initialized so a fresh network emits
    zeros, making the whole deformable path an exact identity at start.
    """

    def __init__(self, channels: int, kernel: int, with_ca: bool = True,
                 ca_reduction: int = 4, rng: np.random.Generator | None = None):
        if kernel % 2 == 0:
            raise ConfigurationError(f"offset kernel must be odd, got {kernel}")
        rng = rng or np.random.default_rng(0)
        self.kernel = kernel
        self.with_ca = with_ca
        k_std = 1.0 / np.sqrt(kernel * kernel)
        self.dw_w = Parameter(rng.normal(0.0, k_std, (kernel, kernel, channels)))
        self.dw_b = Parameter(np.zeros(channels))
        if with_ca:
            hidden = ops.ca_hidden_width(channels, ca_reduction)
            c_std = 1.0 / np.sqrt(channels)
            self.ca_w1 = Parameter(rng.normal(0.0, c_std, (channels, hidden)))
            self.ca_b1 = Parameter(np.zeros(hidden))
            self.ca_w2 = Parameter(rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, channels)))
            self.ca_b2 = Parameter(np.zeros(channels))
        self.ln_gamma = Parameter(np.ones(channels))
        self.ln_beta = Parameter(np.zeros(channels))
        self.pw_w = Parameter(np.zeros((channels, 3)))

    def __call__(self, x: Tensor) -> Tensor:
        pad = (self.kernel - 1) // 2
        h = ops.depthwise_conv2d(x, self.dw_w, self.dw_b, stride=1, pad=pad)
        if self.with_ca:
            h = ops.channel_attention(h, self.ca_w1, self.ca_b1, self.ca_w2, self.ca_b2)
        h = ops.gelu(h)
        h = ops.layer_norm(h, self.ln_gamma, self.ln_beta)
        return ops.pointwise_conv(h, self.pw_w)


class DeformableScanWeights(Module):
    """Everything one deformable scan owns: offset net, bias table, caches."""

    def __init__(self, H: int, W: int, channels: int, kernel: int,
                 use_points: bool = True, use_index: bool = True,
                 use_bias: bool = True, use_ca: bool = True,
                 ca_reduction: int = 4, rng: np.random.Generator | None = None):
        self.use_points = use_points
        self.use_index = use_index and H * W >= 2
        if use_points or self.use_index:
            self.net = OffsetNetwork(channels, kernel, with_ca=use_ca,
                                     ca_reduction=ca_reduction, rng=rng)
        else:
            self.net = None
        self.bias = OffsetBias(H, W) if (use_points and use_bias) else None
        self.grid = make_reference_grid(H, W)
        self.t_index = make_token_index(H * W) if self.use_index else None


def deformable_scan(x: Tensor, weights: DeformableScanWeights,
                    bias_lookup: str = "absolute_halved") -> tuple[Tensor, ScanOrder]:
    """Full pipeline: offsets -> displaced sampling -> sorted reordering.

    x: [.., H, W, C].  Returns the token sequence [.., N, C] and the scan
    order used to produce it.  Disabled components degrade exactly: no point
    offsets means the features pass through; no index offsets means raster
    order.
    """
    H, W, C = x.shape[-3], x.shape[-2], x.shape[-1]
    n = H * W

    field = None
    if weights.net is not None:
        raw = weights.net(x)
        field = squash_split_normalize(raw, H, W)

    x_hat = x
    if weights.use_points and field is not None:
        x_hat = sample_with_bias(x, weights.grid, field.dp, weights.bias,
                                 bias_lookup=bias_lookup)

    flat = ops.reshape(x_hat, x_hat.shape[:-3] + (n, C))
    if weights.use_index and field is not None:
        dt_flat = ops.reshape(field.dt, field.dt.shape[:-3] + (n,))
        return reorder_tokens(flat, dt_flat, weights.t_index)
    return flat, identity_order(n)
