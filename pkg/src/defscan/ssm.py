"""Selective state space core.

The recurrence is h_t = a_bar_t * h_{t-1} + b_bar_u_t per (channel, state)
pair with diagonal dynamics, read out as y_t = sum_n c_t[n] * h_t[:, n] plus
a direct feedthrough.  The timescale, input and output projections are all
functions of the current token, so the dynamics are content-dependent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigurationError, DimensionError, InputError
from .tensor import Module, Parameter, Tensor, accumulate_grad, active_tape

_SERIES_CUTOFF = 1e-4


class SsmParams(Module):
    """Learnable pieces of one selective-scan branch.

    The state matrix is diagonal, stored as ``a_log`` and realized as
    ``-exp(a_log)`` so it stays strictly negative.  ``d_skip`` is the direct
    feedthrough.  The timescale projection is low-rank with a softplus bias.
    """

    def __init__(self, width: int, state_size: int = 16,
                 dt_rank: int | None = None, rng: np.random.Generator | None = None):
        if width < 1 or state_size < 1:
            raise ConfigurationError("width and state_size must be >= 1")
        rng = rng or np.random.default_rng(0)
        if dt_rank is None:
            dt_rank = max(1, width // 16)
        self.width = width
        self.state_size = state_size
        self.dt_rank = dt_rank

        # log(1..N) per channel row; realized A starts at -1..-N.
        self.a_log = Parameter(np.tile(np.log(np.arange(1, state_size + 1)), (width, 1)))
        self.d_skip = Parameter(np.ones(width))
        s = 1.0 / math.sqrt(width)
        self.w_b = Parameter(rng.normal(0.0, s, (width, state_size)))
        self.w_c = Parameter(rng.normal(0.0, s, (width, state_size)))
        self.w_dt_down = Parameter(rng.normal(0.0, s, (width, dt_rank)))
        self.w_dt_up = Parameter(rng.normal(0.0, 1.0 / math.sqrt(dt_rank), (dt_rank, width)))
        # bias chosen so initial timescales land log-uniformly in [1e-3, 1e-1]
        dt = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), width))
        self.dt_bias = Parameter(np.log(np.expm1(dt)))

    def realized_a(self) -> Tensor:
        """Strictly negative diagonal dynamics, differentiable wrt a_log."""
        return ops.neg(ops.exp(self.a_log))


@dataclass
class ScanInputs:
    """Per-token scan inputs: u [..,L,D], delta [..,L,D], b/c [..,L,N]."""

    u: Tensor
    delta: Tensor
    b_seq: Tensor
    c_seq: Tensor


@dataclass
class DiscretizedScan:
    """a_bar, b_bar_u: both [.., L, D, N]; a_bar lies in (0, 1)."""

    a_bar: Tensor
    b_bar_u: Tensor


def s6_project(x: Tensor, params: SsmParams) -> ScanInputs:
    """Produce token-conditioned (delta, B, C) from the input sequence.

    x: [.., L, D].  delta = softplus(x @ w_dt_down @ w_dt_up + dt_bias).
    """
    if x.shape[-1] != params.width:
        raise DimensionError(f"sequence width {x.shape} != params width {params.width}")
    b_seq = ops.linear(x, params.w_b)
    c_seq = ops.linear(x, params.w_c)
    low = ops.linear(x, params.w_dt_down)
    delta = ops.softplus(ops.add(ops.linear(low, params.w_dt_up), params.dt_bias))
    return ScanInputs(u=x, delta=delta, b_seq=b_seq, c_seq=c_seq)


def _phi1(z: np.ndarray) -> np.ndarray:
    """(exp(z) - 1) / z, with a 4-term Taylor branch for tiny |z|."""
    small = np.abs(z) < _SERIES_CUTOFF
    zs = np.where(small, 1.0, z)
    main = np.expm1(zs) / zs
    series = 1.0 + z / 2.0 + z * z / 6.0 + z ** 3 / 24.0
    return np.where(small, series, main)


def _phi1_prime(z: np.ndarray) -> np.ndarray:
    """d/dz of (exp(z) - 1) / z."""
    small = np.abs(z) < _SERIES_CUTOFF
    zs = np.where(small, 1.0, z)
    main = (np.exp(zs) * (zs - 1.0) + 1.0) / (zs * zs)
    series = 0.5 + z / 3.0 + z * z / 8.0 + z ** 3 / 30.0
    return np.where(small, series, main)


def discretize_zoh(delta: Tensor, a: Tensor, b_seq: Tensor, u: Tensor,
                   euler_b: bool = False) -> DiscretizedScan:
    """Zero-order-hold discretization of per-token continuous parameters.

    a_bar = exp(delta * a); b_bar = ((exp(z) - 1) / z) * delta * b with
    z = delta * a, returned premultiplied by u.  With ``euler_b`` the b term
    uses the simplified form delta * b instead.

    delta: [.., L, D] (> 0), a: [D, N] (< 0), b_seq: [.., L, N], u: [.., L, D].
    """
    if a.ndim != 2:
        raise DimensionError(f"a must be [D, N], got {a.shape}")
    D, N = a.shape
    if delta.shape[-1] != D or u.shape[-1] != D or b_seq.shape[-1] != N:
        raise DimensionError(
            f"discretize extents disagree: delta {delta.shape}, a {a.shape}, "
            f"b {b_seq.shape}, u {u.shape}"
        )
    if delta.shape != u.shape or delta.shape[:-1] != b_seq.shape[:-1]:
        raise DimensionError(
            f"sequence extents disagree: delta {delta.shape}, b {b_seq.shape}, u {u.shape}"
        )
    if delta.data.size and delta.data.min() <= 0.0:
        raise InputError("delta must be strictly positive")
    if a.data.size and a.data.max() >= 0.0:
        raise InputError("realized dynamics must be strictly negative")

    dd = delta.data[..., :, :, None]          # [.., L, D, 1]
    bd = b_seq.data[..., :, None, :]          # [.., L, 1, N]
    ud = u.data[..., :, :, None]              # [.., L, D, 1]
    z = dd * a.data                           # [.., L, D, N]
    a_bar = np.exp(z)
    if euler_b:
        coef = np.broadcast_to(dd, z.shape)
        p1 = pp1 = None
    else:
        p1 = _phi1(z)
        coef = p1 * dd
        pp1 = None  # computed lazily in the VJP
    b_bar_u = coef * bd * ud

    out_a = Tensor(a_bar)
    out_bu = Tensor(b_bar_u)
    tape = active_tape()
    if tape is not None:
        def vjp_a(g):
            dz = g * a_bar
            accumulate_grad(delta, np.einsum("...ldn,dn->...ld", dz, a.data))
            accumulate_grad(a, (dz * dd).reshape(-1, D, N).sum(axis=0))

        def vjp_bu(g):
            gb = g * bd * ud  # d(b_bar_u)/d(coef) contracted with g
            if euler_b:
                accumulate_grad(delta, gb.sum(axis=-1))
            else:
                nonlocal pp1
                if pp1 is None:
                    pp1 = _phi1_prime(z)
                # coef = phi1(z) * delta with z = delta * a
                d_delta = (gb * (p1 + dd * pp1 * a.data)).sum(axis=-1)
                accumulate_grad(delta, d_delta)
                d_a = (gb * pp1 * dd * dd).reshape(-1, D, N).sum(axis=0)
                accumulate_grad(a, d_a)
            gcbu = g * coef
            accumulate_grad(b_seq, (gcbu * ud).sum(axis=-2))
            accumulate_grad(u, (gcbu * bd).sum(axis=-1))

        tape.record(out_a, vjp_a)
        tape.record(out_bu, vjp_bu)
    return DiscretizedScan(a_bar=out_a, b_bar_u=out_bu)


# ---------------------------------------------------------------------------
# recurrence kernels
# ---------------------------------------------------------------------------

def _recurrence_sequential(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """h_t = a_t * h_{t-1} + b_t over axis -3, h_{-1} = 0; returns all states."""
    L = a.shape[-3]
    out = np.empty_like(b)
    h = np.zeros(b.shape[:-3] + b.shape[-2:])
    for t in range(L):
        h = a[..., t, :, :] * h + b[..., t, :, :]
        out[..., t, :, :] = h
    return out


def _recurrence_chunked(a: np.ndarray, b: np.ndarray, chunk: int) -> np.ndarray:
    """Same recurrence evaluated blockwise.

    Within each chunk the local states and cumulative coefficient products
    are computed from a zero start; the inter-chunk carry is then folded in
    left to right with the associative combine
    (a1, b1) o (a2, b2) = (a1*a2, a2*b1 + b2).
    A single chunk covering the whole sequence reproduces the sequential
    evaluation bit for bit.
    """
    L = a.shape[-3]
    chunk = min(chunk, L)
    n_chunks = -(-L // chunk)
    Lp = n_chunks * chunk
    if Lp != L:
        widths = [(0, 0)] * (a.ndim - 3) + [(0, Lp - L), (0, 0), (0, 0)]
        a = np.pad(a, widths, constant_values=1.0)
        b = np.pad(b, widths, constant_values=0.0)
    lead = a.shape[:-3]
    D, N = a.shape[-2], a.shape[-1]
    ar = a.reshape(lead + (n_chunks, chunk, D, N))
    br = b.reshape(lead + (n_chunks, chunk, D, N))

    h_local = np.empty_like(br)
    a_cum = np.empty_like(ar)
    h_local[..., 0, :, :] = br[..., 0, :, :]
    a_cum[..., 0, :, :] = ar[..., 0, :, :]
    for t in range(1, chunk):
        h_local[..., t, :, :] = ar[..., t, :, :] * h_local[..., t - 1, :, :] + br[..., t, :, :]
        a_cum[..., t, :, :] = ar[..., t, :, :] * a_cum[..., t - 1, :, :]

    if n_chunks == 1:
        return h_local.reshape(lead + (Lp, D, N))[..., :L, :, :]

    h = np.empty_like(h_local)
    carry = np.zeros(lead + (D, N))
    for k in range(n_chunks):
        hk = h_local[..., k, :, :, :] + a_cum[..., k, :, :, :] * carry[..., None, :, :]
        h[..., k, :, :, :] = hk
        carry = hk[..., -1, :, :]
    return h.reshape(lead + (Lp, D, N))[..., :L, :, :]


def _reverse_recurrence(a_bar: np.ndarray, q: np.ndarray, chunk: int | None) -> np.ndarray:
    """G_t = q_t + a_bar_{t+1} * G_{t+1}; the adjoint of the forward scan."""
    a_flip = a_bar[..., ::-1, :, :]
    ones = np.ones_like(a_flip[..., :1, :, :])
    coeff = np.concatenate([ones, a_flip[..., :-1, :, :]], axis=-3)
    q_flip = np.ascontiguousarray(q[..., ::-1, :, :])
    if chunk is None:
        g = _recurrence_sequential(coeff, q_flip)
    else:
        g = _recurrence_chunked(coeff, q_flip, chunk)
    return g[..., ::-1, :, :]


def _scan_readout(states: np.ndarray, c: np.ndarray, u: np.ndarray,
                  d_skip: np.ndarray) -> np.ndarray:
    return np.einsum("...ldn,...ln->...ld", states, c) + d_skip * u


def _make_scan_vjp(disc: DiscretizedScan, c_seq: Tensor, u: Tensor,
                   d_skip: Tensor, states: np.ndarray, chunk: int | None):
    def vjp(gy):
        q = np.einsum("...ld,...ln->...ldn", gy, c_seq.data)
        G = _reverse_recurrence(disc.a_bar.data, q, chunk)
        zeros = np.zeros_like(states[..., :1, :, :])
        h_prev = np.concatenate([zeros, states[..., :-1, :, :]], axis=-3)
        accumulate_grad(disc.a_bar, G * h_prev)
        accumulate_grad(disc.b_bar_u, G)
        accumulate_grad(c_seq, np.einsum("...ld,...ldn->...ln", gy, states))
        accumulate_grad(u, gy * d_skip.data)
        gd = gy * u.data
        accumulate_grad(d_skip, gd.reshape(-1, gd.shape[-1]).sum(axis=0))

    return vjp


def _check_scan_shapes(disc: DiscretizedScan, c_seq: Tensor, u: Tensor,
                       d_skip: Tensor) -> None:
    a, bu = disc.a_bar, disc.b_bar_u
    if a.shape != bu.shape or a.ndim < 3:
        raise DimensionError(f"discretized shapes disagree: {a.shape} vs {bu.shape}")
    L, D, N = a.shape[-3], a.shape[-2], a.shape[-1]
    if c_seq.shape[-2:] != (L, N) or u.shape[-2:] != (L, D) or d_skip.shape != (D,):
        raise DimensionError(
            f"scan extents disagree: a_bar {a.shape}, c {c_seq.shape}, "
            f"u {u.shape}, d_skip {d_skip.shape}"
        )


def selective_scan_sequential(disc: DiscretizedScan, c_seq: Tensor, u: Tensor,
                              d_skip: Tensor) -> Tensor:
    """Literal left-to-right recurrence; y_t = c_t . h_t + d_skip * u_t.

    The VJP runs the adjoint recurrence in reverse time over the saved states.
    """
    _check_scan_shapes(disc, c_seq, u, d_skip)
    states = _recurrence_sequential(disc.a_bar.data, disc.b_bar_u.data)
    out = Tensor(_scan_readout(states, c_seq.data, u.data, d_skip.data))
    tape = active_tape()
    if tape is not None:
        tape.record(out, _make_scan_vjp(disc, c_seq, u, d_skip, states, None))
    return out


def selective_scan_chunked(disc: DiscretizedScan, c_seq: Tensor, u: Tensor,
                           d_skip: Tensor, chunk: int) -> Tensor:
    """Blockwise evaluation of the same recurrence; output matches the
    sequential scan (bit for bit when chunk >= L)."""
    if not isinstance(chunk, int) or chunk < 1:
        raise ConfigurationError(f"chunk must be a positive int, got {chunk!r}")
    _check_scan_shapes(disc, c_seq, u, d_skip)
    states = _recurrence_chunked(disc.a_bar.data, disc.b_bar_u.data, chunk)
    out = Tensor(_scan_readout(states, c_seq.data, u.data, d_skip.data))
    tape = active_tape()
    if tape is not None:
        tape.record(out, _make_scan_vjp(disc, c_seq, u, d_skip, states, chunk))
    return out


def ssm_apply(seq: Tensor, params: SsmParams, chunk: int | None = 16,
              euler_b: bool = False) -> Tensor:
    """Project, discretize and scan one token sequence [.., L, D] -> [.., L, D]."""
    si = s6_project(seq, params)
    disc = discretize_zoh(si.delta, params.realized_a(), si.b_seq, si.u, euler_b=euler_b)
    if chunk is None:
        return selective_scan_sequential(disc, si.c_seq, si.u, params.d_skip)
    return selective_scan_chunked(disc, si.c_seq, si.u, params.d_skip, chunk)
