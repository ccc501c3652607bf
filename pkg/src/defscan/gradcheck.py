"""Finite-difference verification of every differentiable operation.

Checks contract the analytic VJP with a random cotangent and compare against
a central-difference directional derivative (h=1e-5, float64).  Bilinear
sampling is non-differentiable exactly on lattice lines and at the clamp
boundary, so offset cases whose sampled coordinates land within 1e-3 of
either are reported as skipped rather than failed.  The sorted index path
uses a straight-through surrogate gradient by construction, so it is
excluded here and checked exactly elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .deform import (DeformableScanWeights, OffsetBias, bilinear_sample,
                     deformable_scan, make_reference_grid, sample_with_bias)
from .model import DmBlock, ModelConfig
from .ssm import (DiscretizedScan, SsmParams, discretize_zoh, s6_project,
                  selective_scan_chunked, selective_scan_sequential, ssm_apply)
from .tensor import Parameter, Tape, Tensor

SCOPES = ("ops", "scan", "deformable", "block", "all")
REL_TOL = 1e-4
FD_H = 1e-5
LATTICE_MARGIN = 1e-3


@dataclass
class CheckResult:
    name: str
    worst_rel_err: float
    checked: int
    skipped: int

    @property
    def passed(self) -> bool:
        return self.checked == 0 or self.worst_rel_err <= REL_TOL

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return (f"[{tag}] op={self.name} worst_rel_err={self.worst_rel_err:.3e} "
                f"checked={self.checked} skipped={self.skipped}")


def vjp_rel_err(fn, inputs: list[Tensor], rng: np.random.Generator,
                h: float = FD_H) -> float:
    """Directional derivative of <fn(inputs), v> vs the contracted VJP."""
    with Tape() as tape:
        out = fn(*inputs)
    v = rng.standard_normal(out.shape)
    tape.backward(out, v)
    dirs = [rng.standard_normal(t.shape) for t in inputs]
    analytic = sum(
        float((t.grad * d).sum()) for t, d in zip(inputs, dirs) if t.grad is not None
    )

    def probe(eps: float) -> float:
        shifted = [Tensor(t.data + eps * d) for t, d in zip(inputs, dirs)]
        return float((fn(*shifted).data * v).sum())

    numeric = (probe(h) - probe(-h)) / (2.0 * h)
    denom = max(abs(analytic), abs(numeric), 1e-6)
    return abs(analytic - numeric) / denom


def vjp_rel_err_params(forward, x: Tensor, params: list[Parameter],
                       rng: np.random.Generator, h: float = FD_H) -> float:
    """Same check for closures over parameters; perturbs them in place."""
    for p in params:
        p.grad = None
    with Tape() as tape:
        out = forward(x)
    v = rng.standard_normal(out.shape)
    tape.backward(out, v)
    dx = rng.standard_normal(x.shape)
    dps = [rng.standard_normal(p.shape) for p in params]
    analytic = float((x.grad * dx).sum()) if x.grad is not None else 0.0
    analytic += sum(
        float((p.grad * d).sum()) for p, d in zip(params, dps) if p.grad is not None
    )

    saved = [p.data.copy() for p in params]

    def probe(eps: float) -> float:
        for p, d, s in zip(params, dps, saved):
            p.data = s + eps * d
        try:
            return float((forward(Tensor(x.data + eps * dx)).data * v).sum())
        finally:
            for p, s in zip(params, saved):
                p.data = s

    numeric = (probe(h) - probe(-h)) / (2.0 * h)
    denom = max(abs(analytic), abs(numeric), 1e-6)
    return abs(analytic - numeric) / denom


def coords_clear(coords: np.ndarray, H: int, W: int,
                 margin: float = LATTICE_MARGIN) -> bool:
    """True when every coordinate is safely differentiable.

    Rejects points within ``margin`` (pixel units) of a lattice line and
    points within ``margin`` (normalized units) of the clamp boundary.
    Points far beyond the boundary sit in the flat clamped region and are
    fine.
    """
    for axis, extent in ((0, W), (1, H)):
        c = coords[..., axis]
        if (np.abs(np.abs(c) - 1.0) < margin).any():
            return False
        deep_clamp = np.abs(c) > 1.0
        if extent == 1:
            continue
        pix = (np.clip(c, -1.0, 1.0) + 1.0) * 0.5 * (extent - 1)
        frac = pix - np.floor(pix)
        dist = np.minimum(frac, 1.0 - frac)
        if ((~deep_clamp) & (dist < margin)).any():
            return False
    return True


def _run_cases(name: str, case_fn, seeds: range) -> CheckResult:
    worst = 0.0
    checked = 0
    skipped = 0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        err = case_fn(rng)
        if err is None:
            skipped += 1
        else:
            worst = max(worst, err)
            checked += 1
    return CheckResult(name=name, worst_rel_err=worst, checked=checked, skipped=skipped)


def _t(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape))


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------

def _ops_suite(seeds: range) -> list[CheckResult]:
    results = [
        _run_cases("matmul", lambda rng: vjp_rel_err(
            ops.matmul, [_t(rng, 5, 4), _t(rng, 4, 3)], rng), seeds),
        _run_cases("linear", lambda rng: vjp_rel_err(
            ops.linear, [_t(rng, 2, 6, 4), _t(rng, 4, 3), _t(rng, 3)], rng), seeds),
        _run_cases("pointwise_conv", lambda rng: vjp_rel_err(
            ops.pointwise_conv, [_t(rng, 5, 4, 3), _t(rng, 3, 2), _t(rng, 2)], rng), seeds),
        _run_cases("conv2d", lambda rng: vjp_rel_err(
            lambda x, w, b: ops.conv2d(x, w, b, stride=2, pad=1),
            [_t(rng, 6, 6, 3), _t(rng, 3, 3, 3, 4), _t(rng, 4)], rng), seeds),
        _run_cases("depthwise_conv2d", lambda rng: vjp_rel_err(
            lambda x, w, b: ops.depthwise_conv2d(x, w, b, stride=1, pad=1),
            [_t(rng, 5, 6, 3), _t(rng, 3, 3, 3), _t(rng, 3)], rng), seeds),
        _run_cases("layer_norm", lambda rng: vjp_rel_err(
            ops.layer_norm, [_t(rng, 4, 5, 6), _t(rng, 6), _t(rng, 6)], rng), seeds),
        _run_cases("global_avg_pool", lambda rng: vjp_rel_err(
            ops.global_avg_pool, [_t(rng, 5, 4, 3)], rng), seeds),
        _run_cases("channel_attention", lambda rng: vjp_rel_err(
            ops.channel_attention,
            [_t(rng, 4, 4, 6), _t(rng, 6, 2), _t(rng, 2), _t(rng, 2, 6), _t(rng, 6)],
            rng), seeds),
        _run_cases("cross_entropy", lambda rng: vjp_rel_err(
            lambda z: ops.cross_entropy(z, [1, 0, 3], smoothing=0.1),
            [_t(rng, 3, 5)], rng), seeds),
        _run_cases("add_mul_exp", lambda rng: vjp_rel_err(
            lambda a, b: ops.exp(ops.mul(ops.add(a, b), 0.3)),
            [_t(rng, 4, 5), _t(rng, 4, 5)], rng), seeds),
        _run_cases("reshape_slice", lambda rng: vjp_rel_err(
            lambda a: ops.slice_last(ops.reshape(a, (3, 8)), 1, 5),
            [_t(rng, 6, 4)], rng), seeds),
    ]
    for kind in ops.ACTIVATION_KINDS:
        results.append(_run_cases(
            f"activation.{kind}",
            lambda rng, k=kind: vjp_rel_err(
                lambda x: ops.activation(k, x), [_t(rng, 100)], rng),
            seeds))
    return results


_MIX_W = Tensor(np.linspace(-1.0, 1.0, 12).reshape(3, 4))


def _scan_suite(seeds: range) -> list[CheckResult]:
    def project_case(rng):
        params = SsmParams(width=4, state_size=3, rng=rng)

        def forward(x):
            si = s6_project(x, params)
            mixed = ops.add(ops.linear(si.b_seq, _MIX_W), ops.linear(si.c_seq, _MIX_W))
            return ops.add(si.delta, mixed)

        return vjp_rel_err_params(forward, _t(rng, 6, 4), params.parameters(), rng)

    def discretize_case(rng):
        delta = Tensor(rng.uniform(0.05, 0.8, (5, 3)))
        a = Tensor(-rng.uniform(0.2, 2.0, (3, 4)))
        b = _t(rng, 5, 4)
        u = _t(rng, 5, 3)

        def forward(dl, aa, bb, uu):
            disc = discretize_zoh(dl, aa, bb, uu)
            return ops.add(disc.a_bar, disc.b_bar_u)

        return vjp_rel_err(forward, [delta, a, b, u], rng)

    def scan_case(chunk):
        def case(rng):
            L, D, N = 12, 3, 4
            a_bar = Tensor(rng.uniform(0.1, 0.95, (L, D, N)))
            b_bar_u = _t(rng, L, D, N)
            c = _t(rng, L, N)
            u = _t(rng, L, D)
            d_skip = _t(rng, D)

            def forward(ab, bb, cc, uu, dd):
                disc = DiscretizedScan(a_bar=ab, b_bar_u=bb)
                if chunk is None:
                    return selective_scan_sequential(disc, cc, uu, dd)
                return selective_scan_chunked(disc, cc, uu, dd, chunk)

            return vjp_rel_err(forward, [a_bar, b_bar_u, c, u, d_skip], rng)

        return case

    def end_to_end_case(rng):
        params = SsmParams(width=3, state_size=4, rng=rng)

        def forward(x):
            return ssm_apply(x, params, chunk=4)

        return vjp_rel_err_params(forward, _t(rng, 10, 3), params.parameters(), rng)

    return [
        _run_cases("s6_project", project_case, seeds),
        _run_cases("discretize_zoh", discretize_case, seeds),
        _run_cases("selective_scan_sequential", scan_case(None), seeds),
        _run_cases("selective_scan_chunked", scan_case(5), seeds),
        _run_cases("ssm_end_to_end", end_to_end_case, seeds),
    ]


def _sample_offsets(rng, H, W, force_lattice=False):
    """Point offsets clear of lattice lines for both the feature lookup and
    the halved bias lookup, or None to skip."""
    if force_lattice:
        dp = np.zeros((H, W, 2))
    else:
        dp = np.stack([rng.uniform(-0.9 / W, 0.9 / W, (H, W)),
                       rng.uniform(-0.9 / H, 0.9 / H, (H, W))], axis=-1)
    grid = make_reference_grid(H, W).p.data
    if coords_clear(grid + dp, H, W) and coords_clear(grid + dp / 2, H, W):
        return dp
    return None


def _deformable_suite(seeds: range, force_lattice: bool = False) -> list[CheckResult]:
    def bilinear_case(rng):
        H, W, C = 5, 6, 3
        dp = _sample_offsets(rng, H, W, force_lattice)
        if dp is None:
            return None
        grid = make_reference_grid(H, W).p.data
        coords = Tensor((grid + dp).reshape(H * W, 2))
        return vjp_rel_err(bilinear_sample, [_t(rng, H, W, C), coords], rng)

    def sample_bias_case(rng):
        H, W, C = 4, 5, 3
        dp_arr = _sample_offsets(rng, H, W, force_lattice)
        if dp_arr is None:
            return None
        bias = OffsetBias(H, W)
        bias.table.data = rng.standard_normal((H, W))
        grid = make_reference_grid(H, W)

        def forward(x, dp, table):
            bias.table = table
            return sample_with_bias(x, grid, dp, bias)

        return vjp_rel_err(
            forward, [_t(rng, H, W, C), Tensor(dp_arr), Tensor(bias.table.data)], rng)

    def pipeline_case(rng):
        # point path only: the index path's straight-through rule is a
        # surrogate and is verified exactly, not by finite differences
        H, W, C = 4, 4, 5
        w = DeformableScanWeights(H, W, C, kernel=3, use_index=False, rng=rng)
        if force_lattice:
            x_arr = rng.standard_normal((H, W, C))
        else:
            for _ in range(8):
                w.net.pw_w.data = rng.normal(0.0, 0.4, (C, 3))
                x_arr = rng.standard_normal((H, W, C))
                raw = w.net(Tensor(x_arr)).data
                dp = np.stack([np.tanh(raw[..., 0]) / W,
                               np.tanh(raw[..., 1]) / H], axis=-1)
                grid = w.grid.p.data
                if coords_clear(grid + dp, H, W) and coords_clear(grid + dp / 2, H, W):
                    break
            else:
                return None
        if force_lattice:
            return None  # zero offsets sit exactly on the lattice

        def forward(x):
            seq, _ = deformable_scan(x, w)
            return seq

        return vjp_rel_err_params(forward, Tensor(x_arr), w.parameters(), rng)

    return [
        _run_cases("bilinear_sample", bilinear_case, seeds),
        _run_cases("sample_with_bias", sample_bias_case, seeds),
        _run_cases("deformable_scan_points", pipeline_case, seeds),
    ]


def _block_suite(seeds: range) -> list[CheckResult]:
    def block_case(rng):
        # index offsets disabled: their surrogate gradient is not a true
        # derivative, so it would spoil a finite-difference comparison
        cfg = ModelConfig(stage_depths=(1, 1, 1, 1), stage_widths=(8, 16, 32, 64),
                          offset_kernels=(3, 3, 3, 3), state_size=4, num_classes=4,
                          input_size=32, scan_chunk=4, dt=False)
        block = DmBlock(8, 4, 4, 3, cfg, rng)
        deform = block.mixer.deform
        for _ in range(8):
            deform.net.pw_w.data = rng.normal(0.0, 0.4, (8, 3))
            x_arr = rng.standard_normal((4, 4, 8)) * 0.5
            cap: dict = {}
            block(Tensor(x_arr), capture=cap)
            dp = cap["dp"]
            grid = deform.grid.p.data
            if coords_clear(grid + dp, 4, 4) and coords_clear(grid + dp / 2, 4, 4):
                break
        else:
            return None

        def forward(x):
            return block(x)

        return vjp_rel_err_params(forward, Tensor(x_arr), block.parameters(), rng)

    return [_run_cases("dm_block", block_case, range(seeds.start, seeds.start + 8))]


def run_gradcheck(scope: str, seed: int = 0,
                  force_lattice: bool = False) -> tuple[list[CheckResult], bool]:
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}, got {scope!r}")
    seeds = range(seed, seed + 20)
    results: list[CheckResult] = []
    if scope in ("ops", "all"):
        results += _ops_suite(seeds)
    if scope in ("scan", "all"):
        results += _scan_suite(seeds)
    if scope in ("deformable", "all"):
        results += _deformable_suite(seeds, force_lattice=force_lattice)
    if scope in ("block", "all"):
        results += _block_suite(seeds)
    ok = all(r.passed for r in results)
    return results, ok
