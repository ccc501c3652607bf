"""Hierarchical backbone built from deformable-scan mixer blocks.

Four stages of residual blocks over a strided convolutional stem.  Each
block's mixer runs up to four selective-scan branches over differently
ordered token sequences (raster, reversed raster, an optional fixed
alternative, and the learned deformable order), sums them, gates the sum,
and projects back to the block width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .deform import DeformableScanWeights, deformable_scan, unflatten_by_order
from .errors import ConfigurationError, DimensionError
from .scan_orders import fixed_order
from .ssm import SsmParams, ssm_apply
from .tensor import Module, Parameter, Tensor

FIXED_BRANCH_KINDS = ("none", "continuous", "local")


@dataclass
class ModelConfig:
    stage_depths: tuple[int, ...] = (1, 1, 2, 1)
    stage_widths: tuple[int, ...] = (16, 32, 64, 128)
    offset_kernels: tuple[int, ...] = (9, 7, 5, 3)
    ssm_ratio: int = 1
    state_size: int = 16
    ffn_ratio: int = 4
    num_classes: int = 8
    input_size: int = 32
    # branch / component toggles
    fb_bb: bool = True
    db: bool = True
    dp: bool = True
    dt: bool = True
    ob: bool = True
    ca: bool = True
    fixed_branch: str = "none"
    local_window: int = 2
    # numerics
    scan_chunk: int = 16
    ca_reduction: int = 4
    euler_discretization: bool = False

    def __post_init__(self):
        self.stage_depths = tuple(int(v) for v in self.stage_depths)
        self.stage_widths = tuple(int(v) for v in self.stage_widths)
        self.offset_kernels = tuple(int(v) for v in self.offset_kernels)
        if not (len(self.stage_depths) == len(self.stage_widths)
                == len(self.offset_kernels) == 4):
            raise ConfigurationError("stage lists must all have length 4")
        if any(d < 1 for d in self.stage_depths) or any(w < 1 for w in self.stage_widths):
            raise ConfigurationError("stage depths and widths must be >= 1")
        if any(k % 2 == 0 for k in self.offset_kernels):
            raise ConfigurationError(f"offset kernels must be odd: {self.offset_kernels}")
        if self.fixed_branch not in FIXED_BRANCH_KINDS:
            raise ConfigurationError(f"fixed_branch must be one of {FIXED_BRANCH_KINDS}")
        if not (self.fb_bb or self.db or self.fixed_branch != "none"):
            raise ConfigurationError("at least one mixer branch must be enabled")
        if self.input_size % 32 != 0:
            raise ConfigurationError(
                f"input resolution must be divisible by 32, got {self.input_size}"
            )


PRESETS = {
    # desk-scale configuration for tests and the synthetic-data harness
    "nano": ModelConfig(stage_depths=(1, 1, 2, 1), stage_widths=(16, 32, 64, 128),
                        num_classes=8, input_size=32),
    # reference configurations; widths double per stage, kernels 9/7/5/3
    "tiny": ModelConfig(stage_depths=(2, 2, 5, 2), stage_widths=(48, 96, 192, 384),
                        num_classes=1000, input_size=224),
    "small": ModelConfig(stage_depths=(2, 2, 6, 2), stage_widths=(96, 192, 384, 768),
                         num_classes=1000, input_size=224),
    "base": ModelConfig(stage_depths=(2, 3, 16, 2), stage_widths=(96, 192, 384, 768),
                        num_classes=1000, input_size=224),
}


def preset_config(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; have {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


def _init_linear(rng, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out))


class LinearW(Module):
    def __init__(self, fan_in: int, fan_out: int, rng, bias: bool = True):
        self.w = Parameter(_init_linear(rng, fan_in, fan_out))
        self.b = Parameter(np.zeros(fan_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.w, self.b)


class LayerNormW(Module):
    def __init__(self, width: int):
        self.gamma = Parameter(np.ones(width))
        self.beta = Parameter(np.zeros(width))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta)


class ConvW(Module):
    def __init__(self, kernel: int, c_in: int, c_out: int, rng):
        std = 1.0 / math.sqrt(kernel * kernel * c_in)
        self.w = Parameter(rng.normal(0.0, std, (kernel, kernel, c_in, c_out)))
        self.b = Parameter(np.zeros(c_out))

    def __call__(self, x: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
        return ops.conv2d(x, self.w, self.b, stride=stride, pad=pad)


class PatchEmbed(Module):
    """Two stride-2 3x3 convolutions with LN and GELU between them; /4 total."""

    def __init__(self, c_out: int, rng):
        mid = max(1, c_out // 2)
        self.conv1 = ConvW(3, 3, mid, rng)
        self.ln1 = LayerNormW(mid)
        self.conv2 = ConvW(3, mid, c_out, rng)
        self.ln2 = LayerNormW(c_out)

    def __call__(self, img: Tensor) -> Tensor:
        H, W = img.shape[-3], img.shape[-2]
        if H % 4 or W % 4:
            raise ConfigurationError(f"patch embed needs H, W divisible by 4, got {H}x{W}")
        h = self.ln1(self.conv1(img, stride=2, pad=1))
        h = ops.gelu(h)
        return self.ln2(self.conv2(h, stride=2, pad=1))


class Downsample(Module):
    """Stride-2 3x3 convolution doubling channels, then LN."""

    def __init__(self, c_in: int, rng):
        self.conv = ConvW(3, c_in, 2 * c_in, rng)
        self.ln = LayerNormW(2 * c_in)

    def __call__(self, x: Tensor) -> Tensor:
        H, W = x.shape[-3], x.shape[-2]
        if H % 2 or W % 2:
            raise ConfigurationError(f"downsample needs even extents, got {H}x{W}")
        return self.ln(self.conv(x, stride=2, pad=1))


class Dssm(Module):
    """The mixer: project in, depthwise-mix, scan along several orders, gate.

    Branch outputs are summed, so zeroing one branch's readout (its c
    projection and feedthrough) removes exactly that branch's effect.
    """

    def __init__(self, width: int, H: int, W: int, kernel: int,
                 cfg: ModelConfig, rng):
        inner = cfg.ssm_ratio * width
        self.h = H
        self.w = W
        self.chunk = cfg.scan_chunk
        self.euler = cfg.euler_discretization
        self.fixed_kind = cfg.fixed_branch
        self.local_window = cfg.local_window
        self.in_proj = LinearW(width, inner, rng)
        self.gate_proj = LinearW(width, inner, rng)
        std = 1.0 / 3.0
        self.dw_w = Parameter(rng.normal(0.0, std, (3, 3, inner)))
        self.dw_b = Parameter(np.zeros(inner))

        self.ssm_fwd = SsmParams(inner, cfg.state_size, rng=rng) if cfg.fb_bb else None
        self.ssm_bwd = SsmParams(inner, cfg.state_size, rng=rng) if cfg.fb_bb else None
        if cfg.fixed_branch != "none":
            self.ssm_fixed = SsmParams(inner, cfg.state_size, rng=rng)
            self._fixed_order = fixed_order(
                "continuous" if cfg.fixed_branch == "continuous" else "local_window",
                H, W, window=cfg.local_window)
        else:
            self.ssm_fixed = None
            self._fixed_order = None
        if cfg.db:
            self.ssm_def = SsmParams(inner, cfg.state_size, rng=rng)
            self.deform = DeformableScanWeights(
                H, W, inner, kernel,
                use_points=cfg.dp, use_index=cfg.dt, use_bias=cfg.ob,
                use_ca=cfg.ca, ca_reduction=cfg.ca_reduction, rng=rng)
        else:
            self.ssm_def = None
            self.deform = None
        self.out_proj = LinearW(inner, width, rng)

    def __call__(self, x: Tensor, capture: dict | None = None) -> Tensor:
        H, W = x.shape[-3], x.shape[-2]
        if (H, W) != (self.h, self.w):
            raise DimensionError(f"mixer built for {self.h}x{self.w}, got {H}x{W}")
        n = H * W
        z = self.in_proj(x)
        z = ops.silu(ops.depthwise_conv2d(z, self.dw_w, self.dw_b, stride=1, pad=1))
        flat = ops.reshape(z, z.shape[:-3] + (n, z.shape[-1]))

        total = None

        def accumulate(seq_out: Tensor) -> None:
            nonlocal total
            total = seq_out if total is None else ops.add(total, seq_out)

        if self.ssm_fwd is not None:
            accumulate(ssm_apply(flat, self.ssm_fwd, self.chunk, self.euler))
            rev = fixed_order("raster_reversed", H, W)
            seq = ops.permute_rows(flat, rev.order, rev.inverse)
            y = ssm_apply(seq, self.ssm_bwd, self.chunk, self.euler)
            accumulate(ops.permute_rows(y, rev.inverse, rev.order))
        if self.ssm_fixed is not None:
            fo = self._fixed_order
            seq = ops.permute_rows(flat, fo.order, fo.inverse)
            y = ssm_apply(seq, self.ssm_fixed, self.chunk, self.euler)
            accumulate(ops.permute_rows(y, fo.inverse, fo.order))
        if self.ssm_def is not None:
            seq, order = deformable_scan(z, self.deform)
            y = ssm_apply(seq, self.ssm_def, self.chunk, self.euler)
            restored = unflatten_by_order(y, order, H, W)
            y_flat = ops.reshape(restored, restored.shape[:-3] + (n, restored.shape[-1]))
            accumulate(y_flat)
            if capture is not None:
                capture["order"] = order
                capture["grid"] = self.deform.grid.p.data
                capture["shape"] = (H, W)
                capture["branch_def"] = y_flat.data
                if self.deform.net is not None:
                    raw = self.deform.net(z)
                    from .deform import squash_split_normalize
                    fld = squash_split_normalize(raw, H, W)
                    capture["dp"] = fld.dp.data
                    capture["dt"] = fld.dt.data

        gate = ops.silu(self.gate_proj(x))
        gated = ops.mul(ops.reshape(total, z.shape), gate)
        return self.out_proj(gated)


class DmBlock(Module):
    """Residual block: x + mixer(LN(x)); x + FFN(LN(x))."""

    def __init__(self, width: int, H: int, W: int, kernel: int,
                 cfg: ModelConfig, rng):
        self.ln1 = LayerNormW(width)
        self.mixer = Dssm(width, H, W, kernel, cfg, rng)
        self.ln2 = LayerNormW(width)
        hidden = cfg.ffn_ratio * width
        self.ffn1 = LinearW(width, hidden, rng)
        self.ffn2 = LinearW(hidden, width, rng)

    def __call__(self, x: Tensor, capture: dict | None = None) -> Tensor:
        x = ops.add(x, self.mixer(self.ln1(x), capture=capture))
        return ops.add(x, self.ffn2(ops.gelu(self.ffn1(self.ln2(x)))))


class Backbone(Module):
    """Patch embed -> 4 stages (blocks + downsample) -> pooled linear head."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        widths = cfg.stage_widths
        self.patch_embed = PatchEmbed(widths[0], rng)
        side = cfg.input_size // 4
        self.stages: list[list[DmBlock]] = []
        self.downsamples: list[Downsample] = []
        for i in range(4):
            blocks = [DmBlock(widths[i], side, side, cfg.offset_kernels[i], cfg, rng)
                      for _ in range(cfg.stage_depths[i])]
            self.stages.append(blocks)
            if i < 3:
                if widths[i + 1] != 2 * widths[i]:
                    raise ConfigurationError(
                        f"stage widths must double: {widths[i]} -> {widths[i + 1]}"
                    )
                self.downsamples.append(Downsample(widths[i], rng))
                side //= 2
        self.head = LinearW(widths[3], cfg.num_classes, rng)

    def __call__(self, img: Tensor, capture: list | None = None) -> Tensor:
        H, W = img.shape[-3], img.shape[-2]
        if H != self.cfg.input_size or W != self.cfg.input_size:
            raise ConfigurationError(
                f"model built for {self.cfg.input_size}^2 input, got {H}x{W}"
            )
        x = self.patch_embed(img)
        for i, blocks in enumerate(self.stages):
            for j, block in enumerate(blocks):
                cap = None
                if capture is not None:
                    cap = {"stage": i, "block": j}
                    capture.append(cap)
                x = block(x, capture=cap)
            if i < 3:
                x = self.downsamples[i](x)
        pooled = ops.global_avg_pool(x)
        return self.head(pooled)


def build_model(cfg: ModelConfig, seed: int = 0) -> Backbone:
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    model = Backbone(cfg, rng)
    model.finalize_names()
    return model


def count_params(model: Module) -> int:
    """Exact count of learnable scalars."""
    return sum(p.size for p in model.parameters())


def stage_resolutions(cfg: ModelConfig) -> list[int]:
    """Per-stage feature side lengths: input / 4, 8, 16, 32."""
    return [cfg.input_size // (4 * 2 ** i) for i in range(4)]
