"""Scan-path visualization as binary Portable PixMap (P6) files.

Two artifact kinds: a points overlay (reference points, displaced points and
the segments between them) and scan-order maps where each token's rank is
rendered on a yellow-to-green ramp (rank 0 pure yellow, last rank pure
green, linear in between).
"""

from __future__ import annotations

import os

import numpy as np

from .checkpoint import load_checkpoint, load_into_model
from .config import parse_config
from .data import synth_dataset
from .errors import FormatError, InputError
from .model import build_model
from .scan_orders import ScanOrder
from .tensor import Tensor

YELLOW = np.array([255, 255, 0], dtype=np.float64)
GREEN = np.array([0, 255, 0], dtype=np.float64)
POINT_REF = np.array([40, 200, 40], dtype=np.uint8)
POINT_DEF = np.array([255, 150, 30], dtype=np.uint8)
SEGMENT = np.array([230, 40, 40], dtype=np.uint8)


# ---------------------------------------------------------------------------
# PPM io
# ---------------------------------------------------------------------------

def write_ppm(path: str, img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise InputError(f"write_ppm expects uint8 [H, W, 3], got {img.shape} {img.dtype}")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path: str) -> np.ndarray:
    """Read a binary P6 file into float64 [H, W, 3] in [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P6"):
        raise FormatError(f"not a P6 file: {path}")
    # header = magic, width, height, maxval; whitespace/comment separated
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(t) for t in tokens)
    need = w * h * 3
    raw = blob[pos:pos + need]
    if len(raw) != need:
        raise FormatError(f"P6 pixel data truncated: {len(raw)} of {need} bytes")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float64).reshape(h, w, 3) / maxval


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def rank_color(rank: int, n: int) -> np.ndarray:
    frac = 0.0 if n <= 1 else rank / (n - 1)
    return np.rint(YELLOW + (GREEN - YELLOW) * frac).astype(np.uint8)


def order_map_image(order: ScanOrder, H: int, W: int, scale: int = 16) -> np.ndarray:
    """Per-token rank as a color block: token j gets rank inverse[j]."""
    n = H * W
    if order.order.ndim != 1 or order.n_tokens != n:
        raise InputError(f"order length {order.n_tokens} != {H}x{W}")
    img = np.zeros((H * scale, W * scale, 3), dtype=np.uint8)
    for j in range(n):
        color = rank_color(int(order.inverse[j]), n)
        r, c = divmod(j, W)
        img[r * scale:(r + 1) * scale, c * scale:(c + 1) * scale] = color
    return img


def _draw_disc(img: np.ndarray, cy: float, cx: float, radius: int,
               color: np.ndarray) -> None:
    h, w = img.shape[:2]
    cy_i, cx_i = int(round(cy)), int(round(cx))
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy * dy + dx * dx <= radius * radius:
                y, x = cy_i + dy, cx_i + dx
                if 0 <= y < h and 0 <= x < w:
                    img[y, x] = color


def _draw_line(img: np.ndarray, y0: float, x0: float, y1: float, x1: float,
               color: np.ndarray) -> None:
    n = int(max(abs(y1 - y0), abs(x1 - x0)) * 2) + 1
    h, w = img.shape[:2]
    for t in np.linspace(0.0, 1.0, n):
        y = int(round(y0 + (y1 - y0) * t))
        x = int(round(x0 + (x1 - x0) * t))
        if 0 <= y < h and 0 <= x < w:
            img[y, x] = color


def points_overlay_image(image: np.ndarray, grid: np.ndarray, dp: np.ndarray,
                         scale: int = 16) -> np.ndarray:
    """Reference points (green), displaced points (orange), offsets (red).

    image: [Hi, Wi, 3] input rendered as backdrop; grid/dp: [H, W, 2]
    normalized coordinates with x horizontal, y vertical.
    """
    H, W = grid.shape[:2]
    ch, cw = H * scale, W * scale
    # nearest-neighbor upscale of the input as a dimmed grayscale backdrop
    gray = image.mean(axis=2)
    ry = (np.arange(ch) * image.shape[0] // ch).clip(0, image.shape[0] - 1)
    rx = (np.arange(cw) * image.shape[1] // cw).clip(0, image.shape[1] - 1)
    backdrop = (gray[np.ix_(ry, rx)] * 120).astype(np.uint8)
    img = np.stack([backdrop] * 3, axis=2)

    def to_canvas(norm_xy, axis_extent, canvas_extent):
        # align-corners: -1 -> first block center, +1 -> last block center
        if axis_extent == 1:
            return canvas_extent / 2.0
        pix = (norm_xy + 1.0) * 0.5 * (axis_extent - 1)
        return (pix + 0.5) * (canvas_extent / axis_extent)

    p_hat = grid + dp
    for i in range(H):
        for j in range(W):
            gy = to_canvas(grid[i, j, 1], H, ch)
            gx = to_canvas(grid[i, j, 0], W, cw)
            py = to_canvas(p_hat[i, j, 1], H, ch)
            px = to_canvas(p_hat[i, j, 0], W, cw)
            _draw_line(img, gy, gx, py, px, SEGMENT)
            _draw_disc(img, gy, gx, 2, POINT_REF)
            _draw_disc(img, py, px, 2, POINT_DEF)
    return img


# ---------------------------------------------------------------------------
# the scan-viz command
# ---------------------------------------------------------------------------

def load_input_image(spec: str, cfg) -> np.ndarray:
    """Resolve ``synth:<idx>`` against the config's dataset, or read a P6 file."""
    if spec.startswith("synth:"):
        try:
            idx = int(spec.split(":", 1)[1])
        except ValueError:
            raise InputError(f"bad synthetic index in {spec!r}")
        samples = synth_dataset(cfg.data.kind, cfg.data.train_n, cfg.data.seed)
        if not 0 <= idx < len(samples):
            raise InputError(f"synthetic index {idx} out of range [0, {len(samples)})")
        return samples[idx].image
    if not os.path.exists(spec):
        raise InputError(f"image file not found: {spec}")
    return read_ppm(spec)


def scan_viz(ckpt_path: str, image_spec: str, out_dir: str,
             scale: int = 16) -> list[str]:
    """Emit points.ppm, order_raster.ppm and order_deformable.ppm."""
    config_text, tensors = load_checkpoint(ckpt_path)
    cfg = parse_config(config_text)
    model = build_model(cfg.model, seed=cfg.train.seed)
    load_into_model(model, tensors)

    image = load_input_image(image_spec, cfg)
    if image.shape[:2] != (cfg.model.input_size, cfg.model.input_size):
        raise InputError(
            f"image {image.shape[:2]} incompatible with model input "
            f"{cfg.model.input_size}"
        )

    capture: list[dict] = []
    model(Tensor(image), capture=capture)
    record = next((c for c in capture if "order" in c), None)
    if record is None:
        raise InputError("model has no deformable branch to visualize")
    H, W = record["shape"]
    n = H * W

    os.makedirs(out_dir, exist_ok=True)
    paths = []

    dp = record.get("dp")
    if dp is None:
        dp = np.zeros((H, W, 2))
    overlay = points_overlay_image(image, record["grid"], dp, scale=scale)
    p = os.path.join(out_dir, "points.ppm")
    write_ppm(p, overlay)
    paths.append(p)

    raster = ScanOrder.from_order(np.arange(n))
    p = os.path.join(out_dir, "order_raster.ppm")
    write_ppm(p, order_map_image(raster, H, W, scale=scale))
    paths.append(p)

    p = os.path.join(out_dir, "order_deformable.ppm")
    write_ppm(p, order_map_image(record["order"], H, W, scale=scale))
    paths.append(p)
    return paths
