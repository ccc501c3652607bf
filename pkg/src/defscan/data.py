"""Synthetic image classification data whose labels live in spatial structure.

shapes8: an L or a T glyph drawn in one of the four quadrants of a 32x32
canvas, 8 classes total (glyph kind x quadrant).  Stroke geometry, color and
background noise are randomized per sample; the label is recomputable from
the stored generation parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InputError

IMAGE_SIZE = 32
NUM_CLASSES = 8
KINDS = ("L", "T")
QUADRANTS = ((0, 0), (0, 16), (16, 0), (16, 16))  # (row, col) origins


@dataclass
class SynthSample:
    image: np.ndarray  # [32, 32, 3] float64 in [0, 1]
    label: int
    params: dict


def label_from_params(params: dict) -> int:
    return KINDS.index(params["kind"]) * 4 + params["quadrant"]


def _draw_glyph(canvas: np.ndarray, params: dict) -> None:
    oy, ox = QUADRANTS[params["quadrant"]]
    y0 = oy + params["jy"]
    x0 = ox + params["jx"]
    arm = params["arm"]
    t = params["thickness"]
    color = params["color"]
    if params["kind"] == "L":
        canvas[y0:y0 + arm, x0:x0 + t] = color            # vertical stroke
        canvas[y0 + arm - t:y0 + arm, x0:x0 + arm] = color  # bottom bar
    else:
        canvas[y0:y0 + t, x0:x0 + arm] = color            # top bar
        mid = x0 + (arm - t) // 2
        canvas[y0:y0 + arm, mid:mid + t] = color          # center stem


def synth_dataset(kind: str, n: int, seed: int) -> list[SynthSample]:
    """Deterministic dataset for a fixed (kind, n, seed).

    Classes are assigned round-robin, so the class histogram is exactly
    balanced whenever n is a multiple of 8.
    """
    if kind != "shapes8":
        raise ConfigurationError(f"unknown dataset kind: {kind!r}")
    if n < 1:
        raise InputError(f"dataset size must be >= 1, got {n}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    samples = []
    for i in range(n):
        label = i % NUM_CLASSES
        params = {
            "kind": KINDS[label // 4],
            "quadrant": label % 4,
            "arm": int(rng.integers(9, 13)),
            "thickness": int(rng.integers(2, 4)),
            "jy": int(rng.integers(0, 4)),
            "jx": int(rng.integers(0, 4)),
            "color": rng.uniform(0.6, 1.0, 3),
        }
        canvas = rng.uniform(0.0, 0.25, (IMAGE_SIZE, IMAGE_SIZE, 3))
        _draw_glyph(canvas, params)
        samples.append(SynthSample(image=canvas, label=label, params=params))
    return samples


def batch_images(samples: list[SynthSample], indices: np.ndarray) -> np.ndarray:
    return np.stack([samples[i].image for i in indices])


def batch_labels(samples: list[SynthSample], indices: np.ndarray) -> np.ndarray:
    return np.array([samples[i].label for i in indices], dtype=np.int64)
