"""Token scan orders: permutations mapping a 2-D lattice to a 1-D sequence."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError, InputError

FIXED_SCAN_KINDS = ("raster", "raster_reversed", "local_window", "continuous")


def _inverse_of(order: np.ndarray) -> np.ndarray:
    n = order.shape[-1]
    inv = np.empty_like(order)
    np.put_along_axis(inv, order, np.broadcast_to(np.arange(n), order.shape), axis=-1)
    return inv


@dataclass
class ScanOrder:
    """A permutation of token indices and its inverse.

    ``order[i]`` is the token placed at sequence position i;
    ``inverse[j]`` is the sequence position of token j.  Shape is (N,) for a
    single image or (..., N) for a batch of per-sample orders.
    """

    order: np.ndarray
    inverse: np.ndarray

    @classmethod
    def from_order(cls, order: np.ndarray) -> "ScanOrder":
        order = np.asarray(order, dtype=np.int64)
        return cls(order=order, inverse=_inverse_of(order))

    @property
    def n_tokens(self) -> int:
        return self.order.shape[-1]

    def validate(self) -> None:
        n = self.n_tokens
        flat = self.order.reshape(-1, n)
        if not (np.sort(flat, axis=-1) == np.arange(n)).all():
            raise InputError("order is not a permutation")
        if not (np.take_along_axis(self.inverse.reshape(-1, n), flat, axis=-1)
                == np.arange(n)).all():
            raise InputError("inverse does not invert order")


def identity_order(n: int) -> ScanOrder:
    idx = np.arange(n, dtype=np.int64)
    return ScanOrder(order=idx, inverse=idx.copy())


def raster_order(H: int, W: int) -> ScanOrder:
    return identity_order(H * W)


def raster_reversed_order(H: int, W: int) -> ScanOrder:
    order = np.arange(H * W - 1, -1, -1, dtype=np.int64)
    return ScanOrder(order=order, inverse=order.copy())


def continuous_order(H: int, W: int) -> ScanOrder:
    """Boustrophedon: rows alternate direction so every step is a neighbor."""
    grid = np.arange(H * W, dtype=np.int64).reshape(H, W)
    rows = [grid[i] if i % 2 == 0 else grid[i, ::-1] for i in range(H)]
    return ScanOrder.from_order(np.concatenate(rows))


def local_window_order(H: int, W: int, w: int) -> ScanOrder:
    """Row-major over w x w windows, row-major within each window."""
    if w < 1:
        raise ConfigurationError(f"window must be >= 1, got {w}")
    if H % w or W % w:
        raise ConfigurationError(f"window {w} does not divide grid {H}x{W}")
    grid = np.arange(H * W, dtype=np.int64).reshape(H, W)
    blocks = []
    for bi in range(H // w):
        for bj in range(W // w):
            blocks.append(grid[bi * w:(bi + 1) * w, bj * w:(bj + 1) * w].ravel())
    return ScanOrder.from_order(np.concatenate(blocks))


def fixed_order(kind: str, H: int, W: int, window: int = 2) -> ScanOrder:
    if H < 1 or W < 1:
        raise ConfigurationError(f"grid must be at least 1x1, got {H}x{W}")
    if kind == "raster":
        return raster_order(H, W)
    if kind == "raster_reversed":
        return raster_reversed_order(H, W)
    if kind == "continuous":
        return continuous_order(H, W)
    if kind == "local_window":
        return local_window_order(H, W, window)
    raise ConfigurationError(f"unknown scan kind: {kind!r}")


def adjacency_retention(order: ScanOrder | np.ndarray, H: int, W: int) -> float:
    """Fraction of consecutive sequence pairs that are 4-neighbors on the lattice."""
    arr = order.order if isinstance(order, ScanOrder) else np.asarray(order)
    if arr.ndim != 1:
        raise DimensionError("adjacency_retention expects a single order")
    if arr.shape[0] != H * W:
        raise DimensionError(f"order length {arr.shape[0]} != {H}x{W}")
    ScanOrder.from_order(arr).validate()
    if arr.shape[0] < 2:
        return 1.0
    r, c = arr // W, arr % W
    manhattan = np.abs(np.diff(r)) + np.abs(np.diff(c))
    return float((manhattan == 1).mean())
