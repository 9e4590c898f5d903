"""Fixed 2-D sinusoidal position encodings."""
from __future__ import annotations

import functools

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .geometry import Window, cell_centers


def frequencies(channels: int) -> np.ndarray:
    """Per-axis angular frequencies, geometric from pi/2 up to 8*pi.

    The lowest band sin(pi/2 * u) is injective on [-1, 1], so every cell of a
    normalized grid gets a distinct code.
    """
    if channels < 4:
        raise ConfigError(f"position encoding needs at least 4 channels, got {channels}")
    n = channels // 4
    if n == 1:
        return np.array([np.pi / 2])
    return (np.pi / 2) * 16.0 ** (np.arange(n) / (n - 1))


def encode_points(pts, channels: int) -> T.Tensor:
    """Encode normalized points [N, 2] into [N, channels]; differentiable in ``pts``.

    Layout: sin(x f), cos(x f), sin(y f), cos(y f), zero padding.
    """
    pts = T.as_tensor(pts)
    f = frequencies(channels)[None, :]
    ax = T.matmul(pts[:, 0:1], T.Tensor(f))
    ay = T.matmul(pts[:, 1:2], T.Tensor(f))
    parts = [T.sin(ax), T.cos(ax), T.sin(ay), T.cos(ay)]
    pad = channels - 4 * f.shape[1]
    if pad:
        parts.append(T.Tensor(np.zeros((pts.shape[0], pad))))
    return T.concat(parts, axis=1)


@functools.lru_cache(maxsize=16)
def _grid_pe(window: tuple, resolution: float, channels: int) -> np.ndarray:
    win = Window(*window)
    cx, cy = win.center
    centers = cell_centers(win, resolution).reshape(-1, 2)
    norm = (centers - np.array([cx, cy])) / win.half_extent
    with T.no_grad():
        pe = encode_points(norm, channels).data
    h, w = cell_centers(win, resolution).shape[:2]
    pe = pe.reshape(h, w, channels)
    pe.setflags(write=False)
    return pe


def grid_position_embedding(window: Window, resolution: float, channels: int) -> np.ndarray:
    """Position embedding over cell centers, shape [H, W, C] (read-only, cached)."""
    return _grid_pe(tuple(float(v) for v in window), float(resolution), int(channels))
