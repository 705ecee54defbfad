"""x2 resolution changes over the last three axes, shared by preprocessing and
the network graph."""

from __future__ import annotations

import numpy as np

from .errors import OddDimension


def downsample2(values: np.ndarray) -> np.ndarray:
    """Mean over non-overlapping 2x2x2 blocks."""
    *lead, d, h, w = values.shape
    if d % 2 or h % 2 or w % 2:
        raise OddDimension(f"dims {(d, h, w)} must be even to downsample")
    blocks = values.reshape(*lead, d // 2, 2, h // 2, 2, w // 2, 2)
    return blocks.mean(axis=(-5, -3, -1), dtype=np.float64).astype(values.dtype, copy=False)


def _up2_axis(a: np.ndarray, axis: int) -> np.ndarray:
    # half-pixel aligned linear interpolation, edges clamped
    a = np.moveaxis(a, axis, -1)
    out = np.empty(a.shape[:-1] + (2 * a.shape[-1],), dtype=a.dtype)
    prev = np.concatenate([a[..., :1], a[..., :-1]], axis=-1)
    nxt = np.concatenate([a[..., 1:], a[..., -1:]], axis=-1)
    out[..., 0::2] = 0.75 * a + 0.25 * prev
    out[..., 1::2] = 0.75 * a + 0.25 * nxt
    return np.moveaxis(out, -1, axis)


def _up2_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    ge, go = g[..., 0::2], g[..., 1::2]
    ga = 0.75 * (ge + go)
    ga[..., :-1] += 0.25 * ge[..., 1:]
    ga[..., 0] += 0.25 * ge[..., 0]
    ga[..., 1:] += 0.25 * go[..., :-1]
    ga[..., -1] += 0.25 * go[..., -1]
    return np.moveaxis(ga, -1, axis)


def upsample2(values: np.ndarray) -> np.ndarray:
    out = values
    for axis in (-3, -2, -1):
        out = _up2_axis(out, axis)
    return out


def upsample2_adjoint(grad: np.ndarray) -> np.ndarray:
    out = grad
    for axis in (-1, -2, -3):
        out = _up2_axis_adjoint(out, axis)
    return out
