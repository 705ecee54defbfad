"""Differentiable operators over 5-D tensors (N, C, D, H, W).

The set is closed: it covers exactly what the dual-path network and its loss
use.  Each op computes its forward value eagerly and registers a closure
returning one gradient per parent.
"""

from __future__ import annotations

import numpy as np

from .._grid_ops import upsample2, upsample2_adjoint
from ..errors import OddDimension, ShapeMismatch
from . import kernels
from .tensor import Tensor, make_node

CE_FLOOR = 1e-12


def _check5(t: Tensor, op: str):
    if t.data.ndim != 5:
        raise ShapeMismatch(f"{op} expects a 5-D tensor, got shape {t.data.shape}")


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded, stride-1 cross-correlation with an odd cubic kernel."""
    _check5(x, "conv3d")
    w = weight.data
    if w.ndim != 5 or w.shape[1] != x.data.shape[1]:
        raise ShapeMismatch(f"weight {w.shape} does not match input channels {x.data.shape[1]}")
    k = w.shape[2]
    if k % 2 == 0 or w.shape[3] != k or w.shape[4] != k:
        raise ShapeMismatch(f"kernel must be cubic with odd size, got {w.shape[2:]}")
    b = None if bias is None else bias.data.reshape(-1)
    if b is not None and b.shape[0] != w.shape[0]:
        raise ShapeMismatch(f"bias length {b.shape[0]} != output channels {w.shape[0]}")
    out = kernels.conv3d_forward(x.data, w, b)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        gx, gw, gb = kernels.conv3d_backward(x.data, w, g, need_input_grad=x.requires_grad)
        if bias is None:
            return gx, gw
        return gx, gw, gb.reshape(bias.data.shape)

    return make_node(out, parents, backward_fn, "conv3d")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.data.dtype)
    return make_node(out, (x,), lambda g: (g * mask,), "relu", pattern=mask)


def max_pool3d(x: Tensor) -> Tensor:
    """2x2x2 window, stride 2; ties go to the first voxel in (z, y, x) order."""
    _check5(x, "max_pool3d")
    n, c, d, h, w = x.data.shape
    if d % 2 or h % 2 or w % 2:
        raise OddDimension(f"max_pool3d needs even spatial dims, got {(d, h, w)}")
    blocks = (
        x.data.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 6, 3, 5, 7)
        .reshape(n, c, d // 2, h // 2, w // 2, 8)
    )
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = (
            gb.reshape(n, c, d // 2, h // 2, w // 2, 2, 2, 2)
            .transpose(0, 1, 2, 5, 3, 6, 4, 7)
            .reshape(n, c, d, h, w)
        )
        return (gx,)

    return make_node(out, (x,), backward_fn, "max_pool3d", pattern=arg.astype(np.uint8))


def upsample_trilinear(x: Tensor) -> Tensor:
    """x2 trilinear upsampling, half-voxel aligned, edges clamped."""
    _check5(x, "upsample_trilinear")
    out = upsample2(x.data)
    return make_node(out, (x,), lambda g: (upsample2_adjoint(g),), "upsample_trilinear")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check5(a, "concat_channels")
    _check5(b, "concat_channels")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise ShapeMismatch(f"cannot concat {a.data.shape} with {b.data.shape}")
    ca = a.data.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return make_node(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]), "concat_channels")


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per (sample, channel) standardization over the spatial axes."""
    _check5(x, "instance_norm")
    axes = (2, 3, 4)
    data = x.data
    mean = data.mean(axis=axes, keepdims=True, dtype=np.float64)
    centred = data - mean
    var = np.mean(centred * centred, axis=axes, keepdims=True, dtype=np.float64)
    inv_std = 1.0 / np.sqrt(var + eps)
    y = (centred * inv_std).astype(data.dtype)

    def backward_fn(g):
        gm = g.mean(axis=axes, keepdims=True, dtype=np.float64)
        gym = np.mean(g * y, axis=axes, keepdims=True, dtype=np.float64)
        gx = inv_std * (g - gm - y * gym)
        return (gx.astype(data.dtype),)

    return make_node(y, (x,), backward_fn, "instance_norm")


def softmax_channels(x: Tensor) -> Tensor:
    _check5(x, "softmax_channels")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True, dtype=np.float64)
    s = s.astype(x.data.dtype)

    def backward_fn(g):
        dot = (g * s).sum(axis=1, keepdims=True, dtype=np.float64)
        return ((s * (g - dot)).astype(x.data.dtype),)

    return make_node(s, (x,), backward_fn, "softmax_channels")


def dice_ce_loss(probs: Tensor, target: np.ndarray, weights=None, smooth: float = 1.0) -> Tensor:
    """(1 - weighted mean foreground soft Dice) + weighted mean voxel cross-entropy.

    ``target`` is a one-hot array shaped like ``probs``; class 0 is background
    and is excluded from the Dice term.  Unit weights give the plain formula.
    """
    p = probs.data
    t = np.asarray(target)
    if t.shape != p.shape:
        raise ShapeMismatch(f"target {t.shape} != probs {p.shape}")
    c = p.shape[1]
    w = np.ones(c) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (c,):
        raise ShapeMismatch(f"need {c} class weights, got {w.shape}")
    axes = (0, 2, 3, 4)
    inter = (p * t).sum(axis=axes, dtype=np.float64)
    psum = p.sum(axis=axes, dtype=np.float64)
    tsum = t.sum(axis=axes, dtype=np.float64)
    denom = psum + tsum + smooth
    dice = (2.0 * inter + smooth) / denom
    fg_w = w[1:]
    dice_term = 1.0 - float((fg_w * dice[1:]).sum() / fg_w.sum())

    n_vox = p.size // c
    safe = np.maximum(p, CE_FLOOR)
    wb = w.reshape(1, c, 1, 1, 1)
    ce = -float((wb * t * np.log(safe)).sum(dtype=np.float64)) / n_vox
    loss = np.asarray(dice_term + ce, dtype=p.dtype)

    def backward_fn(g):
        g = float(g)
        coef = np.zeros(c)
        coef[1:] = fg_w / fg_w.sum()
        # d(dice_c)/dp = (2t * denom - (2 inter + smooth)) / denom^2
        a = (coef * 2.0 / denom).reshape(1, c, 1, 1, 1)
        bterm = (coef * (2.0 * inter + smooth) / denom**2).reshape(1, c, 1, 1, 1)
        gd = -(a * t - bterm)
        gce = np.where(p > CE_FLOOR, -wb * t / safe, 0.0) / n_vox
        return ((g * (gd + gce)).astype(p.dtype),)

    return make_node(loss, (probs,), backward_fn, "dice_ce_loss")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"cannot add {a.data.shape} and {b.data.shape}")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def scale(a: Tensor, factor: float) -> Tensor:
    return make_node(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def total(a: Tensor) -> Tensor:
    """Sum of every element, as a 0-D tensor."""
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=a.data.dtype)
    return make_node(out, (a,), lambda g: (np.full(a.data.shape, g, dtype=a.data.dtype),), "total")


def soft_dice_scores(probs: np.ndarray, target: np.ndarray, smooth: float = 1.0) -> np.ndarray:
    """Per-class soft Dice (no graph), for monitoring."""
    axes = (0, 2, 3, 4)
    inter = (probs * target).sum(axis=axes, dtype=np.float64)
    return (2 * inter + smooth) / (probs.sum(axis=axes, dtype=np.float64) + target.sum(axis=axes, dtype=np.float64) + smooth)
