"""Raw numpy kernels for same-padded stride-1 3-D convolution.

The padded input of each sample is viewed as a flat (C, Np) matrix.  A kernel
tap at offset (dz, dy, dx) then corresponds to a constant shift
``dz*Hp*Wp + dy*Wp + dx`` in flat index space, so every tap is one GEMM over
contiguous memory followed by a shifted accumulate.  Taps are processed in
blocks of one depth-plane (k*k taps) to bound the temporary's size; no im2col
buffer is ever built.
"""

from __future__ import annotations

import numpy as np


def _geometry(shape, k):
    d, h, w = shape
    p = k // 2
    dp, hp, wp = d + 2 * p, h + 2 * p, w + 2 * p
    offsets = [dz * hp * wp + dy * wp + dx for dz in range(k) for dy in range(k) for dx in range(k)]
    return p, (dp, hp, wp), offsets


def _pad_flat(x, p):
    # x: (C, D, H, W) -> (C, Np) zero padded
    if p == 0:
        return np.ascontiguousarray(x).reshape(x.shape[0], -1)
    c, d, h, w = x.shape
    xp = np.zeros((c, d + 2 * p, h + 2 * p, w + 2 * p), dtype=x.dtype)
    xp[:, p:p + d, p:p + h, p:p + w] = x
    return xp.reshape(c, -1)


def conv3d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None) -> np.ndarray:
    """x (N, Cin, D, H, W), weight (Cout, Cin, k, k, k) -> (N, Cout, D, H, W)."""
    n, cin, d, h, w = x.shape
    cout, _, k, _, _ = weight.shape
    p, (dp, hp, wp), offsets = _geometry((d, h, w), k)
    npad = dp * hp * wp
    # (k^3, Cout, Cin), tap order matches ``offsets``
    taps = weight.transpose(2, 3, 4, 0, 1).reshape(k**3, cout, cin)
    out = np.empty((n, cout, d, h, w), dtype=x.dtype)
    block = k * k
    for b in range(n):
        xf = _pad_flat(x[b], p)
        acc = np.zeros((cout, npad), dtype=x.dtype)
        for t0 in range(0, k**3, block):
            stacked = taps[t0:t0 + block].reshape(-1, cin)
            y = stacked @ xf  # (block*Cout, Np)
            for j, off in enumerate(offsets[t0:t0 + block]):
                acc[:, : npad - off] += y[j * cout:(j + 1) * cout, off:]
        out[b] = acc.reshape(cout, dp, hp, wp)[:, :d, :h, :w]
        if bias is not None:
            out[b] += bias.reshape(cout, 1, 1, 1)
    return out


def conv3d_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray,
                    need_input_grad: bool = True):
    """Gradients of conv3d_forward w.r.t. (x, weight, bias).

    Weight and bias gradients are accumulated over the batch; the bias
    gradient is reduced in float64.
    """
    n, cin, d, h, w = x.shape
    cout, _, k, _, _ = weight.shape
    p, (dp, hp, wp), offsets = _geometry((d, h, w), k)
    npad = dp * hp * wp
    taps = weight.transpose(2, 3, 4, 0, 1).reshape(k**3, cout, cin)
    gw_taps = np.zeros((k**3, cout, cin), dtype=np.float64)
    gx = np.empty_like(x) if need_input_grad else None
    block = k * k
    for b in range(n):
        xf = _pad_flat(x[b], p)
        g = np.zeros((cout, dp, hp, wp), dtype=x.dtype)
        g[:, :d, :h, :w] = grad_out[b]
        gf = g.reshape(cout, npad)
        for t, off in enumerate(offsets):
            gw_taps[t] += gf[:, : npad - off] @ xf[:, off:].T
        if need_input_grad:
            gxf = np.zeros((cin, npad), dtype=x.dtype)
            for t0 in range(0, k**3, block):
                stacked_t = taps[t0:t0 + block].transpose(0, 2, 1).reshape(-1, cout)
                z = stacked_t @ gf  # (block*Cin, Np)
                for j, off in enumerate(offsets[t0:t0 + block]):
                    gxf[:, off:] += z[j * cin:(j + 1) * cin, : npad - off]
            gx[b] = gxf.reshape(cin, dp, hp, wp)[:, p:p + d, p:p + h, p:p + w]
    gw = gw_taps.reshape(k, k, k, cout, cin).transpose(3, 4, 0, 1, 2).astype(weight.dtype)
    gb = grad_out.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(weight.dtype)
    return gx, gw, gb


def conv3d_reference(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None) -> np.ndarray:
    """Direct nested-loop convolution, float64; slow, used only as a test oracle."""
    n, cin, d, h, w = x.shape
    cout, _, k, _, _ = weight.shape
    p = k // 2
    xp = np.zeros((n, cin, d + 2 * p, h + 2 * p, w + 2 * p))
    xp[:, :, p:p + d, p:p + h, p:p + w] = x
    out = np.zeros((n, cout, d, h, w))
    for dz in range(k):
        for dy in range(k):
            for dx in range(k):
                patch = xp[:, :, dz:dz + d, dy:dy + h, dx:dx + w]
                out += np.einsum("oc,ncdhw->nodhw", weight[:, :, dz, dy, dx].astype(np.float64), patch)
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64).reshape(1, cout, 1, 1, 1)
    return out
