"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, activation_pattern


def relative_error(analytic: float, numeric: float, floor: float = 1e-7) -> float:
    scale = max(abs(analytic), abs(numeric))
    if scale < floor:
        return abs(analytic - numeric)
    return abs(analytic - numeric) / scale


def _evaluate(loss_fn):
    out = loss_fn()
    if isinstance(out, Tensor):
        return out.item(), activation_pattern(out)
    return float(out), None


def numeric_grad(loss_fn, array: np.ndarray, index, h: float = 1e-4):
    """Central difference of ``loss_fn`` w.r.t. ``array[index]``.

    Returns ``(derivative, smooth)``; ``smooth`` is False when the two probes
    land on different branches of a relu / max-pool (only detectable when
    ``loss_fn`` returns a graph Tensor).
    """
    old = array[index]
    array[index] = old + h
    up, pat_up = _evaluate(loss_fn)
    array[index] = old - h
    down, pat_down = _evaluate(loss_fn)
    array[index] = old
    return (up - down) / (2.0 * h), pat_up == pat_down


def check_gradients(loss_fn, arrays: dict, analytic: dict, h: float = 1e-4,
                    max_entries: int | None = None, rng=None, report: list | None = None) -> float:
    """Largest relative error between ``analytic[name]`` and central differences.

    ``loss_fn`` re-runs the forward pass reading the (mutated in place)
    ``arrays``.  With ``max_entries`` that many random entries per array are
    probed; probes whose +h / -h evaluations straddle a kink are redrawn.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    for name, arr in arrays.items():
        if max_entries is None or arr.size <= max_entries:
            candidates = list(range(arr.size))
            want = arr.size
        else:
            candidates = [int(i) for i in rng.permutation(arr.size)]
            want = max_entries
        done = 0
        for flat in candidates:
            if done == want:
                break
            idx = np.unravel_index(flat, arr.shape)
            num, smooth = numeric_grad(loss_fn, arr, idx, h)
            if not smooth and want < arr.size:
                continue
            err = relative_error(float(analytic[name][idx]), num)
            if report is not None:
                report.append((name, idx, float(analytic[name][idx]), num, err, smooth))
            worst = max(worst, err)
            done += 1
    return worst
