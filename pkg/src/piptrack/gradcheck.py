"""Central finite-difference gradient checks, evaluated in float64."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad, precision


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference, relative to the larger of the two gradient magnitudes."""
    scale = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def numeric_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], which: int, step: float) -> np.ndarray:
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[which]
    grad = np.zeros_like(target)
    flat, gflat = target.reshape(-1), grad.reshape(-1)
    with precision(np.float64), no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(fn(*[Tensor(a) for a in base]).data)
            flat[i] = orig - step
            lo = float(fn(*[Tensor(a) for a in base]).data)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
    return grad


def check_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], step: float = 1e-3,
                    wrt: Sequence[int] | None = None) -> float:
    """Worst relative error between backprop and finite differences over ``wrt`` inputs."""
    wrt = range(len(arrays)) if wrt is None else wrt
    with precision(np.float64):
        ts = [Tensor(np.array(a, dtype=np.float64), requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
        out = fn(*ts)
        out.backward()
    worst = 0.0
    for i in wrt:
        analytic = ts[i].grad if ts[i].grad is not None else np.zeros_like(ts[i].data)
        worst = max(worst, relative_error(analytic, numeric_grad(fn, arrays, i, step)))
    return worst
