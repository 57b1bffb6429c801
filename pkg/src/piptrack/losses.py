"""Training objectives: trajectory regression, visibility, and score-map peaking."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as tn
from .config import ModelConfig
from .model import ScorePatch
from .tensor import Tensor


def iteration_weights(K: int, gamma: float) -> np.ndarray:
    """gamma^(K-k) for k = 1..K."""
    return np.array([gamma ** (K - k) for k in range(1, K + 1)])


def loss_main(X_list: Sequence[Tensor], Xstar, gamma: float = 0.8) -> Tensor:
    """Decayed L1 over all iterations, averaged over timesteps and coordinates.

    Occluded and out-of-bounds timesteps are supervised too.
    """
    if not X_list:
        raise ValueError("loss_main needs at least one iterate")
    Xstar = np.asarray(Xstar)
    total = None
    for X, w in zip(X_list, iteration_weights(len(X_list), gamma)):
        if X.shape != Xstar.shape:
            raise tn.ShapeError(f"loss_main: prediction shape {X.shape} != target shape {Xstar.shape}")
        term = tn.tabs(X - Xstar).mean() * float(w)
        total = term if total is None else total + term
    return total


def loss_visibility(V: Tensor, Vstar, eps: float = 1e-6) -> Tensor:
    """Mean binary cross-entropy with V clamped to [eps, 1 - eps]."""
    Vstar = np.asarray(Vstar, dtype=np.float64)
    Vc = tn.clamp(tn.as_tensor(V), eps, 1.0 - eps)
    ll = tn.log(Vc) * Vstar + tn.log(1.0 - Vc) * (1.0 - Vstar)
    return -ll.mean()


def _score_targets(centers: np.ndarray, Xstar: np.ndarray, Vstar: np.ndarray, radius: int, stride: int):
    d = (np.asarray(Xstar, dtype=np.float64) - centers) / stride
    inside = np.all(np.abs(d) <= radius + 1e-9, axis=-1)
    mask = (np.asarray(Vstar) == 1) & inside
    cell = np.clip(np.rint(d), -radius, radius).astype(np.int64) + radius
    P = 2 * radius + 1
    index = cell[..., 1] * P + cell[..., 0]
    return mask, index


def score_contributions(score_history: Sequence[ScorePatch], Xstar, Vstar, cfg: ModelConfig) -> int:
    """Number of (iteration, target, timestep) terms the score loss uses."""
    return int(sum(_score_targets(p.centers, Xstar, Vstar, cfg.radius, cfg.stride)[0].sum() for p in score_history))


def loss_score(score_history: Sequence[ScorePatch], Xstar, Vstar, cfg: ModelConfig) -> Tensor:
    """Softmax cross-entropy of each level-0 patch against the cell nearest the truth.

    Only visible timesteps whose true position lies inside the sampled patch
    contribute; the result is the mean over contributing terms, or zero.
    """
    total, count = None, 0
    for patch in score_history:
        mask, index = _score_targets(patch.centers, Xstar, Vstar, cfg.radius, cfg.stride)
        n = int(mask.sum())
        if n == 0:
            continue
        onehot = np.zeros(patch.scores.shape)
        np.put_along_axis(onehot, index[..., None], 1.0, axis=-1)
        onehot *= mask[..., None]
        term = (tn.log_softmax(patch.scores, axis=-1) * onehot).sum()
        total = term if total is None else total + term
        count += n
    if total is None:
        return Tensor(0.0)
    return total * (-1.0 / count)


def total_loss(parts: Sequence, weights: Sequence[float] = (1.0, 1.0, 1.0)) -> Tensor:
    """Weighted sum of (main, visibility, score) losses."""
    out = None
    for part, w in zip(parts, weights):
        term = tn.as_tensor(part) * float(w)
        out = term if out is None else out + term
    return out
