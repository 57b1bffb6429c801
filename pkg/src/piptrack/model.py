"""The multi-frame point tracker.

Each target starts from a zero-velocity trajectory and a tiled copy of its
first-frame feature. K rounds then look up local correlation pyramids at
the current positions and let an MLP-Mixer over the time axis emit
additive updates for positions and features. A linear layer on the final
features gives per-frame visibility.

Weight names, in file order: ``encoder.*``, ``mixer.*``, ``heads.*``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .config import ModelConfig
from .encoder import Encoder, FeatureMaps, encode_frames
from .nn import LayerNorm, Linear, Module
from .tensor import Tensor


@dataclass
class CorrPyramidSeq:
    scores: Tensor  # [..., T, P*P*L]
    level0: Tensor  # [..., T, P*P]
    centers: np.ndarray  # [..., T, 2] image pixels


@dataclass
class ScorePatch:
    scores: Tensor  # [B, N, T, P*P] level-0 patch
    centers: np.ndarray  # [B, N, T, 2]


@dataclass
class TrackOutput:
    X_list: list[Tensor]  # K entries of [B, N, T, 2]
    F: Tensor  # [B, N, T, C]
    V: Tensor  # [B, N, T]
    score_history: list[ScorePatch]


class MixerBlock(Module):
    def __init__(self, T: int, dim: int, tok_hidden: int, ch_hidden: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.tok1 = Linear(T, tok_hidden, rng)
        self.tok2 = Linear(tok_hidden, T, rng)
        self.norm2 = LayerNorm(dim)
        self.ch1 = Linear(dim, ch_hidden, rng)
        self.ch2 = Linear(ch_hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        # token mixing runs along time, channel mixing along features
        y = self.norm1(x).transpose(0, 2, 1)
        y = self.tok2(tn.gelu(self.tok1(y))).transpose(0, 2, 1)
        x = x + y
        y = self.ch2(tn.gelu(self.ch1(self.norm2(x))))
        return x + y


class Mixer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        hid = cfg.mixer_hidden
        self.proj_in = Linear(cfg.token_dim, hid, rng)
        self.blocks = [
            MixerBlock(cfg.T, hid, max(1, round(cfg.T * cfg.token_expansion)),
                       max(1, round(hid * cfg.channel_expansion)), rng)
            for _ in range(cfg.mixer_depth)
        ]
        self.norm = LayerNorm(hid)

    def __call__(self, tokens: Tensor) -> Tensor:
        """tokens [G, T, D] -> pooled [G, hidden]."""
        x = self.proj_in(tokens)
        for block in self.blocks:
            x = block(x)
        return self.norm(x).mean(axis=1)


class Heads(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.delta = Linear(cfg.mixer_hidden, cfg.head_dim, rng)
        self.vis = Linear(cfg.C, 1, rng)


class PIPs(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(cfg, rng)
        self.mixer = Mixer(cfg, rng)
        self.heads = Heads(cfg, rng)
        self.cfg = cfg

    def features(self, video: Tensor, stride: int | None = None) -> FeatureMaps:
        return encode_frames(self.encoder, video, self.cfg, stride)

    def __call__(self, video: Tensor, queries: np.ndarray, stride: int | None = None) -> TrackOutput:
        """video [B, T, 3, H, W], queries [B, N, 2] (frame-0 pixels)."""
        fm = self.features(video, stride)
        return iterate(self, fm, queries, image_size=video.shape[-2:])


# ---------------------------------------------------------------------------
# per-target stages


def _check_bounds(queries: np.ndarray, image_size: Sequence[int]) -> None:
    H, W = image_size
    x, y = queries[..., 0], queries[..., 1]
    bad = (x < 0) | (x > W - 1) | (y < 0) | (y > H - 1) | ~np.isfinite(x) | ~np.isfinite(y)
    if np.any(bad):
        first = tuple(np.argwhere(bad)[0])
        raise ValueError(f"query {first} at {queries[first].tolist()} lies outside the {W}x{H} image")


def init_targets(fm: FeatureMaps, queries: np.ndarray, T: int, image_size: Sequence[int] | None = None,
                 f1: Tensor | None = None) -> tuple[np.ndarray, Tensor, Tensor]:
    """Zero-velocity positions and tiled first-frame features.

    fm.feats is [B, T, C, h, w] and queries [B, N, 2]. Returns X0 [B, N, T, 2],
    F0 [B, N, T, C] and the sampled query feature f1 [B, N, C].
    """
    feats = fm.feats
    B, _, C, h, w = feats.shape
    queries = np.asarray(queries, dtype=np.float64)
    if image_size is None:
        image_size = (h * fm.stride, w * fm.stride)
    if f1 is None:
        _check_bounds(queries, image_size)
        f1 = tn.bilinear_sample(feats[:, 0], Tensor(queries / fm.stride))
    N = queries.shape[1]
    F0 = tn.broadcast_to(f1.reshape(B, N, 1, C), (B, N, T, C))
    X0 = np.repeat(queries[:, :, None, :], T, axis=2)
    return X0, F0, f1


def init_target(fm: FeatureMaps, query, image_size: Sequence[int] | None = None) -> tuple[np.ndarray, Tensor]:
    """Single-target form: fm.feats [T, C, h, w], query (x, y) -> (X0 [T, 2], F0 [T, C])."""
    T = fm.feats.shape[0]
    batched = FeatureMaps(fm.feats.reshape(1, *fm.feats.shape), fm.stride)
    X0, F0, _ = init_targets(batched, np.asarray(query, dtype=np.float64).reshape(1, 1, 2), T, image_size)
    return X0[0, 0], F0.reshape(T, -1)


def patch_offsets(radius: int) -> np.ndarray:
    """[P*P, 2] (dx, dy) offsets, row-major over dy then dx."""
    r = np.arange(-radius, radius + 1, dtype=np.float64)
    dy, dx = np.meshgrid(r, r, indexing="ij")
    return np.stack([dx.ravel(), dy.ravel()], axis=-1)


def corr_pyramid(fm: FeatureMaps, F: Tensor, X: np.ndarray, cfg: ModelConfig) -> CorrPyramidSeq:
    """Local multi-scale correlation patches around each position.

    fm.feats [B, T, C, h, w], F [B, N, T, C], X [B, N, T, 2] -> scores [B, N, T, P*P*L].
    """
    feats = fm.feats
    B, T, C, h, w = feats.shape
    N = F.shape[1]
    fmat = feats.reshape(B, T, C, h * w)
    corr = tn.matmul(F.transpose(0, 2, 1, 3), fmat) * (1.0 / math.sqrt(C))  # [B, T, N, hw]
    cmap = corr.reshape(B, T, N, h, w).transpose(0, 2, 1, 3, 4).reshape(B * N * T, 1, h, w)
    centers = np.asarray(X, dtype=np.float64)
    base = centers.reshape(B * N * T, 1, 2) / fm.stride
    offs = patch_offsets(cfg.radius)[None]
    PP = cfg.P * cfg.P
    levels = []
    for lvl in range(cfg.L):
        if lvl:
            cmap = tn.avg_pool2(cmap)
        pts = Tensor(base / 2**lvl + offs)
        levels.append(tn.bilinear_sample(cmap, pts).reshape(B, N, T, PP))
    scores = levels[0] if cfg.L == 1 else tn.concat(levels, axis=-1)
    return CorrPyramidSeq(scores=scores, level0=levels[0], centers=centers)


def encode_displacements(X: np.ndarray, query: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Sinusoidal encoding of X - query: [..., T, 2] -> [..., T, 4 * enc_freqs].

    Channel layout: sin(x f), cos(x f), sin(y f), cos(y f) for f = 2^i pi / S.
    """
    d = np.asarray(X, dtype=np.float64) - np.asarray(query, dtype=np.float64)[..., None, :]
    freqs = (2.0 ** np.arange(cfg.enc_freqs)) * math.pi / cfg.enc_scale
    parts = []
    for axis in range(2):
        ang = d[..., axis : axis + 1] * freqs
        parts += [np.sin(ang), np.cos(ang)]
    return np.concatenate(parts, axis=-1)


def mixer_update(model: PIPs, F: Tensor, corr: Tensor, disp, cfg: ModelConfig | None = None) -> tuple[Tensor, Tensor]:
    """Token = concat(F[t], corr[t], disp[t]); returns (dX [..., T, 2], dF [..., T, C])."""
    cfg = model.cfg if cfg is None else cfg
    lead = F.shape[:-2]
    T = F.shape[-2]
    tokens = tn.concat([F, corr, tn.as_tensor(disp)], axis=-1)
    tokens = tokens.reshape(-1, T, tokens.shape[-1])
    pooled = model.mixer(tokens)
    out = model.heads.delta(pooled).reshape(*lead, T, cfg.C + 2)
    return out[..., cfg.C :], out[..., : cfg.C]


def iterate(model: PIPs, fm: FeatureMaps, queries: np.ndarray, f1: Tensor | None = None,
            image_size: Sequence[int] | None = None, X0: np.ndarray | None = None) -> TrackOutput:
    """K refinement rounds for every target in the batch.

    Positions are detached before each correlation lookup, so the gradient of
    X^k only reaches the k-th update.
    """
    cfg = model.cfg
    queries = np.asarray(queries, dtype=np.float64)
    T = fm.feats.shape[1]
    Xinit, F, _ = init_targets(fm, queries, T, image_size, f1=f1)
    coords = Xinit if X0 is None else np.asarray(X0, dtype=np.float64)
    X_list, history = [], []
    for _ in range(cfg.K):
        corr = corr_pyramid(fm, F, coords, cfg)
        history.append(ScorePatch(corr.level0, corr.centers))
        disp = encode_displacements(coords, queries, cfg)
        dX, dF = mixer_update(model, F, corr.scores, disp, cfg)
        F = F + dF
        X = Tensor(coords) + dX
        X_list.append(X)
        coords = X.data.astype(np.float64)
    V = tn.sigmoid(model.heads.vis(F)).reshape(*F.shape[:-1])
    return TrackOutput(X_list=X_list, F=F, V=V, score_history=history)


# ---------------------------------------------------------------------------
# long-video linking


def select_restart(vis, threshold: float = 0.99, step: float = 0.01) -> int:
    """Latest window index >= 1 whose visibility clears a descending threshold."""
    vis = np.asarray(vis, dtype=np.float64)
    if vis.size < 2:
        raise ValueError("need at least two timesteps to choose a restart")
    i = 0
    while True:
        thr = round(threshold - i * step, 10)
        ok = np.nonzero(vis[1:] >= thr)[0]
        if ok.size:
            return int(ok[-1]) + 1
        i += 1


@dataclass
class LinkResult:
    positions: np.ndarray  # [N, S, 2]
    visibility: np.ndarray  # [N, S]
    starts: list[list[int]]  # window start frames per query


WindowFn = Callable[[int, np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


def link_trajectories(window_fn: WindowFn, num_frames: int, queries, T: int) -> LinkResult:
    """Chain T-frame windows over a longer video.

    ``window_fn(t0, ids, xy)`` tracks queries ``ids`` starting at frame t0
    from positions ``xy`` [M, 2] and returns (X [M, T, 2], V [M, T]) for
    frames t0 .. t0+T-1. Later windows overwrite overlapping frames.
    """
    if num_frames < T:
        raise ValueError(f"video has {num_frames} frames, fewer than the window length {T}")
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
    N = len(queries)
    pos = np.zeros((N, num_frames, 2))
    vis = np.zeros((N, num_frames))
    t0 = np.zeros(N, dtype=np.int64)
    cur = queries.copy()
    active = np.ones(N, dtype=bool)
    starts: list[list[int]] = [[] for _ in range(N)]
    while active.any():
        for start in sorted(set(t0[active].tolist())):
            ids = np.nonzero(active & (t0 == start))[0]
            X, V = window_fn(start, ids, cur[ids])
            n = min(T, num_frames - start)
            for j, q in enumerate(ids):
                starts[q].append(start)
                pos[q, start : start + n] = X[j, :n]
                vis[q, start : start + n] = V[j, :n]
                if start + T >= num_frames:
                    active[q] = False
                    continue
                r = select_restart(V[j])
                t0[q] = start + r
                cur[q] = X[j, r]
    return LinkResult(pos, vis, starts)


def model_window_fn(model: PIPs, frame_feats: Tensor, query_feats: Tensor, stride: int,
                    image_size: Sequence[int]) -> WindowFn:
    """Window tracker over precomputed per-frame features [S, C, h, w].

    Every window reuses each query's original feature f1 [N, C]; windows that
    run past the last frame repeat it.
    """
    T = model.cfg.T
    S = frame_feats.shape[0]

    def run(t0: int, ids: np.ndarray, xy: np.ndarray):
        idx = np.minimum(np.arange(t0, t0 + T), S - 1)
        fm = FeatureMaps(Tensor(frame_feats.data[idx][None]), stride)
        f1 = Tensor(query_feats.data[ids][None])
        with tn.no_grad():
            out = iterate(model, fm, xy[None], f1=f1, image_size=image_size)
        return out.X_list[-1].data[0].astype(np.float64), out.V.data[0].astype(np.float64)

    return run


def track_video(model: PIPs, frames: np.ndarray, queries, stride: int | None = None) -> LinkResult:
    """Track queries through frames [S, 3, H, W] in [0, 1] with window linking."""
    stride = model.cfg.stride if stride is None else stride
    frames = np.asarray(frames, dtype=np.float32)
    H, W = frames.shape[-2:]
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
    _check_bounds(queries, (H, W))
    with tn.no_grad():
        feats = model.features(Tensor(frames), stride).feats  # [S, C, h, w]
        f1 = tn.bilinear_sample(feats[0:1], Tensor(queries[None] / stride))[0]
    fn = model_window_fn(model, feats, f1, stride, (H, W))
    return link_trajectories(fn, frames.shape[0], queries, model.cfg.T)
