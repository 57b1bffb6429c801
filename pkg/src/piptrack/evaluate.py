"""Trajectory metrics, reference baselines and overlay rendering."""
from __future__ import annotations

import colorsys
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data.io import fmt_float
from .data.synthetic import SyntheticSample, sample_field


@dataclass
class EvalReport:
    ate_visible: float | None
    ate_occluded: float | None
    errors: np.ndarray  # per-trajectory mean distance [N]
    visible: np.ndarray  # per-trajectory split membership [N]
    pck_per_video: list[float] = field(default_factory=list)

    @property
    def n_visible(self) -> int:
        return int(self.visible.sum())

    @property
    def n_occluded(self) -> int:
        return int((~self.visible).sum())

    def to_json(self) -> str:
        """Canonical metric JSON; absent splits are null."""
        def num(v):
            return "null" if v is None else fmt_float(v)

        parts = [f'"ate_visible":{num(self.ate_visible)}', f'"ate_occluded":{num(self.ate_occluded)}',
                 f'"n_visible":{self.n_visible}', f'"n_occluded":{self.n_occluded}']
        if self.pck_per_video:
            parts.append('"pck_per_video":[' + ",".join(fmt_float(p) for p in self.pck_per_video) + "]")
        return "{" + ",".join(parts) + "}\n"


def trajectory_errors(pred, gt) -> np.ndarray:
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    return np.linalg.norm(pred - gt, axis=-1).mean(axis=-1)


def eval_ate(pred, gt, vis) -> EvalReport:
    """Mean per-trajectory distance, split by whether at least half the timesteps are visible."""
    errors = trajectory_errors(pred, gt)
    vis = np.asarray(vis, dtype=np.float64)
    T = vis.shape[-1]
    visible = vis.sum(axis=-1) >= T / 2
    ate_v = float(errors[visible].mean()) if visible.any() else None
    ate_o = float(errors[~visible].mean()) if (~visible).any() else None
    return EvalReport(ate_v, ate_o, errors, visible)


def pck_threshold(area) -> np.ndarray:
    return 0.2 * np.sqrt(np.asarray(area, dtype=np.float64))


def eval_pck(pred, gt, area, valid=None) -> float:
    """Fraction of annotated points predicted within 0.2*sqrt(area) of the truth.

    ``area`` broadcasts against the leading axes of ``gt`` (typically one value per frame).
    """
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    thr = np.broadcast_to(pck_threshold(area), gt.shape[:-1])
    valid = np.ones(gt.shape[:-1], dtype=bool) if valid is None else np.asarray(valid).astype(bool)
    if np.any(np.broadcast_to(np.asarray(area), gt.shape[:-1])[valid] <= 0):
        raise ValueError("area must be positive wherever ground truth is annotated")
    if not valid.any():
        raise ValueError("no annotated points to score")
    dist = np.linalg.norm(pred - gt, axis=-1)
    return float(np.mean(dist[valid] <= thr[valid]))


def baseline_zero_velocity(queries, T: int) -> np.ndarray:
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
    return np.repeat(q[:, None], T, axis=1)


def baseline_gt_flow_chain(sample: SyntheticSample, queries) -> np.ndarray:
    """Chain the ground-truth forward flow from each query, clamping to the image."""
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
    H, W = sample.size
    out = np.zeros((len(q), sample.T, 2))
    p = q.copy()
    out[:, 0] = p
    for t in range(sample.T - 1):
        p = p + sample_field(sample.fwd_flow[t], p)
        p[:, 0] = np.clip(p[:, 0], 0, W - 1)
        p[:, 1] = np.clip(p[:, 1], 0, H - 1)
        out[:, t + 1] = p
    return out


# ---------------------------------------------------------------------------
# held-out comparison


Tracker = Callable[[np.ndarray, np.ndarray], np.ndarray]  # (frames [T,3,H,W], queries [N,2]) -> [N,T,2]


@dataclass
class HeldOutResult:
    model: EvalReport
    zero_velocity: EvalReport
    flow_chain: EvalReport

    def summary(self) -> dict:
        return {name: {"ate_visible": r.ate_visible, "ate_occluded": r.ate_occluded,
                       "n_visible": r.n_visible, "n_occluded": r.n_occluded}
                for name, r in (("model", self.model), ("zero_velocity", self.zero_velocity),
                                ("flow_chain", self.flow_chain))}


def evaluate_held_out(tracker: Tracker, samples, queries_fn: Callable[[SyntheticSample, int], np.ndarray]) -> HeldOutResult:
    """Score a tracker and both baselines on the same queries of every sample."""
    preds, zeros, chains, gts, viss = [], [], [], [], []
    for i, s in enumerate(samples):
        idx = queries_fn(s, i)
        gt = s.trajs[idx].astype(np.float64)
        q = gt[:, 0]
        preds.append(tracker(s.frames, q))
        zeros.append(baseline_zero_velocity(q, s.T))
        chains.append(baseline_gt_flow_chain(s, q))
        gts.append(gt)
        viss.append(s.vis[idx])
    gt, vis = np.concatenate(gts), np.concatenate(viss)
    return HeldOutResult(eval_ate(np.concatenate(preds), gt, vis), eval_ate(np.concatenate(zeros), gt, vis),
                         eval_ate(np.concatenate(chains), gt, vis))


# ---------------------------------------------------------------------------
# overlays


def _track_colors(n: int) -> np.ndarray:
    return np.array([colorsys.hsv_to_rgb((i * 0.618034) % 1.0, 0.85, 1.0) for i in range(n)])


def _draw_segment(img: np.ndarray, a, b, color) -> None:
    _, H, W = img.shape
    steps = int(np.ceil(max(abs(b[0] - a[0]), abs(b[1] - a[1]), 1.0))) * 2 + 1
    s = np.linspace(0.0, 1.0, steps)
    x = np.rint(a[0] + (b[0] - a[0]) * s).astype(int)
    y = np.rint(a[1] + (b[1] - a[1]) * s).astype(int)
    ok = (x >= 0) & (x < W) & (y >= 0) & (y < H)
    img[:, y[ok], x[ok]] = np.asarray(color)[:, None]


def render_overlay(frames, pred, gt=None) -> np.ndarray:
    """Trajectories drawn over the dimmed mean frame -> [3, H, W].

    Predictions get one hue per track; ground truth, when given, is white.
    """
    frames = np.asarray(frames, dtype=np.float64)
    img = 0.6 * frames.mean(axis=0)
    pred = np.asarray(pred, dtype=np.float64)
    if gt is not None:
        for tr in np.asarray(gt, dtype=np.float64):
            for a, b in zip(tr[:-1], tr[1:]):
                _draw_segment(img, a, b, (1.0, 1.0, 1.0))
    for tr, c in zip(pred, _track_colors(len(pred))):
        for a, b in zip(tr[:-1], tr[1:]):
            _draw_segment(img, a, b, c)
    return np.clip(img, 0.0, 1.0)


def report_from_files(pred_records: list[dict], gt: dict, mode: str) -> EvalReport:
    """Align parsed track records with a gt.json dict and score them."""
    trajs = np.asarray(gt["trajs"], dtype=np.float64)
    vis = np.asarray(gt["vis"], dtype=np.float64)
    N, T = trajs.shape[:2]
    pred = np.full((N, T, 2), np.nan)
    seen = set()
    for r in pred_records:
        if "error" in r:
            continue
        q, t = int(r["q"]), int(r["t"])
        if q < N and t < T:
            pred[q, t] = (r["x"], r["y"])
            seen.add(q)
    gt_ids, pred_ids = set(range(N)), {int(r["q"]) for r in pred_records if "error" not in r}
    missing = sorted(gt_ids - seen)
    extra = sorted(pred_ids - gt_ids)
    if missing or extra:
        raise ValueError(f"track id mismatch: missing from predictions {missing}, not in ground truth {extra}")
    if np.isnan(pred).any():
        q, t = np.argwhere(np.isnan(pred[..., 0]))[0]
        raise ValueError(f"prediction for track {q} has no record at t={t}")
    if mode == "ate":
        return eval_ate(pred, trajs, vis)
    if mode == "pck":
        if "area" not in gt:
            raise ValueError("pck mode needs an 'area' entry (one value per frame) in the ground truth")
        area = np.asarray(gt["area"], dtype=np.float64)
        valid = np.asarray(gt.get("valid", gt["vis"])).astype(bool)
        area = np.broadcast_to(area, (N, T)) if area.ndim < 2 else area
        rep = eval_ate(pred, trajs, vis)
        rep.pck_per_video = [eval_pck(pred, trajs, area, valid)]
        return rep
    raise ValueError(f"unknown eval mode {mode!r} (expected ate or pck)")
