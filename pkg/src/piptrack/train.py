"""Training: batch assembly, AdamW under a one-cycle schedule, checkpoints and logs."""
from __future__ import annotations

import json
import logging
import math
import queue
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import losses, weights
from .config import ConfigError, ModelConfig, TrainConfig, check_keys, from_dict, to_dict
from .data.io import read_sequence
from .data.synthetic import (AugmentPolicy, SpriteSceneConfig, SyntheticSample, augment, generate_sample,
                             in_bounds, paste_occluder)
from .model import PIPs
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Training hit a non-finite value; carries the step and the component losses seen there."""

    def __init__(self, step: int, losses: dict | None, detail: str = ""):
        self.step = step
        self.losses = dict(losses or {})
        shown = ", ".join(f"{k}={v:.6g}" for k, v in self.losses.items() if k.startswith("loss_")) or "unavailable"
        super().__init__(f"training diverged at step {step} (losses: {shown}){': ' + detail if detail else ''}")


# ---------------------------------------------------------------------------
# data


def eligible_tracks(sample: SyntheticSample) -> np.ndarray:
    H, W = sample.size
    if len(sample.trajs) == 0:
        return np.zeros(0, dtype=np.int64)
    ok = (sample.vis[:, 0] == 1) & in_bounds(sample.trajs[:, 0], H, W)
    return np.nonzero(ok)[0]


def sample_training_queries(sample: SyntheticSample, N: int, seed) -> np.ndarray:
    """N trajectory indices that start visible and in bounds.

    Drawn without replacement when enough are eligible, with replacement otherwise.
    """
    idx = eligible_tracks(sample)
    if idx.size == 0:
        raise ValueError("sequence has no trajectory that starts visible and in bounds")
    rng = np.random.default_rng(seed)
    if idx.size >= N:
        return np.sort(rng.choice(idx, size=N, replace=False))
    return np.sort(rng.choice(idx, size=N, replace=True))


@dataclass(frozen=True)
class DataConfig:
    """Where training sequences come from and how they are perturbed."""

    dataset: str | None = None  # directory written by ``piptrack generate``; None = render on the fly
    scene: SpriteSceneConfig = SpriteSceneConfig(height=80, width=120)
    augment: AugmentPolicy | None = AugmentPolicy()
    occluders: int = 1

    @classmethod
    def from_json(cls, data: dict | None) -> "DataConfig":
        data = dict(data or {})
        check_keys(data, {"dataset", "scene", "augment", "occluders"}, "data")
        scene = from_dict(SpriteSceneConfig, data.get("scene"), "data.scene")
        aug = data.get("augment", {})
        policy = None if aug is None else from_dict(AugmentPolicy, aug, "data.augment")
        return cls(dataset=data.get("dataset"), scene=scene, augment=policy, occluders=int(data.get("occluders", 1)))

    def to_json(self) -> dict:
        return {"dataset": self.dataset, "scene": to_dict(self.scene),
                "augment": None if self.augment is None else to_dict(self.augment), "occluders": self.occluders}


def _seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0])


class SampleSource:
    """Deterministic indexed access to training sequences.

    Sample ``i`` depends only on (seed, split, i), so a resumed run sees
    exactly the data an uninterrupted run would have seen.
    """

    def __init__(self, data: DataConfig, seed: int, split: int = 0):
        self.data = data
        self.seed = seed
        self.split = split
        self.sequences: list[Path] = []
        if data.dataset is not None:
            root = Path(data.dataset)
            manifest = root / "manifest.json"
            if not manifest.exists():
                raise FileNotFoundError(f"dataset not found (no manifest.json in {root})")
            names = json.loads(manifest.read_text())["sequences"]
            if not names:
                raise ValueError(f"dataset {root} holds no sequences")
            self.sequences = [root / n for n in names]
            self._cache: dict[int, SyntheticSample] = {}

    def _base(self, rng: np.random.Generator) -> SyntheticSample:
        if self.sequences:
            k = int(rng.integers(len(self.sequences)))
            if k not in self._cache:
                self._cache[k] = read_sequence(self.sequences[k])
            return self._cache[k]
        return generate_sample(self.data.scene, seed=int(rng.integers(2**63)))

    def __call__(self, i: int) -> SyntheticSample:
        rng = np.random.default_rng(_seed(self.seed, self.split, i))
        for _ in range(100):
            out = self._base(rng)
            for _ in range(self.data.occluders):
                donor = self._base(rng)
                if (donor.instance_ids[0] > 0).any() and donor.size == out.size:
                    out = paste_occluder(out, donor, rng=rng)
            if self.data.augment is not None:
                out = augment(out, self.data.augment, int(rng.integers(2**63)))
            if eligible_tracks(out).size:
                return out
        raise RuntimeError("could not draw a sequence with an eligible trajectory in 100 attempts")


@dataclass
class Batch:
    frames: np.ndarray  # [B, T, 3, H, W]
    queries: np.ndarray  # [B, N, 2]
    trajs: np.ndarray  # [B, N, T, 2]
    vis: np.ndarray  # [B, N, T]


def make_batch(source: Callable[[int], SyntheticSample], step: int, tcfg: TrainConfig) -> Batch:
    frames, trajs, vis = [], [], []
    for b in range(tcfg.batch_size):
        i = step * tcfg.batch_size + b
        s = source(i)
        idx = sample_training_queries(s, tcfg.n_queries, _seed(tcfg.seed, 7, i))
        frames.append(s.frames)
        trajs.append(s.trajs[idx])
        vis.append(s.vis[idx])
    trajs_a = np.stack(trajs).astype(np.float64)
    return Batch(np.stack(frames), trajs_a[:, :, 0].copy(), trajs_a, np.stack(vis).astype(np.float64))


def batch_stream(source, start: int, stop: int, tcfg: TrainConfig, depth: int = 4) -> Iterator[tuple[int, Batch]]:
    """Assemble batches on a producer thread feeding a bounded queue."""
    q: queue.Queue = queue.Queue(maxsize=depth)
    halt = threading.Event()

    def produce():
        try:
            for step in range(start, stop):
                if halt.is_set():
                    return
                q.put((step, make_batch(source, step, tcfg)))
        except BaseException as exc:  # surfaced on the consumer side
            q.put(exc)
        q.put(None)

    worker = threading.Thread(target=produce, daemon=True)
    worker.start()
    try:
        while True:
            item = q.get()
            if item is None:
                return
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        halt.set()
        while worker.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                worker.join(timeout=0.05)


# ---------------------------------------------------------------------------
# optimization


def one_cycle_lr(step: int, tcfg: TrainConfig) -> float:
    """Cosine warm-up from lr*initial_frac to lr, then cosine decay to lr*final_frac."""
    peak = tcfg.lr
    lo, end = peak * tcfg.initial_frac, peak * tcfg.final_frac
    last = max(tcfg.steps - 1, 1)
    top = int(round(tcfg.warmup_frac * last))
    if tcfg.warmup_frac > 0:
        top = max(top, 1)  # keep step 0 at the initial rate on very short runs
    if step <= top:
        if top == 0:
            return peak
        frac = step / top
        return lo + (peak - lo) * 0.5 * (1 - math.cos(math.pi * frac))
    frac = min((step - top) / max(last - top, 1), 1.0)
    return end + (peak - end) * 0.5 * (1 + math.cos(math.pi * frac))


class AdamW:
    """Adam with decoupled weight decay over a model's named parameters."""

    def __init__(self, params: dict[str, Tensor], tcfg: TrainConfig):
        self.params = params
        self.cfg = tcfg
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1 - c.beta1**self.t
        bc2 = 1 - c.beta2**self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            if c.weight_decay:
                p.data *= np.float32(1 - lr * c.weight_decay)
            p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)).astype(p.data.dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        out["adam.t"] = np.array([self.t], dtype=np.float32)
        return out

    def load(self, state: dict[str, np.ndarray]) -> None:
        for k in self.params:
            self.m[k] = np.array(state[f"adam.m.{k}"], dtype=np.float32)
            self.v[k] = np.array(state[f"adam.v.{k}"], dtype=np.float32)
        self.t = int(state["adam.t"][0])


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params.values() if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = np.float32(max_norm / (total + 1e-6))
        for g in grads:
            g *= scale
    return total


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: Path, model: PIPs, mcfg: ModelConfig, tcfg: TrainConfig, step: int,
                    opt: AdamW | None = None, data: DataConfig | None = None) -> None:
    """``path`` is the .pipw weight file; a .json sidecar holds the configs."""
    path = Path(path)
    weights.save(path, model.state_dict())
    meta = {"model": to_dict(mcfg), "train": to_dict(tcfg), "step": step}
    if data is not None:
        meta["data"] = data.to_json()
    if opt is not None:
        opt_path = path.with_suffix(".opt.pipw")
        weights.save(opt_path, opt.state())
        meta["optimizer"] = opt_path.name
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_sidecar(path: Path) -> dict:
    side = Path(path).with_suffix(".json")
    if not side.exists():
        raise FileNotFoundError(f"missing config sidecar {side}")
    return json.loads(side.read_text())


def load_model(path: Path) -> tuple[PIPs, dict]:
    meta = read_sidecar(path)
    mcfg = from_dict(ModelConfig, meta["model"], "model")
    model = PIPs(mcfg)
    model.load_state_dict(weights.load(path))
    return model, meta


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    model: PIPs
    history: list[dict]  # one row per step: step, loss_main, loss_ce, loss_score, lr
    final_step: int


def train_step(model: PIPs, batch: Batch, tcfg: TrainConfig) -> tuple[Tensor, dict]:
    cfg = model.cfg
    out = model(Tensor(batch.frames), batch.queries)
    l_main = losses.loss_main(out.X_list, batch.trajs, cfg.gamma)
    l_ce = losses.loss_visibility(out.V, batch.vis)
    l_score = losses.loss_score(out.score_history, batch.trajs, batch.vis, cfg)
    total = losses.total_loss([l_main, l_ce, l_score], tcfg.loss_weights)
    parts = {"loss_main": l_main.item(), "loss_ce": l_ce.item(), "loss_score": l_score.item(),
             "score_terms": losses.score_contributions(out.score_history, batch.trajs, batch.vis, cfg)}
    return total, parts


def train(model: PIPs, source: Callable[[int], SyntheticSample], tcfg: TrainConfig, out_dir: Path | None = None,
          start_step: int = 0, opt_state: dict | None = None, data: DataConfig | None = None,
          stop_step: int | None = None) -> TrainResult:
    """Run steps [start_step, stop_step) of a ``tcfg.steps``-long schedule."""
    params = dict(model.named_parameters())
    opt = AdamW(params, tcfg)
    if opt_state is not None:
        opt.load(opt_state)
    stop = tcfg.steps if stop_step is None else min(stop_step, tcfg.steps)
    log_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "log.csv"
        new = not log_path.exists()
        log_file = log_path.open("a")
        if new:
            log_file.write("step,loss_main,loss_ce,loss_score,lr\n")
    history = []
    step, parts = start_step, None
    try:
        for step, batch in batch_stream(source, start_step, stop, tcfg):
            lr = one_cycle_lr(step, tcfg)
            parts = None
            total, parts = train_step(model, batch, tcfg)
            if not math.isfinite(total.item()):
                raise TrainingDiverged(step, parts, "non-finite loss")
            model.zero_grad()
            total.backward()
            clip_grad_norm(params, tcfg.clip_norm)
            opt.step(lr)
            row = {"step": step, **parts, "lr": lr}
            history.append(row)
            if log_file is not None:
                log_file.write(f"{step},{parts['loss_main']:.6g},{parts['loss_ce']:.6g},{parts['loss_score']:.6g},{lr:.6g}\n")
                log_file.flush()
            if step % 100 == 0:
                log.info("step %d main %.3f ce %.3f score %.3f lr %.2e", step, parts["loss_main"],
                         parts["loss_ce"], parts["loss_score"], lr)
            done = step + 1
            if out_dir is not None and tcfg.checkpoint_every and done % tcfg.checkpoint_every == 0 and done < stop:
                save_checkpoint(out_dir / f"ckpt_{done:06d}.pipw", model, model.cfg, tcfg, done, opt, data)
        final = step + 1 if history else start_step
    except FloatingPointError as exc:
        raise TrainingDiverged(step, parts, str(exc)) from None
    finally:
        if log_file is not None:
            log_file.close()
    if out_dir is not None:
        save_checkpoint(out_dir / f"ckpt_{final:06d}.pipw", model, model.cfg, tcfg, final, opt, data)
        if final >= tcfg.steps:
            save_checkpoint(out_dir / "weights.pipw", model, model.cfg, tcfg, final, None, data)
    return TrainResult(model, history, final)


def load_train_config(raw: dict) -> tuple[ModelConfig, TrainConfig, DataConfig]:
    if not isinstance(raw, dict):
        raise ConfigError("training config must be a JSON object")
    check_keys(raw, {"model", "train", "data"})
    return (from_dict(ModelConfig, raw.get("model"), "model"), from_dict(TrainConfig, raw.get("train"), "train"),
            DataConfig.from_json(raw.get("data")))
