"""Command line: ``piptrack generate|train|track|eval``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import weights
from .config import ConfigError, read_json
from .data.io import fmt_float, read_frames, read_gt, write_ppm, write_sequence
from .evaluate import render_overlay, report_from_files
from .model import PIPs, track_video
from .train import (DataConfig, SampleSource, TrainingDiverged, load_model, load_train_config,
                    read_sidecar, train)

GENERATE_DEFAULT = {"augment": None}


class CLIError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(message)


# -- generate ---------------------------------------------------------------


def cmd_generate(args) -> None:
    raw = GENERATE_DEFAULT if args.config is None else read_json(args.config)
    if not isinstance(raw, dict):
        raise ConfigError("generate config must be a JSON object")
    raw = {**GENERATE_DEFAULT, **raw}
    data = DataConfig.from_json(raw)
    if data.dataset is not None:
        raise ConfigError("generate config may not name a source dataset")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    source = SampleSource(data, seed=args.seed)
    names = []
    for i in range(args.count):
        name = f"seq_{i:04d}"
        sample = source(i)
        write_sequence(out / name, sample)
        queries = "[" + ",".join(f"[{fmt_float(x)},{fmt_float(y)}]" for x, y in sample.trajs[:, 0]) + "]\n"
        (out / name / "queries.json").write_text(queries)
        names.append(name)
    manifest = {"count": args.count, "seed": args.seed, "config": data.to_json(), "sequences": names}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# -- train ------------------------------------------------------------------


def cmd_train(args) -> None:
    if args.resume is not None:
        meta = read_sidecar(args.resume)
        raw = {"model": meta["model"], "train": meta["train"], "data": meta.get("data", {})}
        if args.config is not None and load_train_config(read_json(args.config)) != load_train_config(raw):
            raise ConfigError("--config differs from the configuration stored with the --resume checkpoint")
    elif args.config is None:
        raise ConfigError("train needs --config (or --resume)")
    else:
        raw = read_json(args.config)
    mcfg, tcfg, data = load_train_config(raw)
    if args.seed is not None and args.resume is None:
        tcfg = type(tcfg)(**{**tcfg.__dict__, "seed": args.seed})
    model = PIPs(mcfg, seed=tcfg.seed)
    start, opt_state = 0, None
    if args.resume is not None:
        model.load_state_dict(weights.load(args.resume))
        start = int(meta["step"])
        if "optimizer" not in meta:
            raise ConfigError(f"{args.resume} carries no optimizer state and cannot be resumed")
        opt_state = weights.load(Path(args.resume).parent / meta["optimizer"])
    source = SampleSource(data, seed=tcfg.seed)
    out = Path(args.out)
    result = train(model, source, tcfg, out_dir=out, start_step=start, opt_state=opt_state, data=data,
                   stop_step=args.until)
    logging.getLogger(__name__).info("stopped at step %d", result.final_step)


# -- track ------------------------------------------------------------------


def _pad_to_stride(frames: np.ndarray, stride: int) -> np.ndarray:
    H, W = frames.shape[-2:]
    ph, pw = (-H) % stride, (-W) % stride
    if ph or pw:
        frames = np.pad(frames, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    return frames


def _read_queries(path) -> np.ndarray:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"query file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from None
    q = np.asarray(raw, dtype=np.float64)
    if q.size == 0:
        return q.reshape(0, 2)
    if q.ndim != 2 or q.shape[1] != 2:
        raise ValueError(f"{path}: expected a JSON array of [x, y] pairs")
    return q


def _error_line(q: int, message: str) -> str:
    return json.dumps({"q": int(q), "error": message}, separators=(",", ":"))


def track_records(model: PIPs, frames: np.ndarray, queries: np.ndarray, stride: int) -> list[str]:
    """Canonical JSON-lines for every query; out-of-image queries get an error record."""
    H, W = frames.shape[-2:]
    ok = np.isfinite(queries).all(axis=1) & (queries[:, 0] >= 0) & (queries[:, 0] <= W - 1) \
        & (queries[:, 1] >= 0) & (queries[:, 1] <= H - 1)
    good = np.nonzero(ok)[0]
    res = track_video(model, _pad_to_stride(frames, stride), queries[good], stride) if good.size else None
    row = {int(q): j for j, q in enumerate(good)}
    lines = []
    for q in range(len(queries)):
        if not ok[q]:
            x, y = queries[q]
            lines.append(_error_line(q, f"query ({x}, {y}) lies outside the {W}x{H} frame"))
            continue
        j = row[q]
        for t in range(frames.shape[0]):
            x, y = res.positions[j, t]
            v = res.visibility[j, t]
            lines.append(f'{{"q":{q},"t":{t},"x":{fmt_float(x)},"y":{fmt_float(y)},"v":{fmt_float(v)}}}')
    return lines


def cmd_track(args) -> None:
    if args.weights is None or args.frames is None or args.queries is None:
        raise CLIError("track needs --weights, --frames and --queries")
    model, _ = load_model(args.weights)
    if args.window is not None and args.window != model.cfg.T:
        raise ConfigError(f"--window {args.window} does not match the model's window length {model.cfg.T}")
    stride = args.stride or model.cfg.stride
    frames = read_frames(args.frames)
    queries = _read_queries(args.queries)
    text = "".join(line + "\n" for line in track_records(model, frames, queries, stride))
    _emit(text, args.out)


def read_track_records(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    try:
        return [json.loads(line) for line in lines if line.strip()]
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not JSON-lines ({exc})") from None


def canonical_track_line(rec: dict) -> str:
    if "error" in rec:
        return _error_line(rec["q"], rec["error"])
    return (f'{{"q":{int(rec["q"])},"t":{int(rec["t"])},"x":{fmt_float(rec["x"])},"y":{fmt_float(rec["y"])},'
            f'"v":{fmt_float(rec["v"])}}}')


# -- eval -------------------------------------------------------------------


def cmd_eval(args) -> None:
    if args.pred is None or args.gt is None:
        raise CLIError("eval needs --pred and --gt")
    records = read_track_records(args.pred)
    gt = read_gt(args.gt)
    report = report_from_files(records, gt, args.mode)
    _emit(report.to_json(), args.out)
    if args.overlay is not None:
        if args.frames is None:
            raise CLIError("--overlay needs --frames")
        frames = read_frames(args.frames)
        T = frames.shape[0]
        pred = np.zeros((len(gt["trajs"]), T, 2))
        for r in records:
            if "error" not in r and r["t"] < T:
                pred[r["q"], r["t"]] = (r["x"], r["y"])
        write_ppm(args.overlay, render_overlay(frames, pred, np.asarray(gt["trajs"], dtype=np.float64)))


def _emit(text: str, out) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)


# -- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="piptrack", description="Multi-frame point tracking.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="render a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=1)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint .pipw to continue from")
    t.add_argument("--until", type=int, help="stop after this step (the schedule still spans train.steps)")

    k = sub.add_parser("track", help="track query points through a frame directory")
    k.add_argument("--weights")
    k.add_argument("--frames")
    k.add_argument("--queries")
    k.add_argument("--out")
    k.add_argument("--stride", type=int, choices=(4, 8))
    k.add_argument("--window", type=int)

    e = sub.add_parser("eval", help="score predicted tracks against ground truth")
    e.add_argument("--pred")
    e.add_argument("--gt")
    e.add_argument("--mode", choices=("ate", "pck"), default="ate")
    e.add_argument("--out")
    e.add_argument("--overlay", help="write a PPM of the trajectories over the mean frame")
    e.add_argument("--frames")
    return p


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "track": cmd_track, "eval": cmd_eval}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if getattr(args, "count", 0) is not None and getattr(args, "count", 0) < 0:
            raise CLIError("--count must be >= 0")
        COMMANDS[args.command](args)
    except (CLIError, ConfigError, ValueError, OSError, KeyError, TrainingDiverged) as exc:
        msg = str(exc) if not isinstance(exc, KeyError) else f"missing entry {exc}"
        sys.stderr.write("error: " + " ".join(msg.split()) + "\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
