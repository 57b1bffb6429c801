"""On-disk formats: binary PPM/PGM frames and masks, .flo flow, gt.json tracks.

Sequence directory layout::

    frame_000.ppm ...            8-bit RGB frames
    flow_fwd_000.flo ...         forward flow, frame t -> t+1
    flow_bwd_000.flo ...         backward flow, frame t+1 -> t
    masks_000.pgm ...            instance ids (0 = background)
    gt.json                      {"trajs": N x T x 2, "vis": N x T}
"""
from __future__ import annotations

import json
import re
import struct
from pathlib import Path

import numpy as np

from .synthetic import SyntheticSample

FLO_MAGIC = 202021.25


def fmt_float(v) -> str:
    """Shortest decimal that round-trips the value as float32."""
    return np.format_float_positional(np.float32(v), unique=True, trim="0")


# -- netpbm -----------------------------------------------------------------


def _read_header(buf: bytes, magic: bytes) -> tuple[int, int, int, int]:
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated netpbm header")
        tokens.append(buf[start:pos])
    if tokens[0] != magic:
        raise ValueError(f"expected {magic.decode()} file, found {tokens[0][:2]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"only 8-bit netpbm is supported (maxval {maxval})")
    return w, h, maxval, pos + 1


def write_ppm(path, image: np.ndarray) -> None:
    """image [3, H, W] float in [0, 1]."""
    img = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    _, H, W = img.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (W, H) + img.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    W, H, _, pos = _read_header(buf, b"P6")
    data = np.frombuffer(buf, dtype=np.uint8, count=W * H * 3, offset=pos)
    return data.reshape(H, W, 3).transpose(2, 0, 1).astype(np.float32) / 255.0


def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.min(initial=0) < 0 or img.max(initial=0) > 255:
        raise ValueError("PGM values must fit in 8 bits")
    H, W = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (W, H) + img.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    W, H, _, pos = _read_header(buf, b"P5")
    return np.frombuffer(buf, dtype=np.uint8, count=W * H, offset=pos).reshape(H, W).astype(np.int32)


# -- flow -------------------------------------------------------------------


def write_flo(path, flow: np.ndarray) -> None:
    """flow [2, H, W] (x, y) pixels."""
    _, H, W = flow.shape
    body = np.asarray(flow, dtype="<f4").transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(struct.pack("<fii", FLO_MAGIC, W, H) + body)


def read_flo(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    magic, W, H = struct.unpack_from("<fii", buf, 0)
    if magic != FLO_MAGIC:
        raise ValueError(f"{path}: bad .flo magic {magic}")
    data = np.frombuffer(buf, dtype="<f4", count=W * H * 2, offset=12)
    return data.reshape(H, W, 2).transpose(2, 0, 1).astype(np.float32)


# -- tracks -----------------------------------------------------------------


def gt_to_json(trajs: np.ndarray, vis: np.ndarray, extra: dict | None = None) -> str:
    """Canonical gt.json text; floats use the float32 round-trip form."""
    tr = ",".join("[" + ",".join(f"[{fmt_float(x)},{fmt_float(y)}]" for x, y in t) + "]" for t in trajs)
    vs = ",".join("[" + ",".join(str(int(v)) for v in row) + "]" for row in vis)
    text = '{"trajs":[' + tr + '],"vis":[' + vs + "]"
    for k, v in (extra or {}).items():
        text += f',"{k}":' + json.dumps(v, sort_keys=True, separators=(",", ":"))
    return text + "}\n"


def read_gt(path) -> dict:
    data = json.loads(Path(path).read_text())
    if "trajs" not in data or "vis" not in data:
        raise ValueError(f"{path}: gt file needs 'trajs' and 'vis'")
    return data


# -- sequences --------------------------------------------------------------


def write_sequence(directory, sample: SyntheticSample) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for t in range(sample.T):
        write_ppm(d / f"frame_{t:03d}.ppm", sample.frames[t])
        write_pgm(d / f"masks_{t:03d}.pgm", sample.instance_ids[t])
    for t in range(sample.T - 1):
        write_flo(d / f"flow_fwd_{t:03d}.flo", sample.fwd_flow[t])
        write_flo(d / f"flow_bwd_{t:03d}.flo", sample.bwd_flow[t])
    (d / "gt.json").write_text(gt_to_json(sample.trajs.reshape(-1, sample.T, 2), sample.vis.reshape(-1, sample.T)))


def list_frames(directory) -> list[Path]:
    """PPM frames of a directory, checked to form one contiguous zero-padded index run."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"frame directory not found: {d}")
    found = []
    for p in d.iterdir():
        m = re.fullmatch(r"(.*?)(\d+)\.ppm", p.name)
        if m:
            found.append((m.group(1), m.group(2), p))
    if not found:
        raise ValueError(f"no .ppm frames in {d}")
    prefixes = {f[0] for f in found}
    widths = {len(f[1]) for f in found}
    if len(prefixes) != 1 or len(widths) != 1:
        raise ValueError(f"frames in {d} do not share one prefix and zero-padded width")
    found.sort(key=lambda f: int(f[1]))
    idx = [int(f[1]) for f in found]
    if idx != list(range(idx[0], idx[0] + len(idx))):
        raise ValueError(f"frame indices in {d} are not contiguous")
    return [f[2] for f in found]


def read_frames(directory) -> np.ndarray:
    frames = [read_ppm(p) for p in list_frames(directory)]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise ValueError(f"frames in {directory} differ in size: {sorted(shapes)}")
    return np.stack(frames)


def read_sequence(directory) -> SyntheticSample:
    d = Path(directory)
    frames = read_frames(d)
    T = len(frames)
    ids = np.stack([read_pgm(d / f"masks_{t:03d}.pgm") for t in range(T)])
    fwd = np.stack([read_flo(d / f"flow_fwd_{t:03d}.flo") for t in range(T - 1)])
    bwd = np.stack([read_flo(d / f"flow_bwd_{t:03d}.flo") for t in range(T - 1)])
    gt = read_gt(d / "gt.json")
    trajs = np.asarray(gt["trajs"], dtype=np.float32).reshape(-1, T, 2)
    vis = np.asarray(gt["vis"], dtype=np.float32).reshape(-1, T)
    H, W = frames.shape[-2:]
    xi = np.clip(np.rint(trajs[:, 0, 0]), 0, W - 1).astype(np.int64)
    yi = np.clip(np.rint(trajs[:, 0, 1]), 0, H - 1).astype(np.int64)
    track_ids = ids[0][yi, xi].astype(np.int32)
    return SyntheticSample(frames, fwd, bwd, ids, trajs, vis, track_ids)
