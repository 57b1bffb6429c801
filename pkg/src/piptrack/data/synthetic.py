"""Flying-sprites sequences with exact flow, mined trajectories and pasted occluders.

A scene is a panning textured background plus sprites that translate,
rotate and rescale smoothly. Every object carries a local-to-image affine
map per frame, so forward/backward flow and instance masks are exact.
Trajectories are mined by chaining the forward flow from a seed grid and
keeping chains that stay consistent, in bounds and on one instance.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

SHAPES = ("ellipse", "rectangle", "diamond")
TEXTURES = ("noise", "checker", "gradient")


@dataclass(frozen=True)
class SpriteSceneConfig:
    height: int = 64
    width: int = 96
    T: int = 8
    sprites: tuple[int, int] = (3, 6)
    size: tuple[float, float] = (12.0, 36.0)
    speed: tuple[float, float] = (0.0, 3.0)
    rotation: float = 0.04
    scale_drift: float = 0.02
    background_speed: float = 1.5
    texture: str = "mixed"
    grid_stride: int = 2
    fb_threshold: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("sprites", "size", "speed"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name}: empty or negative range ({lo}, {hi})")
            object.__setattr__(self, name, (type(lo)(lo), type(lo)(hi)))
        if self.texture not in TEXTURES + ("mixed",):
            raise ValueError(f"texture must be one of {TEXTURES + ('mixed',)}")
        if self.height < 4 or self.width < 4 or self.T < 2:
            raise ValueError("frames must be at least 4x4 and T >= 2")
        if max(self.speed[1], self.background_speed) * (self.T - 1) > max(self.height, self.width):
            raise ValueError("velocities too large: objects would cross the whole image within T frames")


# ---------------------------------------------------------------------------
# scene description


class Texture:
    """Periodic procedural color field over an object's local coordinates."""

    def __init__(self, rng: np.random.Generator, kind: str):
        self.kind = kind
        self.c1 = rng.uniform(0.05, 0.95, 3)
        self.c2 = rng.uniform(0.05, 0.95, 3)
        self.octaves = [(cell, rng.random((16, 16, 3)), amp)
                        for cell, amp in ((2.0, 0.35), (5.0, 0.3), (11.0, 0.3))]
        self.check = rng.uniform(4.0, 9.0)
        self.angle = rng.uniform(0, np.pi)
        self.wavelength = rng.uniform(8.0, 24.0)

    @staticmethod
    def _value_noise(grid: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        n = grid.shape[0]
        x0 = np.floor(u)
        y0 = np.floor(v)
        fx = (u - x0)[:, None]
        fy = (v - y0)[:, None]
        x0 = x0.astype(np.int64) % n
        y0 = y0.astype(np.int64) % n
        x1, y1 = (x0 + 1) % n, (y0 + 1) % n
        return ((1 - fx) * (1 - fy) * grid[y0, x0] + fx * (1 - fy) * grid[y0, x1]
                + (1 - fx) * fy * grid[y1, x0] + fx * fy * grid[y1, x1])

    def __call__(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        noise = sum(amp * (self._value_noise(g, u / cell, v / cell) - 0.5) for cell, g, amp in self.octaves)
        if self.kind == "checker":
            parity = (np.floor(u / self.check) + np.floor(v / self.check)) % 2
            base = np.where(parity[:, None] > 0, self.c1, self.c2)
            noise = noise * 0.5
        elif self.kind == "gradient":
            w = 0.5 + 0.5 * np.sin(2 * np.pi * (u * np.cos(self.angle) + v * np.sin(self.angle)) / self.wavelength)
            base = self.c1 + (self.c2 - self.c1) * w[:, None]
        else:
            base = 0.5 * (self.c1 + self.c2)
            noise = noise * 1.6
        return np.clip(base + noise, 0.0, 1.0)


@dataclass
class SceneObject:
    """One layer. ``matrices[t]`` maps local (u, v, 1) to image (x, y)."""

    shape: str  # "plane" for the background
    half_extent: tuple[float, float]
    matrices: np.ndarray  # [T, 2, 3]
    texture: Texture

    def inverse(self, t: int) -> np.ndarray:
        A = self.matrices[t]
        inv = np.linalg.inv(A[:, :2])
        return np.concatenate([inv, -(inv @ A[:, 2:])], axis=1)

    def contains(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        a, b = self.half_extent
        if self.shape == "plane":
            return np.ones(u.shape, dtype=bool)
        if self.shape == "ellipse":
            return (u / a) ** 2 + (v / b) ** 2 <= 1.0
        if self.shape == "rectangle":
            return (np.abs(u) <= a) & (np.abs(v) <= b)
        return np.abs(u) / a + np.abs(v) / b <= 1.0

    def move(self, pts: np.ndarray, t_from: int, t_to: int) -> np.ndarray:
        """Image points [M, 2] on frame t_from -> same material points on frame t_to."""
        return _apply(self.matrices[t_to], _apply(self.inverse(t_from), pts))

    def displacement(self, pts: np.ndarray, t_from: int, t_to: int) -> np.ndarray:
        """Same as ``move(pts) - pts`` but exactly zero for an unchanged transform."""
        return _apply(self.matrices[t_to] - self.matrices[t_from], _apply(self.inverse(t_from), pts))


TRACK_LATTICE = 2.0**-12


def snap(trajs: np.ndarray) -> np.ndarray:
    """Round positions to a 2^-12 px lattice stored as float32.

    On the lattice, flips and integer crops are exact in float32 for frames
    up to 4096 px, so geometric augmentations invert bit-exactly.
    """
    return (np.round(np.asarray(trajs, dtype=np.float64) / TRACK_LATTICE) * TRACK_LATTICE).astype(np.float32)


def _apply(A: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return pts @ A[:, :2].T + A[:, 2]


@dataclass
class Scene:
    objects: list[SceneObject]  # index == instance id; 0 is the background

    def trajectory(self, obj: int, seed_xy, T: int) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(seed_xy, dtype=np.float64))
        return np.stack([self.objects[obj].move(pts, 0, t) for t in range(T)], axis=1)


@dataclass
class SyntheticSample:
    frames: np.ndarray  # [T, 3, H, W] float32 in [0, 1]
    fwd_flow: np.ndarray  # [T-1, 2, H, W] float32, defined on frame t
    bwd_flow: np.ndarray  # [T-1, 2, H, W] float32, defined on frame t+1
    instance_ids: np.ndarray  # [T, H, W] int32, 0 = background
    trajs: np.ndarray = field(default_factory=lambda: np.zeros((0, 0, 2)))  # [N, T, 2]
    vis: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))  # [N, T]
    track_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int32))  # [N]
    scene: Scene | None = None

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return self.frames.shape[-2], self.frames.shape[-1]

    def replace(self, **changes) -> "SyntheticSample":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# rendering


def _affine(center, angle, scale) -> np.ndarray:
    c, s = np.cos(angle) * scale, np.sin(angle) * scale
    return np.array([[c, -s, center[0]], [s, c, center[1]]])


def build_scene(cfg: SpriteSceneConfig, rng: np.random.Generator) -> Scene:
    T, H, W = cfg.T, cfg.height, cfg.width
    kinds = TEXTURES if cfg.texture == "mixed" else (cfg.texture,)

    def velocity(lo, hi):
        speed = rng.uniform(lo, hi)
        ang = rng.uniform(0, 2 * np.pi)
        return speed * np.array([np.cos(ang), np.sin(ang)])

    bg_v = velocity(0.0, cfg.background_speed)
    bg_tex = Texture(rng, kinds[rng.integers(len(kinds))])
    bg = SceneObject("plane", (np.inf, np.inf),
                     np.stack([_affine(bg_v * t, 0.0, 1.0) for t in range(T)]), bg_tex)
    objects = [bg]
    n = int(rng.integers(cfg.sprites[0], cfg.sprites[1] + 1))
    for _ in range(n):
        shape = SHAPES[rng.integers(len(SHAPES))]
        half = (rng.uniform(*cfg.size) / 2, rng.uniform(*cfg.size) / 2)
        c0 = rng.uniform([0, 0], [W - 1, H - 1])
        v = velocity(*cfg.speed)
        th0 = rng.uniform(0, 2 * np.pi)
        w = rng.uniform(-cfg.rotation, cfg.rotation)
        ds = rng.uniform(-cfg.scale_drift, cfg.scale_drift)
        mats = np.stack([_affine(c0 + v * t, th0 + w * t, (1.0 + ds) ** t) for t in range(T)])
        objects.append(SceneObject(shape, half, mats, Texture(rng, kinds[rng.integers(len(kinds))])))
    return Scene(objects)


def render_scene(scene: Scene, T: int, H: int, W: int) -> SyntheticSample:
    ys, xs = np.mgrid[0:H, 0:W]
    grid = np.stack([xs.ravel(), ys.ravel()], axis=-1).astype(np.float64)
    frames = np.zeros((T, 3, H, W), dtype=np.float32)
    ids = np.zeros((T, H, W), dtype=np.int32)
    fwd = np.zeros((T - 1, 2, H, W), dtype=np.float32)
    bwd = np.zeros((T - 1, 2, H, W), dtype=np.float32)
    for t in range(T):
        color = np.zeros((H * W, 3))
        owner = np.zeros(H * W, dtype=np.int32)
        locals_ = []
        for k, obj in enumerate(scene.objects):
            local = _apply(obj.inverse(t), grid)
            owner[obj.contains(local[:, 0], local[:, 1])] = k
            locals_.append(local)
        # texture only the pixels each layer ends up owning
        for k, obj in enumerate(scene.objects):
            sel = owner == k
            if sel.any():
                color[sel] = obj.texture(locals_[k][sel, 0], locals_[k][sel, 1])
        frames[t] = color.T.reshape(3, H, W)
        ids[t] = owner.reshape(H, W)
        for k, obj in enumerate(scene.objects):
            sel = owner == k
            if not sel.any():
                continue
            if t < T - 1:
                f = obj.displacement(grid[sel], t, t + 1)
                fwd[t].reshape(2, -1)[:, sel] = f.T
            if t > 0:
                b = obj.displacement(grid[sel], t, t - 1)
                bwd[t - 1].reshape(2, -1)[:, sel] = b.T
    return SyntheticSample(frames, fwd, bwd, ids, scene=scene)


def render_sequence(cfg: SpriteSceneConfig, seed: int | None = None) -> SyntheticSample:
    """Render one sequence (no trajectories yet; see ``mine_trajectories``)."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    scene = build_scene(cfg, rng)
    return render_scene(scene, cfg.T, cfg.height, cfg.width)


# ---------------------------------------------------------------------------
# trajectory mining


def sample_field(field: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """field [C, H, W] at points [M, 2] with border clamping -> [M, C]."""
    C, H, W = field.shape
    x = np.clip(pts[:, 0], 0, W - 1)
    y = np.clip(pts[:, 1], 0, H - 1)
    x0 = np.minimum(np.floor(x), max(W - 2, 0)).astype(np.int64)
    y0 = np.minimum(np.floor(y), max(H - 2, 0)).astype(np.int64)
    x1, y1 = np.minimum(x0 + 1, W - 1), np.minimum(y0 + 1, H - 1)
    wx, wy = (x - x0)[:, None], (y - y0)[:, None]
    f = field.astype(np.float64)
    return ((1 - wx) * (1 - wy) * f[:, y0, x0].T + wx * (1 - wy) * f[:, y0, x1].T
            + (1 - wx) * wy * f[:, y1, x0].T + wx * wy * f[:, y1, x1].T)


def _footprint_ids(ids: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Instance ids of the (up to four) pixels that carry bilinear weight -> [M, 4], -1 for unused."""
    H, W = ids.shape
    x = np.clip(pts[:, 0], 0, W - 1)
    y = np.clip(pts[:, 1], 0, H - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.where(x > x0, np.minimum(x0 + 1, W - 1), x0)
    y1 = np.where(y > y0, np.minimum(y0 + 1, H - 1), y0)
    return np.stack([ids[y0, x0], ids[y0, x1], ids[y1, x0], ids[y1, x1]], axis=-1)


def grid_seeds(H: int, W: int, grid_stride: int) -> np.ndarray:
    ys, xs = np.mgrid[0:H:grid_stride, 0:W:grid_stride]
    return np.stack([xs.ravel(), ys.ravel()], axis=-1).astype(np.float64)


@dataclass
class ChainReport:
    """Every chain from the seed grid, with the rule each one broke."""

    trajs: np.ndarray  # [M, T, 2]
    seed_ids: np.ndarray  # [M]
    fb_fail: np.ndarray  # [M] bool, forward-backward mismatch above threshold
    bounds_fail: np.ndarray  # [M] bool, left the image
    instance_fail: np.ndarray  # [M] bool, reached another instance

    @property
    def valid(self) -> np.ndarray:
        return ~(self.fb_fail | self.bounds_fail | self.instance_fail)


def chain_report(sample: SyntheticSample, grid_stride: int, fb_threshold: float = 1.0) -> ChainReport:
    T = sample.T
    H, W = sample.size
    p = grid_seeds(H, W, grid_stride)
    M = len(p)
    seed_ids = sample.instance_ids[0][p[:, 1].astype(int), p[:, 0].astype(int)]
    trajs = np.zeros((M, T, 2))
    trajs[:, 0] = p
    fb_fail = np.zeros(M, dtype=bool)
    bounds_fail = np.zeros(M, dtype=bool)
    inst_fail = np.zeros(M, dtype=bool)
    for t in range(T - 1):
        f = sample_field(sample.fwd_flow[t], p)
        q = p + f
        b = sample_field(sample.bwd_flow[t], q)
        fb_fail |= np.linalg.norm(f + b, axis=-1) > fb_threshold
        bounds_fail |= (q[:, 0] < 0) | (q[:, 0] > W - 1) | (q[:, 1] < 0) | (q[:, 1] > H - 1)
        inst_fail |= np.any(_footprint_ids(sample.instance_ids[t + 1], q) != seed_ids[:, None], axis=-1)
        trajs[:, t + 1] = q
        p = q
    return ChainReport(trajs, seed_ids, fb_fail, bounds_fail, inst_fail)


def chain_and_filter(sample: SyntheticSample, grid_stride: int, fb_threshold: float = 1.0) -> list[tuple[np.ndarray, bool]]:
    """Chain forward flow from a seed grid on frame 0.

    Returns one (trajectory [T, 2], valid) pair per seed. A chain is dropped
    as soon as any step breaks forward-backward consistency, leaves the image
    or lands on another instance than its seed.
    """
    rep = chain_report(sample, grid_stride, fb_threshold)
    return [(rep.trajs[i], bool(v)) for i, v in enumerate(rep.valid)]


def mine_trajectories(sample: SyntheticSample, grid_stride: int, fb_threshold: float = 1.0) -> SyntheticSample:
    """Attach the surviving chains as fully visible trajectories."""
    rep = chain_report(sample, grid_stride, fb_threshold)
    keep = rep.valid
    trajs = snap(rep.trajs[keep])
    return sample.replace(trajs=trajs, vis=np.ones(trajs.shape[:2], dtype=np.float32),
                          track_ids=rep.seed_ids[keep].astype(np.int32))


def generate_sample(cfg: SpriteSceneConfig, seed: int | None = None) -> SyntheticSample:
    return mine_trajectories(render_sequence(cfg, seed), cfg.grid_stride, cfg.fb_threshold)


# ---------------------------------------------------------------------------
# occluders


def _shift(arr: np.ndarray, dx: int, dy: int, fill=0) -> np.ndarray:
    """Translate the last two axes by (dx, dy) pixels, filling vacated cells."""
    out = np.full_like(arr, fill)
    H, W = arr.shape[-2:]
    ys, yd = (slice(0, H - dy), slice(dy, H)) if dy >= 0 else (slice(-dy, H), slice(0, H + dy))
    xs, xd = (slice(0, W - dx), slice(dx, W)) if dx >= 0 else (slice(-dx, W), slice(0, W + dx))
    out[..., yd, xd] = arr[..., ys, xs]
    return out


def in_bounds(pts: np.ndarray, H: int, W: int) -> np.ndarray:
    return (pts[..., 0] >= 0) & (pts[..., 0] <= W - 1) & (pts[..., 1] >= 0) & (pts[..., 1] <= H - 1)


def covered(mask: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """mask [T, H, W] bool, pts [N, T, 2] -> [N, T] whether the nearest pixel is masked."""
    T, H, W = mask.shape
    xi = np.clip(np.rint(pts[..., 0]), 0, W - 1).astype(np.int64)
    yi = np.clip(np.rint(pts[..., 1]), 0, H - 1).astype(np.int64)
    hit = mask[np.arange(T)[None, :], yi, xi]
    return hit & in_bounds(pts, H, W)


def paste_occluder(host: SyntheticSample, donor: SyntheticSample, instance: int | None = None,
                   offset: tuple[int, int] = (0, 0), rng: np.random.Generator | None = None) -> SyntheticSample:
    """Overwrite ``host`` with one of ``donor``'s objects on every frame.

    Host trajectories under the pasted pixels become invisible; the pasted
    object's own trajectories are appended, visible wherever they stay in
    bounds. Flow and instance ids under the paste are taken from the donor.
    """
    if host.T != donor.T or host.size != donor.size:
        raise ValueError("host and donor must share T and frame size")
    if instance is None:
        present = np.unique(donor.instance_ids[0])
        present = present[present > 0]
        if present.size == 0:
            raise ValueError("donor has no sprite to paste")
        instance = int((rng or np.random.default_rng()).choice(present))
    dx, dy = int(offset[0]), int(offset[1])
    H, W = host.size
    mask = _shift(donor.instance_ids == instance, dx, dy, False)
    new_id = int(max(host.instance_ids.max(), host.track_ids.max(initial=0))) + 1
    frames = np.where(mask[:, None], _shift(donor.frames, dx, dy), host.frames)
    ids = np.where(mask, new_id, host.instance_ids).astype(np.int32)
    fwd = np.where(mask[:-1, None], _shift(donor.fwd_flow, dx, dy), host.fwd_flow)
    bwd = np.where(mask[1:, None], _shift(donor.bwd_flow, dx, dy), host.bwd_flow)

    vis = host.vis.copy()
    if len(host.trajs):
        vis[covered(mask, host.trajs)] = 0.0
    sel = donor.track_ids == instance
    dtrajs = donor.trajs[sel] + np.array([dx, dy], dtype=donor.trajs.dtype)
    dvis = in_bounds(dtrajs, H, W).astype(np.float32)
    trajs = np.concatenate([host.trajs.reshape(-1, host.T, 2), dtrajs], axis=0).astype(np.float32)
    vis = np.concatenate([vis.reshape(-1, host.T), dvis], axis=0).astype(np.float32)
    track_ids = np.concatenate([host.track_ids, np.full(len(dtrajs), new_id, dtype=np.int32)])
    return SyntheticSample(frames.astype(np.float32), fwd.astype(np.float32), bwd.astype(np.float32), ids,
                           trajs, vis, track_ids, scene=None)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentPolicy:
    out_size: tuple[int, int] | None = (64, 96)  # (H, W) of the time-shifting crop
    scale: tuple[float, float] = (0.9, 1.15)
    crop_speed: float = 1.0  # max crop-window motion, px/frame
    hflip: float = 0.5
    vflip: float = 0.2
    brightness: float = 0.1
    color: float = 0.1
    blur_prob: float = 0.2
    blur_sigma: tuple[float, float] = (0.4, 1.0)

    def __post_init__(self) -> None:
        if self.out_size is not None:
            object.__setattr__(self, "out_size", tuple(int(v) for v in self.out_size))
        object.__setattr__(self, "scale", tuple(float(v) for v in self.scale))
        object.__setattr__(self, "blur_sigma", tuple(float(v) for v in self.blur_sigma))


def _resample(arr: np.ndarray, H2: int, W2: int, s: float, order: int) -> np.ndarray:
    """Resample the last two axes so that coordinate x maps to x * s."""
    lead = arr.shape[:-2]
    flat = arr.reshape(-1, *arr.shape[-2:])
    ys, xs = np.mgrid[0:H2, 0:W2].astype(np.float64) / s
    out = np.stack([ndimage.map_coordinates(a, [ys, xs], order=order, mode="nearest") for a in flat])
    return out.reshape(*lead, H2, W2).astype(arr.dtype)


def rescale(sample: SyntheticSample, s: float) -> SyntheticSample:
    H, W = sample.size
    H2, W2 = int(round(H * s)), int(round(W * s))
    return sample.replace(
        frames=np.clip(_resample(sample.frames, H2, W2, s, 1), 0, 1),
        fwd_flow=_resample(sample.fwd_flow, H2, W2, s, 1) * np.float32(s),
        bwd_flow=_resample(sample.bwd_flow, H2, W2, s, 1) * np.float32(s),
        instance_ids=_resample(sample.instance_ids, H2, W2, s, 0),
        trajs=snap(sample.trajs * s),
        scene=None,
    )


def shifting_crop(sample: SyntheticSample, size: tuple[int, int], offsets: np.ndarray) -> SyntheticSample:
    """Crop a (h, w) window whose integer top-left corner moves per frame.

    offsets [T, 2] holds (x, y) of the window on each frame.
    """
    h, w = size
    H, W = sample.size
    if h > H or w > W:
        raise ValueError(f"crop {h}x{w} is larger than the {H}x{W} frame")
    offsets = np.asarray(offsets, dtype=np.int64)
    if np.any(offsets < 0) or np.any(offsets[:, 0] + w > W) or np.any(offsets[:, 1] + h > H):
        raise ValueError("crop window leaves the frame")
    T = sample.T
    win = [(slice(oy, oy + h), slice(ox, ox + w)) for ox, oy in offsets]
    frames = np.stack([sample.frames[t][(slice(None),) + win[t]] for t in range(T)])
    ids = np.stack([sample.instance_ids[t][win[t]] for t in range(T)])
    d = (offsets[:-1] - offsets[1:]).astype(np.float32)  # frame t -> t+1 window motion
    fwd = np.stack([sample.fwd_flow[t][(slice(None),) + win[t]] + d[t][:, None, None] for t in range(T - 1)])
    bwd = np.stack([sample.bwd_flow[t][(slice(None),) + win[t + 1]] - d[t][:, None, None] for t in range(T - 1)])
    trajs = (sample.trajs - offsets[None].astype(np.float32)).astype(np.float32)
    vis = sample.vis * in_bounds(trajs, h, w)
    return sample.replace(frames=frames, fwd_flow=fwd, bwd_flow=bwd, instance_ids=ids, trajs=trajs,
                          vis=vis.astype(np.float32), scene=None)


def hflip(sample: SyntheticSample) -> SyntheticSample:
    W = sample.size[1]
    sign = np.array([-1, 1], dtype=np.float32)[:, None, None]
    trajs = sample.trajs.copy()
    trajs[..., 0] = W - 1 - trajs[..., 0]
    return sample.replace(frames=sample.frames[..., ::-1].copy(), instance_ids=sample.instance_ids[..., ::-1].copy(),
                          fwd_flow=sample.fwd_flow[..., ::-1] * sign, bwd_flow=sample.bwd_flow[..., ::-1] * sign,
                          trajs=trajs, scene=None)


def vflip(sample: SyntheticSample) -> SyntheticSample:
    H = sample.size[0]
    sign = np.array([1, -1], dtype=np.float32)[:, None, None]
    trajs = sample.trajs.copy()
    trajs[..., 1] = H - 1 - trajs[..., 1]
    return sample.replace(frames=sample.frames[..., ::-1, :].copy(),
                          instance_ids=sample.instance_ids[..., ::-1, :].copy(),
                          fwd_flow=sample.fwd_flow[..., ::-1, :] * sign, bwd_flow=sample.bwd_flow[..., ::-1, :] * sign,
                          trajs=trajs, scene=None)


def photometric(sample: SyntheticSample, brightness: float, gains, blur_sigma: float = 0.0) -> SyntheticSample:
    frames = sample.frames * np.asarray(gains, dtype=np.float32)[None, :, None, None] + np.float32(brightness)
    if blur_sigma > 0:
        frames = ndimage.gaussian_filter(frames, sigma=(0, 0, blur_sigma, blur_sigma))
    return sample.replace(frames=np.clip(frames, 0, 1).astype(np.float32))


def augment(sample: SyntheticSample, policy: AugmentPolicy, seed: int) -> SyntheticSample:
    """Random scale, time-shifting crop, flips, color/brightness and blur.

    Geometric steps move trajectories, flow and masks together; trajectory
    points leaving the crop become invisible.
    """
    rng = np.random.default_rng(seed)
    out = sample
    s = rng.uniform(*policy.scale)
    if policy.out_size is not None:
        h, w = policy.out_size
        H, W = out.size
        if h > H * policy.scale[1] or w > W * policy.scale[1]:
            raise ValueError(f"crop {h}x{w} is larger than the {H}x{W} frame at any allowed scale")
        s = max(s, h / H, w / W)
    if abs(s - 1.0) > 1e-6:
        out = rescale(out, s)
    if policy.out_size is not None:
        out = shifting_crop(out, policy.out_size, _random_offsets(rng, out.size, policy.out_size, out.T,
                                                                  policy.crop_speed))
    if rng.random() < policy.hflip:
        out = hflip(out)
    if rng.random() < policy.vflip:
        out = vflip(out)
    gains = 1.0 + rng.uniform(-policy.color, policy.color, 3)
    bright = rng.uniform(-policy.brightness, policy.brightness)
    sigma = rng.uniform(*policy.blur_sigma) if rng.random() < policy.blur_prob else 0.0
    out = photometric(out, bright, gains, sigma)
    H, W = out.size
    return out.replace(vis=(out.vis * in_bounds(out.trajs, H, W)).astype(np.float32))


def _random_offsets(rng, frame_size, crop_size, T, speed) -> np.ndarray:
    H, W = frame_size
    h, w = crop_size
    v = rng.uniform(-speed, speed, 2)
    span = v * (T - 1)
    lo = np.maximum(0, -span)
    hi = np.array([W - w, H - h], dtype=np.float64) - np.maximum(0, span)
    hi = np.maximum(hi, lo)
    start = rng.uniform(lo, hi)
    offs = np.rint(start[None] + v[None] * np.arange(T)[:, None]).astype(np.int64)
    return np.clip(offs, 0, [W - w, H - h])
