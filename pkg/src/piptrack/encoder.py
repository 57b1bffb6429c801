"""Per-frame convolutional feature extractor."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .config import ModelConfig
from .nn import Conv2d, Module
from .tensor import Tensor


@dataclass
class FeatureMaps:
    feats: Tensor  # [T, C, H/s, W/s], or [B, T, C, H/s, W/s] when batched
    stride: int


class ResidualBlock(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, project: bool):
        self.conv1 = Conv2d(cin, cout, 3, rng)
        self.conv2 = Conv2d(cout, cout, 3, rng)
        self.proj = Conv2d(cin, cout, 1, rng) if project else None

    def __call__(self, x: Tensor, stride: int) -> Tensor:
        y = tn.relu(tn.instance_norm(self.conv1(x, stride)))
        y = tn.relu(tn.instance_norm(self.conv2(y)))
        skip = x if self.proj is None else tn.instance_norm(self.proj(x, stride))
        return tn.relu(skip + y)


class Encoder(Module):
    """7x7 stride-2 stem, residual stages, 1x1 output projection.

    Stage 0 runs at stride 1; each later stage halves the resolution until
    the requested total stride is reached and runs at stride 1 after that,
    so a model trained at stride 8 can be evaluated at stride 4 unchanged.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        widths = cfg.encoder_widths
        self.stem = Conv2d(3, widths[0], 7, rng)
        self.stages = []
        cin = widths[0]
        for i, w in enumerate(widths):
            blocks = [ResidualBlock(cin, w, rng, project=i > 0)]
            blocks += [ResidualBlock(w, w, rng, project=False) for _ in range(cfg.encoder_blocks - 1)]
            self.stages.append(_Stage(blocks))
            cin = w
        self.out = Conv2d(cin, cfg.C, 1, rng)

    def stage_strides(self, stride: int) -> list[int]:
        strides, total = [], 2
        for i in range(len(self.stages)):
            s = 2 if i > 0 and total < stride else 1
            total *= s
            strides.append(s)
        if total != stride:
            raise ValueError(f"encoder cannot reach stride {stride} with {len(self.stages)} stages")
        return strides

    def __call__(self, images: Tensor, stride: int) -> Tensor:
        """images [N, 3, H, W] in [0, 1] -> features [N, C, H/stride, W/stride]."""
        H, W = images.shape[-2:]
        if H % stride or W % stride:
            raise ValueError(f"frame size {H}x{W} is not divisible by stride {stride}; pad the frames first")
        x = images * 2.0 - 1.0
        x = tn.relu(tn.instance_norm(self.stem(x, 2)))
        for stage, s in zip(self.stages, self.stage_strides(stride)):
            x = stage(x, s)
        return self.out(x)


class _Stage(Module):
    def __init__(self, blocks):
        self.blocks = blocks

    def __call__(self, x: Tensor, stride: int) -> Tensor:
        for i, block in enumerate(self.blocks):
            x = block(x, stride if i == 0 else 1)
        return x


def encode_frames(encoder: Encoder, video: Tensor, cfg: ModelConfig, stride: int | None = None) -> FeatureMaps:
    """video [T, 3, H, W] or [B, T, 3, H, W] -> per-frame feature maps."""
    stride = cfg.stride if stride is None else stride
    lead = video.shape[:-3]
    frames = video.reshape(-1, *video.shape[-3:])
    feats = encoder(frames, stride)
    return FeatureMaps(feats.reshape(*lead, *feats.shape[1:]), stride)
