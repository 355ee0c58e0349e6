"""Multi-scale video encoder.

A clip [T, H, W, 3] is patch-partitioned into C-dimensional tokens at
resolution [T/2, H/4, W/4] and pushed through four stages. Stage i holds a
configurable number of conv residual blocks; stages 2..4 halve the spatial
size and double the channels first, so level i has 2^(i-1)*C channels at
H/2^(i+1) x W/2^(i+1), with the temporal length T/2 shared by all levels.

The stages are plain convolutional residual blocks standing in for a
pretrained attention backbone; only the pyramid's shape law and
trainability matter downstream, and that compromise is deliberate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .nn import ChannelLayerNorm, Conv3d, Module
from .tensor import ShapeError, Tensor


@dataclass
class VideoClip:
    """Frames [T, H, W, 3] with values in [0, 1]."""

    frames: np.ndarray
    fps: float = 8.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ShapeError(f"clip must be [T, H, W, 3], got {self.frames.shape}")
        t, h, w, _ = self.frames.shape
        if t % 2 != 0:
            raise ShapeError(f"frame count {t} must be even")
        if h % 32 != 0 or w % 32 != 0:
            raise ShapeError(f"frame size {h}x{w} must be divisible by 32")

    def tensor(self, dtype=np.float64) -> Tensor:
        # [T, H, W, 3] -> [1, 3, T, H, W]
        return Tensor(np.ascontiguousarray(self.frames.transpose(3, 0, 1, 2)[None]).astype(dtype))


@dataclass
class FeaturePyramid:
    """Levels 1..4, each [1, 2^(i-1)*C, T/2, H/2^(i+1), W/2^(i+1)]."""

    levels: list[Tensor]

    def shapes(self) -> list[tuple]:
        return [tuple(l.shape) for l in self.levels]


def pyramid_level_shapes(t: int, h: int, w: int, base_channels: int = 96) -> list[tuple]:
    """Expected per-level [C_i, T/2, H_i, W_i] for a valid clip size."""
    return [
        (base_channels * 2 ** (i - 1), t // 2, h // 2 ** (i + 1), w // 2 ** (i + 1))
        for i in range(1, 5)
    ]


class ResidualBlock(Module):
    """x + GELU(LN(Conv_1x3x3(x)))."""

    def __init__(self, channels: int, rng=None, dtype=np.float64):
        super().__init__()
        self.conv = Conv3d(channels, channels, (1, 3, 3), padding=(0, 1, 1), rng=rng, dtype=dtype)
        self.norm = ChannelLayerNorm(channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return x + ops.gelu(self.norm(self.conv(x)))


class PatchPartition(Module):
    """Non-overlapping (2, 4, 4) tokens, each a base_channels-dim vector."""

    def __init__(self, base_channels: int = 96, rng=None, dtype=np.float64):
        super().__init__()
        self.proj = Conv3d(3, base_channels, (2, 4, 4), stride=(2, 4, 4), rng=rng, dtype=dtype)

    def forward(self, clip: Tensor) -> Tensor:
        if clip.ndim != 5 or clip.shape[1] != 3:
            raise ShapeError(f"expected [N, 3, T, H, W], got {clip.shape}")
        t, h, w = clip.shape[2:]
        if t % 2 or h % 4 or w % 4:
            raise ShapeError(f"clip dims {t}x{h}x{w} not divisible by the (2, 4, 4) patch size")
        return self.proj(clip)


class PyramidEncoder(Module):
    def __init__(
        self,
        base_channels: int = 96,
        blocks_per_stage=(1, 1, 2, 1),
        rng=None,
        dtype=np.float64,
    ):
        super().__init__()
        if len(blocks_per_stage) != 4:
            raise ValueError("blocks_per_stage must list four stages")
        self.base_channels = base_channels
        self.patch = PatchPartition(base_channels, rng=rng, dtype=dtype)
        self.downsamples = []
        self.stages = []
        channels = base_channels
        for i, n_blocks in enumerate(blocks_per_stage):
            if i > 0:
                self.downsamples.append(
                    Conv3d(channels, channels * 2, (1, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1), rng=rng, dtype=dtype)
                )
                channels *= 2
            self.stages.append([ResidualBlock(channels, rng=rng, dtype=dtype) for _ in range(n_blocks)])
        # Flatten nested block lists so named_parameters() sees them.
        self.blocks = [b for stage in self.stages for b in stage]

    def forward(self, clip: Tensor) -> FeaturePyramid:
        x = self.patch(clip)
        levels = []
        for i, stage in enumerate(self.stages):
            if i > 0:
                x = self.downsamples[i - 1](x)
            for block in stage:
                x = block(x)
            levels.append(x)
        return FeaturePyramid(levels)
