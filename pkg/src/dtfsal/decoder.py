"""Saliency decoding heads.

Each level decoder restores full spatial resolution with staged x2
upsampling interleaved with 3-D convs, collapses time with stride-2
temporal convs plus a mean over any remainder, reduces to one channel, and
applies a sigmoid. The default head decodes all four levels independently
and fuses the four intermediate maps with one final conv + sigmoid; single-
stack and U-Net style variants share the interface for ablations.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .nn import ChannelLayerNorm, Conv3d, Module
from .tensor import ShapeError, Tensor


class LevelDecoder(Module):
    """One feature level -> a full-resolution map in (0, 1).

    Rounds are conv-LN-GELU (layer norm keeps the activation scale bounded
    through the deep upsampling chain, which batch size 1 cannot).
    """

    def __init__(self, in_channels: int, upsample_rounds: int, width: int = 64, min_width: int = 8, rng=None, dtype=np.float64):
        super().__init__()
        if upsample_rounds < 1:
            raise ValueError("need at least one upsampling round")
        self.upsample_rounds = upsample_rounds
        self.convs = []
        self.norms = []
        c_in = in_channels
        c_out = width
        for _ in range(upsample_rounds):
            # Temporal stride 2 with padding 1 halves T (and holds T=1 fixed).
            self.convs.append(
                Conv3d(c_in, c_out, (3, 3, 3), stride=(2, 1, 1), padding=(1, 1, 1), rng=rng, dtype=dtype)
            )
            self.norms.append(ChannelLayerNorm(c_out, dtype=dtype))
            c_in = c_out
            c_out = max(min_width, c_out // 2)
        self.head = Conv3d(c_in, 1, (1, 3, 3), padding=(0, 1, 1), rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        for conv, norm in zip(self.convs, self.norms):
            x = ops.gelu(norm(conv(x)))
            x = ops.resize_trilinear(x, (x.shape[2], x.shape[3] * 2, x.shape[4] * 2))
        if x.shape[2] > 1:
            x = x.mean(axis=2, keepdims=True)
        return ops.sigmoid(self.head(x))


class DecoderFusion(Module):
    """Concat the four intermediate maps, 1x3x3 conv to one channel, sigmoid."""

    def __init__(self, rng=None, dtype=np.float64):
        super().__init__()
        self.fuse = Conv3d(4, 1, (1, 3, 3), padding=(0, 1, 1), rng=rng, dtype=dtype)

    def forward(self, maps: list[Tensor]) -> Tensor:
        if len(maps) != 4:
            raise ShapeError(f"expected four intermediate maps, got {len(maps)}")
        shp = maps[0].shape
        for m in maps:
            if m.shape != shp:
                raise ShapeError(f"intermediate map shapes differ: {m.shape} vs {shp}")
        stacked = ops.concat(maps, axis=1)
        return ops.sigmoid(self.fuse(stacked))


class MultiDecoder(Module):
    """Independent per-level decoders plus fusion (the default head)."""

    def __init__(self, channels: int, width: int = 64, min_width: int = 8, rng=None, dtype=np.float64):
        super().__init__()
        self.level_decoders = [
            LevelDecoder(channels, upsample_rounds=i + 1, width=width, min_width=min_width, rng=rng, dtype=dtype)
            for i in range(1, 5)
        ]
        self.fusion = DecoderFusion(rng=rng, dtype=dtype)

    def forward(self, levels: list[Tensor]) -> tuple[Tensor, list[Tensor]]:
        maps = [dec(x) for dec, x in zip(self.level_decoders, levels)]
        fused = self.fusion(maps)
        h, w = fused.shape[3], fused.shape[4]
        return fused.reshape((h, w)), maps


class SingleDecoder(Module):
    """All levels upsampled to the finest grid, concatenated, one decode stack."""

    def __init__(self, channels: int, width: int = 64, min_width: int = 8, rng=None, dtype=np.float64):
        super().__init__()
        self.stack = LevelDecoder(4 * channels, upsample_rounds=2, width=width, min_width=min_width, rng=rng, dtype=dtype)

    def forward(self, levels: list[Tensor]) -> tuple[Tensor, list[Tensor]]:
        target = levels[0].shape[2:]
        ups = [levels[0]] + [ops.resize_trilinear(x, target) for x in levels[1:]]
        merged = ops.concat(ups, axis=1)
        s = self.stack(merged)
        h, w = s.shape[3], s.shape[4]
        return s.reshape((h, w)), [s]


class UNetDecoder(Module):
    """Progressive x2 upsampling from the coarsest level with lateral skips."""

    def __init__(self, channels: int, width: int = 64, min_width: int = 8, rng=None, dtype=np.float64):
        super().__init__()
        self.laterals = [Conv3d(channels, width, (1, 1, 1), rng=rng, dtype=dtype) for _ in range(4)]
        self.mixers = [
            Conv3d(width, width, (3, 3, 3), padding=(1, 1, 1), rng=rng, dtype=dtype) for _ in range(3)
        ]
        self.mix_norms = [ChannelLayerNorm(width, dtype=dtype) for _ in range(3)]
        self.stack = LevelDecoder(width, upsample_rounds=2, width=width, min_width=min_width, rng=rng, dtype=dtype)

    def forward(self, levels: list[Tensor]) -> tuple[Tensor, list[Tensor]]:
        x = self.laterals[3](levels[3])
        for i in (2, 1, 0):
            x = ops.resize_trilinear(x, levels[i].shape[2:])
            x = ops.gelu(self.mix_norms[i](self.mixers[i](x + self.laterals[i](levels[i]))))
        s = self.stack(x)
        h, w = s.shape[3], s.shape[4]
        return s.reshape((h, w)), [s]


DECODER_MODES = ("multi", "one", "unet")


def make_decoder(mode: str, channels: int, width: int = 64, min_width: int = 8, rng=None, dtype=np.float64) -> Module:
    if mode == "multi":
        return MultiDecoder(channels, width, min_width, rng=rng, dtype=dtype)
    if mode == "one":
        return SingleDecoder(channels, width, min_width, rng=rng, dtype=dtype)
    if mode == "unet":
        return UNetDecoder(channels, width, min_width, rng=rng, dtype=dtype)
    raise ValueError(f"unknown decoder mode '{mode}'")
