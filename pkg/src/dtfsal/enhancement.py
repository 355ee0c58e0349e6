"""Top-down pyramid fusion and the two token-refinement blocks.

``TopDownFusion`` projects every pyramid level to a shared channel width,
injects coarse levels into finer ones by trilinear upsampling and addition,
and refines each sum with a conv. The printed fusion recipe feeds level 1
from level 2 (x2) and the refined level 4 (x8) only; the symmetric level-3
term can be switched on for experiments.

``TokenEnhancementBlock`` gates the input, pools a per-time global
embedding, softmax-weights a bank of learnable spatial tokens with it, and
multiplies the interpolated token field back onto the input with a residual.
``ShiftTokenFusionBlock`` adds channel-group spatial shifts along width and
height around a conv bottleneck, then combines both refinements.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import ops
from .encoder import FeaturePyramid
from .nn import ChannelLayerNorm, Conv3d, Linear, Module, Parameter
from .tensor import ShapeError, Tensor


@dataclass
class RefinedPyramid:
    """Four levels at a uniform channel width."""

    levels: list[Tensor]

    def shapes(self) -> list[tuple]:
        return [tuple(l.shape) for l in self.levels]


@dataclass(frozen=True)
class ShiftSpec:
    """Channel-group displacement along one spatial axis."""

    axis: str  # "height" | "width"
    displacements: tuple = (-1, 0, 1)
    boundary: str = "cyclic"

    def apply(self, x: Tensor) -> Tensor:
        return ops.channel_shift(x, self.axis, self.displacements, self.boundary)

    def inverse(self) -> "ShiftSpec":
        return ShiftSpec(self.axis, tuple(-d for d in self.displacements), self.boundary)


class TopDownFusion(Module):
    def __init__(
        self,
        in_channels: Sequence[int],
        out_channels: int = 192,
        symmetric_level1: bool = False,
        rng=None,
        dtype=np.float64,
    ):
        super().__init__()
        if len(in_channels) != 4:
            raise ValueError("expected four pyramid levels")
        self.out_channels = out_channels
        self.symmetric_level1 = symmetric_level1
        self.project = [
            Conv3d(c, out_channels, (1, 1, 1), rng=rng, dtype=dtype) for c in in_channels
        ]
        self.refine = [
            Conv3d(out_channels, out_channels, (1, 3, 3), padding=(0, 1, 1), rng=rng, dtype=dtype)
            for _ in range(4)
        ]

    def forward(self, pyramid: FeaturePyramid) -> RefinedPyramid:
        e1, e2, e3, e4 = pyramid.levels

        def up_to(x: Tensor, like: Tensor) -> Tensor:
            target = like.shape[2:]
            if x.shape[3] > target[1] or x.shape[4] > target[2]:
                raise ShapeError(f"cannot upsample {x.shape} onto finer grid {like.shape}")
            return ops.resize_trilinear(x, target)

        r4 = self.refine[3](self.project[3](e4))
        f3 = self.project[2](e3) + up_to(r4, e3)
        f2 = self.project[1](e2) + up_to(f3, e2) + up_to(r4, e2)
        f1 = self.project[0](e1) + up_to(f2, e1) + up_to(r4, e1)
        if self.symmetric_level1:
            f1 = f1 + up_to(f3, e1)
        r3 = self.refine[2](f3)
        r2 = self.refine[1](f2)
        r1 = self.refine[0](f1)
        return RefinedPyramid([r1, r2, r3, r4])


class TokenBank(Module):
    """N learnable spatial token maps, each [C, H_p, W_p]."""

    def __init__(self, n_tokens: int, channels: int, token_hw=(7, 7), rng=None, dtype=np.float64):
        super().__init__()
        if n_tokens < 1:
            raise ValueError("token bank needs at least one token")
        self.n_tokens = n_tokens
        self.channels = channels
        self.token_hw = tuple(token_hw)
        scale = 1.0 / np.sqrt(channels)
        self.tokens = Parameter((rng.standard_normal((n_tokens, channels, *self.token_hw)) * scale).astype(dtype))


class _TokenModulation(Module):
    """Shared token pipeline: gate -> per-time weights -> token field P''."""

    def __init__(self, channels: int, bank: TokenBank, rng=None, dtype=np.float64):
        super().__init__()
        if bank.channels != channels:
            raise ShapeError("token bank channel width must match the block input")
        self.bank = bank
        self.gate_conv = Conv3d(channels, channels, (1, 3, 3), padding=(0, 1, 1), rng=rng, dtype=dtype)
        self.weight_head = Linear(channels, bank.n_tokens, rng=rng, dtype=dtype)
        self.field_conv = Conv3d(channels, channels, (1, 3, 3), padding=(0, 1, 1), rng=rng, dtype=dtype)
        self.last_token_weights: np.ndarray | None = None

    def forward(self, x: Tensor) -> Tensor:
        n, c, t, h, w = x.shape
        gate = ops.sigmoid(self.gate_conv(x))
        # Global embedding per time step: spatial mean of the gate.
        embed = gate.mean(axis=(3, 4))  # [N, C, T]
        embed = embed.transpose((0, 2, 1)).reshape((n * t, c))
        weights = ops.softmax(self.weight_head(embed), axis=1)  # [N*T, K]
        self.last_token_weights = weights.data.reshape(n, t, -1).copy()
        k = self.bank.n_tokens
        hp, wp = self.bank.token_hw
        flat_tokens = self.bank.tokens.reshape((k, c * hp * wp))
        mixed = (weights @ flat_tokens).reshape((n, t, c, hp, wp))
        mixed = mixed.transpose((0, 2, 1, 3, 4))  # [N, C, T, H_p, W_p]
        field = ops.resize_trilinear(mixed, (t, h, w))
        return self.field_conv(field)


class TokenEnhancementBlock(Module):
    """Residual token modulation: F * P'' + F."""

    def __init__(self, channels: int, n_tokens: int = 8, token_hw=(7, 7), rng=None, dtype=np.float64):
        super().__init__()
        self.modulation = _TokenModulation(
            channels, TokenBank(n_tokens, channels, token_hw, rng=rng, dtype=dtype), rng=rng, dtype=dtype
        )

    def forward(self, x: Tensor) -> Tensor:
        field = self.modulation(x)
        return x * field + x


class ShiftTokenFusionBlock(Module):
    """Token modulation combined with width/height channel-group shifts.

    Width-shift -> 1x1x1 conv -> GELU -> 3-D conv, height-shift of that,
    LN + 1x1x1 conv back onto the input as a residual, and the token field
    multiplied in on top: F * P'' + F_shift_branch.
    """

    def __init__(
        self,
        channels: int,
        n_tokens: int = 8,
        token_hw=(7, 7),
        width_spec: Optional[ShiftSpec] = None,
        height_spec: Optional[ShiftSpec] = None,
        bottleneck_kernel=(3, 3, 3),
        rng=None,
        dtype=np.float64,
    ):
        super().__init__()
        self.width_spec = width_spec or ShiftSpec("width")
        self.height_spec = height_spec or ShiftSpec("height")
        if self.width_spec.axis != "width" or self.height_spec.axis != "height":
            raise ValueError("shift specs must name the width and height axes respectively")
        self.modulation = _TokenModulation(
            channels, TokenBank(n_tokens, channels, token_hw, rng=rng, dtype=dtype), rng=rng, dtype=dtype
        )
        pad = tuple(k // 2 for k in ops._triple(bottleneck_kernel))
        self.pre_conv = Conv3d(channels, channels, (1, 1, 1), rng=rng, dtype=dtype)
        self.mix_conv = Conv3d(channels, channels, bottleneck_kernel, padding=pad, rng=rng, dtype=dtype)
        self.norm = ChannelLayerNorm(channels, dtype=dtype)
        self.post_conv = Conv3d(channels, channels, (1, 1, 1), rng=rng, dtype=dtype)

    def shift_branch(self, x: Tensor) -> Tensor:
        shifted = self.width_spec.apply(x)
        y = self.mix_conv(ops.gelu(self.pre_conv(shifted)))
        y = self.height_spec.apply(y)
        return x + self.post_conv(self.norm(y))

    def forward(self, x: Tensor) -> Tensor:
        field = self.modulation(x)
        return x * field + self.shift_branch(x)


BLOCK_KINDS = ("none", "lteb", "dltfb")
DEFAULT_PLACEMENT = {1: "lteb", 2: "lteb", 3: "lteb", 4: "dltfb"}


def parse_block_placement(spec: str) -> dict[int, str]:
    """Parse placements like "lteb:1,2,3;dltfb:4" or "none".

    Later clauses override earlier ones per stage; unnamed stages get no
    block.
    """
    mapping = {1: "none", 2: "none", 3: "none", 4: "none"}
    spec = spec.strip().lower()
    if not spec or spec == "none":
        return mapping
    if spec == "default":
        return dict(DEFAULT_PLACEMENT)
    for clause in spec.split(";"):
        clause = clause.strip()
        if not clause:
            continue
        if ":" not in clause:
            raise ValueError(f"bad placement clause '{clause}' (expected kind:stages)")
        kind, stages = clause.split(":", 1)
        kind = kind.strip()
        if kind not in BLOCK_KINDS:
            raise ValueError(f"unknown block kind '{kind}'")
        for s in stages.split(","):
            stage = int(s.strip())
            if stage not in mapping:
                raise ValueError(f"unknown stage id {stage}")
            mapping[stage] = kind
    return mapping


class EnhancementStack(Module):
    """Per-stage refinement blocks applied to the refined pyramid levels."""

    def __init__(
        self,
        channels: int,
        placement: dict[int, str],
        n_tokens: int = 8,
        token_hw=(7, 7),
        shift_displacements=(-1, 0, 1),
        shift_boundary: str = "cyclic",
        rng=None,
        dtype=np.float64,
    ):
        super().__init__()
        self.placement = dict(placement)
        disp = tuple(shift_displacements)
        self.blocks = []
        for stage in (1, 2, 3, 4):
            kind = self.placement.get(stage, "none")
            if kind == "lteb":
                self.blocks.append(TokenEnhancementBlock(channels, n_tokens, token_hw, rng=rng, dtype=dtype))
            elif kind == "dltfb":
                self.blocks.append(
                    ShiftTokenFusionBlock(
                        channels,
                        n_tokens,
                        token_hw,
                        width_spec=ShiftSpec("width", disp, shift_boundary),
                        height_spec=ShiftSpec("height", disp, shift_boundary),
                        rng=rng,
                        dtype=dtype,
                    )
                )
            elif kind == "none":
                self.blocks.append(_Identity())
            else:
                raise ValueError(f"unknown block kind '{kind}'")

    def forward(self, refined: RefinedPyramid) -> RefinedPyramid:
        return RefinedPyramid([blk(x) for blk, x in zip(self.blocks, refined.levels)])


class _Identity(Module):
    def forward(self, x: Tensor) -> Tensor:
        return x
