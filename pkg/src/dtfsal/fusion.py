"""Audio-visual fusion.

The tri-stream block runs three parallel views of a feature level: a 1x3x3
conv (local detail), a 1x5x5 conv (scene context), and an audio-conditioned
deformable conv whose sampling offsets are predicted from the conditioned
features. The three outputs are concatenated, pooled, and mapped through a
single linear + sigmoid into one gate scalar per stream; the block returns
the gate-weighted sum.

Two baseline fusion modes (channel concatenation, audio-key cross
attention) share the same call signature for ablation runs.
"""

from __future__ import annotations

import math

import numpy as np

from . import ops
from .nn import BatchNorm3d, Conv3d, Linear, Module, Parameter, he_init
from .tensor import ShapeError, Tensor


def align_audio_tokens(tokens: Tensor, t_out: int) -> Tensor:
    """Resample [T_a, D] token sequence to [t_out, D] by linear interpolation."""
    t_a, d = tokens.shape
    x = tokens.transpose((1, 0)).reshape((1, d, t_a, 1, 1))
    x = ops.resize_trilinear(x, (t_out, 1, 1))
    return x.reshape((d, t_out)).transpose((1, 0))


def _tile_time_vectors(v: Tensor, like_shape) -> Tensor:
    """[T, C] -> [1, C, T, 1, 1], broadcastable over a [N, C, T, H, W] map."""
    t, c = v.shape
    return v.transpose((1, 0)).reshape((1, c, t, 1, 1))


class LocalStream(Module):
    def __init__(self, channels: int, rng=None, dtype=np.float64):
        super().__init__()
        self.conv = Conv3d(channels, channels, (1, 3, 3), padding=(0, 1, 1), rng=rng, dtype=dtype)
        self.bn = BatchNorm3d(channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(self.bn(self.conv(x)))


class GlobalStream(Module):
    def __init__(self, channels: int, rng=None, dtype=np.float64):
        super().__init__()
        self.conv = Conv3d(channels, channels, (1, 5, 5), padding=(0, 2, 2), rng=rng, dtype=dtype)
        self.bn = BatchNorm3d(channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(self.bn(self.conv(x)))


class AdaptiveStream(Module):
    """Deformable conv over audio-conditioned features.

    Audio token vectors are aligned to the feature timeline, projected to the
    channel width, tiled over space, and added to the input; the conditioned
    tensor feeds both the offset predictor and the deformable conv itself.
    The offset predictor is zero-initialized so the stream starts as a plain
    convolution.
    """

    def __init__(self, channels: int, audio_dim: int, offset_clip: float = 0.0, rng=None, dtype=np.float64):
        super().__init__()
        self.channels = channels
        self.offset_clip = offset_clip
        self.audio_proj = Linear(audio_dim, channels, rng=rng, dtype=dtype)
        self.offset_conv = Conv3d(channels, 18, (1, 3, 3), padding=(0, 1, 1), zero_init=True, dtype=dtype)
        self.weight = Parameter(he_init(rng, (channels, channels, 1, 3, 3), channels * 9, dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype))

    def condition(self, x: Tensor, audio_tokens: Tensor | None) -> Tensor:
        if audio_tokens is None:
            return x
        aligned = align_audio_tokens(audio_tokens, x.shape[2])
        delta = self.audio_proj(aligned)  # [T, C]
        return x + _tile_time_vectors(delta, x.shape)

    def forward(self, x: Tensor, audio_tokens: Tensor | None) -> Tensor:
        cond = self.condition(x, audio_tokens)
        offsets = self.offset_conv(cond)
        if self.offset_clip > 0:
            offsets = ops.clip(offsets, -self.offset_clip, self.offset_clip)
        return ops.deformable_conv3d(cond, offsets, self.weight, self.bias)


class TriStreamFusion(Module):
    """Gated sum of local, global, and adaptive streams."""

    def __init__(self, channels: int, audio_dim: int, offset_clip: float = 0.0, rng=None, dtype=np.float64):
        super().__init__()
        self.local = LocalStream(channels, rng=rng, dtype=dtype)
        self.global_ = GlobalStream(channels, rng=rng, dtype=dtype)
        self.adaptive = AdaptiveStream(channels, audio_dim, offset_clip, rng=rng, dtype=dtype)
        self.score_head = Linear(3 * channels, 3, rng=rng, dtype=dtype)
        self.last_scores: np.ndarray | None = None

    def stream_outputs(self, x: Tensor, audio_tokens: Tensor | None) -> tuple[Tensor, Tensor, Tensor]:
        return self.local(x), self.global_(x), self.adaptive(x, audio_tokens)

    def forward(self, x: Tensor, audio_tokens: Tensor | None, scores_override=None) -> Tensor:
        f_local, f_global, f_adaptive = self.stream_outputs(x, audio_tokens)
        if scores_override is None:
            fused = ops.concat([f_local, f_global, f_adaptive], axis=1)
            scores = ops.sigmoid(self.score_head(ops.global_avg_pool(fused)))  # [N, 3]
            self.last_scores = scores.data.copy()
            parts = [ops.narrow(scores, 1, k, 1).reshape((-1, 1, 1, 1, 1)) for k in range(3)]
        else:
            w = np.asarray(scores_override, dtype=x.data.dtype).reshape(3)
            self.last_scores = np.tile(w, (x.shape[0], 1))
            parts = [Tensor(np.full((x.shape[0], 1, 1, 1, 1), w[k], dtype=x.data.dtype)) for k in range(3)]
        return parts[0] * f_local + parts[1] * f_global + parts[2] * f_adaptive


class ConcatFusion(Module):
    """Baseline: tile projected audio, concat on channels, 1x1x1 back down."""

    def __init__(self, channels: int, audio_dim: int, rng=None, dtype=np.float64):
        super().__init__()
        self.audio_proj = Linear(audio_dim, channels, rng=rng, dtype=dtype)
        self.mix = Conv3d(2 * channels, channels, (1, 1, 1), rng=rng, dtype=dtype)

    def forward(self, x: Tensor, audio_tokens: Tensor | None, scores_override=None) -> Tensor:
        n, c, t, h, w = x.shape
        if audio_tokens is None:
            audio_map = Tensor(np.zeros((n, c, t, h, w), dtype=x.data.dtype))
        else:
            aligned = align_audio_tokens(audio_tokens, t)
            delta = self.audio_proj(aligned)
            audio_map = _tile_time_vectors(delta, x.shape) + Tensor(np.zeros_like(x.data))
        return self.mix(ops.concat([x, audio_map], axis=1))


class CrossAttentionFusion(Module):
    """Baseline: visual queries and values, audio keys.

    Queries come from per-time spatially pooled visual features; values are
    the same pooled visual features resampled onto the audio segment axis,
    so the attention weights (one row per video time step, one column per
    audio token) mix visual content according to audio similarity.
    """

    def __init__(self, channels: int, audio_dim: int, attn_dim: int = 64, rng=None, dtype=np.float64):
        super().__init__()
        self.attn_dim = attn_dim
        self.q = Linear(channels, attn_dim, rng=rng, dtype=dtype)
        self.k = Linear(audio_dim, attn_dim, rng=rng, dtype=dtype)
        self.v = Linear(channels, attn_dim, rng=rng, dtype=dtype)
        self.out = Linear(attn_dim, channels, rng=rng, dtype=dtype)
        self.last_attention: np.ndarray | None = None

    def forward(self, x: Tensor, audio_tokens: Tensor | None, scores_override=None) -> Tensor:
        if audio_tokens is None:
            return x
        n, c, t, h, w = x.shape
        if n != 1:
            raise ShapeError("cross-attention baseline expects batch size 1")
        pooled = x.mean(axis=(3, 4)).reshape((c, t)).transpose((1, 0))  # [T, C]
        t_a = audio_tokens.shape[0]
        visual_at_audio = align_audio_tokens(pooled, t_a)  # [T_a, C]
        q = self.q(pooled)
        k = self.k(audio_tokens)
        v = self.v(visual_at_audio)
        scores = (q @ k.transpose((1, 0))) * (1.0 / math.sqrt(self.attn_dim))
        attn = ops.softmax(scores, axis=1)  # [T, T_a]
        self.last_attention = attn.data.copy()
        ctx = self.out(attn @ v)  # [T, C]
        return x + _tile_time_vectors(ctx, x.shape)


FUSION_MODES = ("amfb", "concat", "cross_attention")


def make_fusion(mode: str, channels: int, audio_dim: int, offset_clip: float = 0.0, rng=None, dtype=np.float64) -> Module:
    if mode == "amfb":
        return TriStreamFusion(channels, audio_dim, offset_clip, rng=rng, dtype=dtype)
    if mode == "concat":
        return ConcatFusion(channels, audio_dim, rng=rng, dtype=dtype)
    if mode == "cross_attention":
        return CrossAttentionFusion(channels, audio_dim, rng=rng, dtype=dtype)
    raise ValueError(f"unknown fusion mode '{mode}'")
