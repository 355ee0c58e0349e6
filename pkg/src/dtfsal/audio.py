"""Audio branch: waveform -> segmented log-mel stacks -> temporal features.

The waveform is framed with a Hann window, projected through a triangular
mel filterbank (HTK mel scale), log-compressed, and cut into overlapping
segments of a fixed [n_mels x frames] geometry. A small strided conv stack
encodes each segment and a single pre-norm attention block mixes the
segment sequence into per-segment feature vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .nn import Conv3d, LastAxisLayerNorm, Linear, Module
from .tensor import ShapeError, Tensor

LOG_EPS = 1e-6


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ShapeError("AudioClip expects a mono waveform")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class LogMelStack:
    """T_a log-mel segments of identical [n_mels, frames] geometry."""

    segments: np.ndarray  # [T_a, n_mels, frames]
    sample_rate: int
    n_fft: int
    hop: int
    overlap_samples: int

    @property
    def count(self) -> int:
        return self.segments.shape[0]

    @property
    def segment_shape(self) -> tuple[int, int]:
        return self.segments.shape[1], self.segments.shape[2]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, f_min: float, f_max: float) -> np.ndarray:
    """Triangular filters over rfft bins, [n_mels, n_fft//2 + 1].

    Bands whose triangle straddles no bin center (possible at low frequency
    with many narrow bands) fall back to unit weight on the nearest bin, so
    every row has positive mass.
    """
    n_bins = n_fft // 2 + 1
    bin_freqs = np.arange(n_bins) * (sample_rate / n_fft)
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    fb = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, center, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = (bin_freqs - lo) / max(center - lo, 1e-12)
        falling = (hi - bin_freqs) / max(hi - center, 1e-12)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
        if fb[m].sum() <= 0.0:
            fb[m, int(np.argmin(np.abs(bin_freqs - center)))] = 1.0
    return fb


def stft_power(samples: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """Power spectrogram [n_fft//2+1, frames]; frames start at multiples of hop."""
    if len(samples) < n_fft:
        raise ShapeError(f"waveform of {len(samples)} samples is shorter than one {n_fft}-sample window")
    n_frames = 1 + (len(samples) - n_fft) // hop
    window = np.hanning(n_fft + 1)[:-1]  # periodic Hann
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = samples[idx] * window
    spec = np.fft.rfft(frames, axis=1)
    return (spec.real**2 + spec.imag**2).T


def segment_sample_count(segment_frames: int, n_fft: int, hop: int) -> int:
    """Waveform samples consumed by one segment of ``segment_frames`` STFT frames."""
    return (segment_frames - 1) * hop + n_fft


def stack_sample_count(n_segments: int, segment_frames: int, n_fft: int, hop: int, sample_rate: int, overlap_ms: float = 11.0) -> int:
    """Total samples for exactly ``n_segments`` segments at the given overlap."""
    seg = segment_sample_count(segment_frames, n_fft, hop)
    overlap = int(round(overlap_ms * 1e-3 * sample_rate))
    return n_segments * seg - (n_segments - 1) * overlap


def stft_logmel(
    clip: AudioClip,
    n_fft: int,
    hop: int,
    n_mels: int,
    f_min: float = 0.0,
    f_max: float | None = None,
    segment_frames: int = 192,
    overlap_ms: float = 11.0,
) -> LogMelStack:
    """Segmented log-mel spectrogram of a clip.

    Adjacent segments overlap by ``overlap_ms`` of waveform. A clip shorter
    than one full segment (but at least one window) is zero-padded to a
    single segment.
    """
    if n_fft & (n_fft - 1) != 0 or n_fft <= 0:
        raise ValueError(f"n_fft must be a power of two, got {n_fft}")
    if hop > n_fft or hop <= 0:
        raise ValueError(f"hop must be in [1, n_fft], got {hop}")
    n_bins = n_fft // 2 + 1
    if n_mels > n_bins:
        raise ValueError(f"n_mels {n_mels} exceeds {n_bins} rfft bins")
    if f_max is None:
        f_max = clip.sample_rate / 2.0

    samples = clip.samples
    if len(samples) < n_fft:
        raise ShapeError(f"clip of {len(samples)} samples is shorter than one {n_fft}-sample window")
    seg_len = segment_sample_count(segment_frames, n_fft, hop)
    overlap = int(round(overlap_ms * 1e-3 * clip.sample_rate))
    step = seg_len - overlap
    if step <= 0:
        raise ValueError("segment overlap must be shorter than a segment")
    if len(samples) < seg_len:
        samples = np.pad(samples, (0, seg_len - len(samples)))
    n_segments = 1 + (len(samples) - seg_len) // step

    fb = mel_filterbank(n_mels, n_fft, clip.sample_rate, f_min, f_max)
    out = np.empty((n_segments, n_mels, segment_frames))
    for s in range(n_segments):
        chunk = samples[s * step : s * step + seg_len]
        power = stft_power(chunk, n_fft, hop)
        out[s] = np.log(fb @ power + LOG_EPS)
    return LogMelStack(out, clip.sample_rate, n_fft, hop, overlap)


@dataclass
class AudioFeatures:
    """Per-segment conv features and, after temporal mixing, token vectors."""

    maps: Tensor  # [T_a, C_a, 1, h_a, w_a]
    tokens: Tensor | None = None  # [T_a, D_a]

    @property
    def count(self) -> int:
        return self.maps.shape[0]


class AudioEncoder(Module):
    """Stand-in segment encoder: stride-2 3x3 conv stages with ReLU."""

    def __init__(self, channels=(16, 32, 64, 128), rng=None, dtype=np.float64):
        super().__init__()
        self.stages = []
        c_in = 1
        for c_out in channels:
            self.stages.append(
                Conv3d(c_in, c_out, (1, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1), rng=rng, dtype=dtype)
            )
            c_in = c_out
        self.out_channels = c_in

    def forward(self, stack: LogMelStack, dtype=np.float64) -> AudioFeatures:
        x = Tensor(stack.segments[:, None, None, :, :].astype(dtype))
        for conv in self.stages:
            x = ops.relu(conv(x))
        return AudioFeatures(maps=x)

    @staticmethod
    def output_shape(n_mels: int, frames: int, n_stages: int = 4) -> tuple[int, int]:
        h, w = n_mels, frames
        for _ in range(n_stages):
            h = (h - 1) // 2 + 1
            w = (w - 1) // 2 + 1
        return h, w


class TemporalEnhancer(Module):
    """Pre-norm self-attention + feed-forward over the segment axis."""

    def __init__(self, in_channels: int, dim: int = 128, mlp_ratio: int = 2, rng=None, dtype=np.float64):
        super().__init__()
        self.dim = dim
        self.embed = Linear(in_channels, dim, rng=rng, dtype=dtype)
        self.ln_attn = LastAxisLayerNorm(dim, dtype=dtype)
        self.q = Linear(dim, dim, rng=rng, dtype=dtype)
        self.k = Linear(dim, dim, rng=rng, dtype=dtype)
        self.v = Linear(dim, dim, rng=rng, dtype=dtype)
        self.proj = Linear(dim, dim, rng=rng, dtype=dtype)
        self.ln_mlp = LastAxisLayerNorm(dim, dtype=dtype)
        self.mlp_in = Linear(dim, mlp_ratio * dim, rng=rng, dtype=dtype)
        self.mlp_out = Linear(mlp_ratio * dim, dim, rng=rng, dtype=dtype)
        self.last_attention: np.ndarray | None = None

    def forward(self, features: AudioFeatures) -> AudioFeatures:
        # Patch embedding stand-in: spatial mean of each segment map.
        pooled = features.maps.mean(axis=(2, 3, 4))  # [T_a, C_a]
        x = self.embed(pooled)
        h = self.ln_attn(x)
        q, k, v = self.q(h), self.k(h), self.v(h)
        scores = (q @ k.transpose((1, 0))) * (1.0 / math.sqrt(self.dim))
        attn = ops.softmax(scores, axis=1)
        self.last_attention = attn.data.copy()
        x = x + self.proj(attn @ v)
        y = x + self.mlp_out(ops.gelu(self.mlp_in(self.ln_mlp(x))))
        return AudioFeatures(maps=features.maps, tokens=y)


@dataclass
class AudioFrontendConfig:
    sample_rate: int = 16000
    n_fft: int = 512
    hop: int = 256
    n_mels: int = 112
    f_min: float = 0.0
    f_max: float | None = None
    segment_frames: int = 192
    overlap_ms: float = 11.0
    encoder_channels: tuple = (16, 32, 64, 128)
    feature_dim: int = 128


class AudioFrontend(Module):
    """Waveform to [T_a, D_a] token features."""

    def __init__(self, config: AudioFrontendConfig, rng=None, dtype=np.float64):
        super().__init__()
        self.config = config
        self.dtype = dtype
        self.encoder = AudioEncoder(config.encoder_channels, rng=rng, dtype=dtype)
        self.enhancer = TemporalEnhancer(
            self.encoder.out_channels, config.feature_dim, rng=rng, dtype=dtype
        )

    def logmel(self, clip: AudioClip) -> LogMelStack:
        c = self.config
        return stft_logmel(
            clip, c.n_fft, c.hop, c.n_mels, c.f_min, c.f_max, c.segment_frames, c.overlap_ms
        )

    def forward(self, stack: LogMelStack) -> AudioFeatures:
        return self.enhancer(self.encoder(stack, dtype=self.dtype))
