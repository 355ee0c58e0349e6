"""Synthetic audio-visual corpus: moving color blobs with a tracking tone.

Every sample is a short clip of Gaussian blobs drifting over a dark noisy
background plus a pure tone whose pitch names the target blob's color and
whose amplitude follows the target's horizontal position. Ground truth is a
blurred density centered on the target blob in the final frame, with
fixations sampled from it.

"Audio-decides" samples contain two blobs of different colors placed
mirror-symmetrically about the frame center; only the tone reveals which
one the ground truth follows, so frames alone cannot disambiguate them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .audio import AudioClip
from .config import DataConfig
from .encoder import VideoClip
from .metrics import gaussian_density

COLOR_PALETTE = ((1.0, 0.2, 0.1), (0.15, 1.0, 0.2))  # red-ish, green-ish
TONE_FREQS = (300.0, 900.0)  # Hz per color index
BACKGROUND_NOISE = 0.04
BLOB_MARGIN = 4.0


@dataclass
class SyntheticSample:
    clip: VideoClip
    audio: AudioClip
    density: np.ndarray
    fixations: np.ndarray
    kind: str  # "single" | "audio_decides"
    meta: dict = field(default_factory=dict)


@dataclass
class SyntheticCorpus:
    samples: list[SyntheticSample]
    audio_video_correlation: float
    config: DataConfig

    def subset(self, kind: str) -> list[SyntheticSample]:
        return [s for s in self.samples if s.kind == kind]


def _blob_track(rng: np.random.Generator, frames: int, h: int, w: int) -> np.ndarray:
    """Linear drift with wall reflection; [frames, 2] (y, x)."""
    pos = np.array(
        [rng.uniform(BLOB_MARGIN, h - BLOB_MARGIN), rng.uniform(BLOB_MARGIN, w - BLOB_MARGIN)]
    )
    vel = rng.uniform(-0.6, 0.6, size=2)
    track = np.empty((frames, 2))
    for t in range(frames):
        track[t] = pos
        pos = pos + vel
        for axis, limit in ((0, h), (1, w)):
            if pos[axis] < BLOB_MARGIN or pos[axis] > limit - BLOB_MARGIN:
                vel[axis] = -vel[axis]
                pos[axis] = np.clip(pos[axis], BLOB_MARGIN, limit - BLOB_MARGIN)
    return track


def _render_blob(frame: np.ndarray, center: np.ndarray, color, sigma: float) -> None:
    h, w, _ = frame.shape
    yy = np.arange(h)[:, None] - center[0]
    xx = np.arange(w)[None, :] - center[1]
    spot = np.exp(-(yy**2 + xx**2) / (2.0 * sigma**2))
    for ch in range(3):
        frame[:, :, ch] += color[ch] * spot


def _tone(
    rng: np.random.Generator,
    freq: float,
    x_track: np.ndarray,
    width: int,
    duration: float,
    sample_rate: int,
) -> np.ndarray:
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    # Amplitude follows the target's horizontal position frame by frame.
    frame_times = np.linspace(0.0, duration, len(x_track))
    amp = 0.25 + 0.5 * np.interp(t, frame_times, x_track / max(1, width - 1))
    return amp * np.sin(2.0 * np.pi * freq * t)


def _sample_fixations(rng: np.random.Generator, density: np.ndarray, count: int) -> np.ndarray:
    flat = density.ravel()
    idx = rng.choice(flat.size, size=count, replace=True, p=flat / flat.sum())
    fix = np.zeros(flat.size, dtype=np.int8)
    fix[idx] = 1
    return fix.reshape(density.shape)


def generate_synthetic(config: DataConfig) -> SyntheticCorpus:
    rng = np.random.default_rng(np.random.PCG64(config.seed))
    h, w, frames = config.height, config.width, config.frames
    duration = frames / config.fps

    n_decides = int(round(config.num_samples * config.audio_decides_fraction))
    kinds = np.array(["single"] * config.num_samples, dtype=object)
    kinds[rng.permutation(config.num_samples)[:n_decides]] = "audio_decides"

    samples: list[SyntheticSample] = []
    freq_idx_log, color_idx_log = [], []
    for kind in kinds:
        if kind == "audio_decides":
            track_a = _blob_track(rng, frames, h, w)
            # Mirror through the frame center: equidistant, visually symmetric.
            track_b = np.empty_like(track_a)
            track_b[:, 0] = (h - 1) - track_a[:, 0]
            track_b[:, 1] = (w - 1) - track_a[:, 1]
            tracks = [track_a, track_b]
            colors = [0, 1]
            target = int(rng.integers(0, 2))
        else:
            tracks = [_blob_track(rng, frames, h, w)]
            colors = [int(rng.integers(0, 2))]
            target = 0

        video = rng.uniform(0, BACKGROUND_NOISE, size=(frames, h, w, 3))
        for t in range(frames):
            for trk, color_idx in zip(tracks, colors):
                _render_blob(video[t], trk[t], COLOR_PALETTE[color_idx], config.blob_sigma)
        video = np.clip(video, 0.0, 1.0)

        target_color = colors[target]
        freq = TONE_FREQS[target_color]
        wave = _tone(rng, freq, tracks[target][:, 1], w, duration, config.audio_sample_rate)

        # Center the ground truth on the target's time-mean position; the
        # model's temporal pooling sees the whole window, not one frame.
        target_pos = tracks[target].mean(axis=0)
        onehot = np.zeros((h, w))
        onehot[int(round(target_pos[0])), int(round(target_pos[1]))] = 1.0
        density = gaussian_density(onehot, config.gt_sigma)
        fixations = _sample_fixations(rng, density, config.n_fixations)

        freq_idx_log.append(TONE_FREQS.index(freq))
        color_idx_log.append(target_color)
        samples.append(
            SyntheticSample(
                clip=VideoClip(video, fps=config.fps),
                audio=AudioClip(wave, config.audio_sample_rate),
                density=density,
                fixations=fixations,
                kind=str(kind),
                meta={
                    "target_color": target_color,
                    "tone_freq": freq,
                    "target_position": [float(target_pos[0]), float(target_pos[1])],
                    "n_blobs": len(tracks),
                },
            )
        )

    fi = np.asarray(freq_idx_log, dtype=float)
    ci = np.asarray(color_idx_log, dtype=float)
    if fi.std() > 0 and ci.std() > 0:
        corr = float(np.corrcoef(fi, ci)[0, 1])
    else:
        corr = 1.0
    return SyntheticCorpus(samples, audio_video_correlation=corr, config=config)
