"""Audio front end: filterbank properties, segmentation geometry, attention."""

import math

import numpy as np
import pytest

from dtfsal import audio
from dtfsal.audio import (
    AudioClip,
    AudioEncoder,
    AudioFrontend,
    AudioFrontendConfig,
    TemporalEnhancer,
    mel_filterbank,
    segment_sample_count,
    stack_sample_count,
    stft_logmel,
)
from dtfsal.tensor import ShapeError


def test_silence_gives_log_eps_everywhere():
    n = stack_sample_count(2, 8, 64, 32, 1000)
    clip = AudioClip(np.zeros(n), 1000)
    stack = stft_logmel(clip, n_fft=64, hop=32, n_mels=8, segment_frames=8)
    np.testing.assert_allclose(stack.segments, math.log(audio.LOG_EPS), atol=1e-12)


def test_sine_peaks_at_nearest_mel_band():
    sr, n_fft, hop, n_mels = 16000, 512, 256, 40
    n = stack_sample_count(1, 64, n_fft, hop, sr)
    t = np.arange(n) / sr
    clip = AudioClip(0.8 * np.sin(2 * np.pi * 440.0 * t), sr)
    stack = stft_logmel(clip, n_fft, hop, n_mels, segment_frames=64)
    got_band = int(np.argmax(stack.segments[0].mean(axis=1)))
    # Oracle: band whose triangle center frequency is nearest 440 Hz.
    edges = audio.mel_to_hz(np.linspace(audio.hz_to_mel(0.0), audio.hz_to_mel(sr / 2), n_mels + 2))
    centers = edges[1:-1]
    expect_band = int(np.argmin(np.abs(centers - 440.0)))
    assert got_band == expect_band


def test_reference_segment_geometry():
    # 16 kHz, n_fft 512, hop 256, 112 mel bands -> nine 112x192 segments.
    sr, n_fft, hop, n_mels, frames = 16000, 512, 256, 112, 192
    n = stack_sample_count(9, frames, n_fft, hop, sr, overlap_ms=11.0)
    clip = AudioClip(np.random.default_rng(0).uniform(-0.5, 0.5, n), sr)
    stack = stft_logmel(clip, n_fft, hop, n_mels, segment_frames=frames)
    assert stack.count == 9
    assert stack.segment_shape == (112, 192)


def test_filterbank_rows_all_positive_on_ones():
    for n_mels, n_fft, sr in ((112, 512, 16000), (8, 64, 1000), (40, 256, 8000)):
        fb = mel_filterbank(n_mels, n_fft, sr, 0.0, sr / 2)
        response = fb @ np.ones(n_fft // 2 + 1)
        assert np.all(response > 0), f"empty band for n_mels={n_mels}"


def test_segmentation_covers_clip_with_configured_overlap():
    sr, n_fft, hop, frames = 1000, 64, 32, 8
    seg = segment_sample_count(frames, n_fft, hop)
    overlap = int(round(11e-3 * sr))
    for k in (1, 3, 5):
        n = stack_sample_count(k, frames, n_fft, hop, sr)
        assert n == k * seg - (k - 1) * overlap
        clip = AudioClip(np.random.default_rng(k).uniform(-1, 1, n), sr)
        stack = stft_logmel(clip, n_fft, hop, 8, segment_frames=frames)
        assert stack.count == k
        step = seg - overlap
        assert (k - 1) * step + seg == n  # exact tiling at the stated overlap


def test_too_short_clip_errors():
    with pytest.raises(ShapeError):
        stft_logmel(AudioClip(np.zeros(32), 1000), n_fft=64, hop=32, n_mels=8, segment_frames=4)


def test_parameter_validation():
    n = stack_sample_count(1, 8, 64, 32, 1000)
    clip = AudioClip(np.zeros(n), 1000)
    with pytest.raises(ValueError):
        stft_logmel(clip, n_fft=60, hop=32, n_mels=8, segment_frames=8)
    with pytest.raises(ValueError):
        stft_logmel(clip, n_fft=64, hop=128, n_mels=8, segment_frames=8)
    with pytest.raises(ValueError):
        stft_logmel(clip, n_fft=64, hop=32, n_mels=64, segment_frames=8)


def _small_stack(n_segments=3, n_mels=16, frames=8):
    rng = np.random.default_rng(1)
    segs = rng.standard_normal((n_segments, n_mels, frames))
    return audio.LogMelStack(segs, 1000, 64, 32, 11)


def test_encoder_output_shape_law():
    # 112x192 through the default four stride-2 stages -> 7x12x128.
    assert AudioEncoder.output_shape(112, 192, 4) == (7, 12)
    rng = np.random.default_rng(2)
    enc = AudioEncoder(channels=(4, 8), rng=rng)
    stack = _small_stack()
    feats = enc(stack)
    assert tuple(feats.maps.shape) == (3, 8, 1, 4, 2)


def test_encoder_zero_input_zero_features():
    rng = np.random.default_rng(3)
    enc = AudioEncoder(channels=(4, 8), rng=rng)
    stack = audio.LogMelStack(np.zeros((2, 16, 8)), 1000, 64, 32, 11)
    feats = enc(stack)
    np.testing.assert_array_equal(feats.maps.data, 0.0)


def test_encoder_identical_segments_identical_features():
    rng = np.random.default_rng(4)
    enc = AudioEncoder(channels=(4, 8), rng=rng)
    seg = np.random.default_rng(5).standard_normal((16, 8))
    stack = audio.LogMelStack(np.stack([seg, seg]), 1000, 64, 32, 11)
    feats = enc(stack).maps.data
    np.testing.assert_array_equal(feats[0], feats[1])


def test_single_token_attention_is_one():
    rng = np.random.default_rng(6)
    enh = TemporalEnhancer(8, dim=8, rng=rng)
    feats = audio.AudioFeatures(maps=__import__("dtfsal.tensor", fromlist=["Tensor"]).Tensor(
        np.random.default_rng(7).standard_normal((1, 8, 1, 4, 2))
    ))
    out = enh(feats)
    assert enh.last_attention.shape == (1, 1)
    assert enh.last_attention[0, 0] == pytest.approx(1.0)
    assert out.tokens.shape == (1, 8)


def test_uniform_tokens_give_uniform_attention():
    rng = np.random.default_rng(8)
    enh = TemporalEnhancer(8, dim=8, rng=rng)
    seg = np.random.default_rng(9).standard_normal((1, 8, 1, 4, 2))
    maps = np.repeat(seg, 4, axis=0)
    from dtfsal.tensor import Tensor

    enh(audio.AudioFeatures(maps=Tensor(maps)))
    np.testing.assert_allclose(enh.last_attention, 0.25, atol=1e-12)


def test_attention_matches_direct_oracle_and_rows_sum_to_one():
    rng = np.random.default_rng(10)
    enh = TemporalEnhancer(6, dim=6, rng=rng)
    from dtfsal.tensor import Tensor

    maps = Tensor(np.random.default_rng(11).standard_normal((3, 6, 1, 2, 2)))
    enh(audio.AudioFeatures(maps=maps))
    attn = enh.last_attention
    np.testing.assert_allclose(attn.sum(axis=1), 1.0, atol=1e-10)

    # Direct softmax(QK^T/sqrt(d)) oracle from the module's own projections.
    pooled = maps.data.mean(axis=(2, 3, 4))
    x = pooled @ enh.embed.weight.data.T + enh.embed.bias.data
    mu = x.mean(axis=1, keepdims=True)
    sd = np.sqrt(x.var(axis=1, keepdims=True) + enh.ln_attn.eps)
    hn = (x - mu) / sd * enh.ln_attn.gamma.data + enh.ln_attn.beta.data
    q = hn @ enh.q.weight.data.T + enh.q.bias.data
    k = hn @ enh.k.weight.data.T + enh.k.bias.data
    scores = q @ k.T / math.sqrt(6)
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    ref = e / e.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(attn, ref, rtol=1e-10)


def test_frontend_end_to_end_shapes():
    cfg = AudioFrontendConfig(
        sample_rate=1000, n_fft=64, hop=32, n_mels=8, segment_frames=4,
        encoder_channels=(4, 8), feature_dim=12,
    )
    fe = AudioFrontend(cfg, rng=np.random.default_rng(12))
    n = stack_sample_count(4, 4, 64, 32, 1000)
    clip = AudioClip(np.random.default_rng(13).uniform(-1, 1, n), 1000)
    stack = fe.logmel(clip)
    feats = fe(stack)
    assert feats.tokens.shape == (4, 12)
