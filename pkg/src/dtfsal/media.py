"""File formats: WAV in, PGM/PNG out, clip loading.

PGM (binary P5, maxval 255) is the primary image output because it is
byte-exact and trivially diffable; PNG is written too when Pillow is
importable. Clips load from a .npy array [T, H, W, 3] or a directory of
numbered frame images.
"""

from __future__ import annotations

import struct
import wave
from pathlib import Path

import numpy as np

from .audio import AudioClip
from .encoder import VideoClip


class MediaError(IOError):
    pass


# -- audio ------------------------------------------------------------------


def read_wav(path: str, target_rate: int | None = None) -> AudioClip:
    """PCM 16-bit mono WAV; optionally resampled by linear interpolation."""
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            frames = wf.readframes(wf.getnframes())
    except (OSError, wave.Error) as e:
        raise MediaError(f"cannot read WAV '{path}': {e}") from None
    if width != 2:
        raise MediaError(f"'{path}': expected 16-bit PCM, got {8 * width}-bit")
    if n_channels != 1:
        raise MediaError(f"'{path}': expected mono audio, got {n_channels} channels")
    samples = np.frombuffer(frames, dtype="<i2").astype(np.float64) / 32768.0
    if target_rate is not None and target_rate != rate:
        samples = resample_linear(samples, rate, target_rate)
        rate = target_rate
    return AudioClip(samples, rate)


def write_wav(path: str, clip: AudioClip) -> None:
    pcm = np.clip(np.round(clip.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate)
        wf.writeframes(pcm.tobytes())


def resample_linear(samples: np.ndarray, rate_in: int, rate_out: int) -> np.ndarray:
    n_out = int(round(len(samples) * rate_out / rate_in))
    t_in = np.arange(len(samples)) / rate_in
    t_out = np.arange(n_out) / rate_out
    return np.interp(t_out, t_in, samples)


# -- images -----------------------------------------------------------------


def to_uint8(img01: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(255.0 * np.asarray(img01, dtype=np.float64)), 0, 255).astype(np.uint8)


def write_pgm(path: str, img01: np.ndarray) -> None:
    img = to_uint8(img01)
    if img.ndim != 2:
        raise MediaError("PGM output must be a 2-D grayscale map")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    if parts[0].strip() != b"P5":
        raise MediaError(f"'{path}' is not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    maxval = int(parts[2])
    data = parts[3][: w * h]
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).astype(np.float64) / maxval


def write_png(path: str, img: np.ndarray) -> bool:
    """Write 8-bit PNG via Pillow; returns False if Pillow is unavailable."""
    try:
        from PIL import Image
    except ImportError:
        return False
    arr = to_uint8(img) if img.dtype != np.uint8 else img
    Image.fromarray(arr).save(str(path))
    return True


def overlay(frame01: np.ndarray, saliency01: np.ndarray, alpha: float = 0.6) -> np.ndarray:
    """Blend a red saliency heat layer over an RGB frame."""
    frame = np.asarray(frame01, dtype=np.float64)
    heat = np.zeros_like(frame)
    heat[:, :, 0] = saliency01
    return np.clip((1 - alpha * saliency01[..., None]) * frame + alpha * saliency01[..., None] * heat, 0, 1)


# -- clips ------------------------------------------------------------------

_FRAME_SUFFIXES = (".png", ".pgm", ".npy")


def load_clip(path: str, fps: float = 8.0) -> VideoClip:
    p = Path(path)
    if p.is_file() and p.suffix == ".npy":
        arr = np.load(str(p))
        if arr.dtype == np.uint8:
            arr = arr.astype(np.float64) / 255.0
        return VideoClip(arr, fps=fps)
    if p.is_dir():
        frames = sorted(f for f in p.iterdir() if f.suffix.lower() in _FRAME_SUFFIXES)
        if not frames:
            raise MediaError(f"no frame images in '{path}'")
        stack = [_load_frame(f) for f in frames]
        return VideoClip(np.stack(stack), fps=fps)
    raise MediaError(f"cannot load clip from '{path}' (need a .npy file or a frame directory)")


def _load_frame(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        arr = np.load(str(path))
        if arr.dtype == np.uint8:
            arr = arr.astype(np.float64) / 255.0
    elif path.suffix == ".pgm":
        g = read_pgm(str(path))
        arr = np.stack([g, g, g], axis=-1)
    else:
        try:
            from PIL import Image
        except ImportError:
            raise MediaError("PNG frames need Pillow installed") from None
        arr = np.asarray(Image.open(str(path)).convert("RGB"), dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = np.stack([arr, arr, arr], axis=-1)
    return arr
