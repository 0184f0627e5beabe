"""Log-mel filterbank front-end, segment cropping and feature-file I/O."""

from __future__ import annotations

import struct
import wave
from pathlib import Path

import numpy as np

from pvectors.errors import FormatError

LOG_FLOOR = 1e-10
FEATURE_MAGIC = b"PVFB"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIII")
MAX_DIM = 1 << 24


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> tuple[np.ndarray, np.ndarray]:
    """Triangular HTK-scale filters spanning 0 Hz to Nyquist.

    Returns the (n_mels, n_fft // 2 + 1) weight matrix and the filter centre
    frequencies in Hz.
    """
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    bins = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins - lower) / (centre - lower)
    falling = (upper - bins) / (upper - centre)
    return np.maximum(0.0, np.minimum(rising, falling)), edges[1:-1]


def frame_count(n_samples: int, win: int, hop: int) -> int:
    return (n_samples - win) // hop + 1


def fbank(
    samples: np.ndarray,
    sample_rate: int = 16000,
    window_ms: float = 25.0,
    hop_ms: float = 10.0,
    n_mels: int = 80,
) -> np.ndarray:
    """Compute an (n_mels, frames) log-mel power filterbank.

    Hamming window, power spectrum from a zero-padded DFT of the next power of
    two, no pre-emphasis and no mean normalization.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if sample_rate <= 0:
        raise ValueError("sample_rate must be positive")
    win = int(round(sample_rate * window_ms / 1000.0))
    hop = int(round(sample_rate * hop_ms / 1000.0))
    if samples.ndim != 1 or samples.size < win:
        raise ValueError(f"need at least one {win}-sample window, got {samples.size} samples")
    n_frames = frame_count(samples.size, win, hop)
    n_fft = next_pow2(win)

    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = samples[idx] * np.hamming(win)
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    weights, _ = mel_filterbank(n_mels, n_fft, sample_rate)
    energies = power @ weights.T
    return np.log(np.maximum(energies, LOG_FLOOR)).T


def crop_segment(feat: np.ndarray, frames: int, rng: np.random.Generator) -> np.ndarray:
    """Random contiguous crop of ``frames`` columns; shorter inputs repeat cyclically."""
    total = feat.shape[1]
    if total == frames:
        return feat.copy()
    if total > frames:
        start = int(rng.integers(0, total - frames + 1))
        return feat[:, start : start + frames].copy()
    return feat[:, np.arange(frames) % total]


def write_features(path, feat: np.ndarray) -> None:
    feat = np.asarray(feat)
    if feat.ndim != 2:
        raise FormatError(f"feature matrix must be 2-D, got shape {feat.shape}")
    rows, cols = feat.shape
    payload = np.ascontiguousarray(feat, dtype="<f4").tobytes()
    Path(path).write_bytes(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, rows, cols) + payload)


def read_features(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, rows, cols = _HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if rows == 0 or cols == 0 or rows > MAX_DIM or cols > MAX_DIM:
        raise FormatError(f"{path}: implausible dimensions {rows}x{cols}")
    expected = _HEADER.size + rows * cols * 4
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(rows, cols)
    return data.astype(np.float64)


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read 16-bit mono PCM as floats in [-1, 1)."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise FormatError(f"{path}: only 16-bit mono PCM is supported")
        rate = w.getframerate()
        raw = w.readframes(w.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, rate


def write_wav(path, samples: np.ndarray, sample_rate: int = 16000) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


def wav_to_features(path, n_mels: int = 80) -> np.ndarray:
    samples, rate = read_wav(path)
    return fbank(samples, rate, n_mels=n_mels)
