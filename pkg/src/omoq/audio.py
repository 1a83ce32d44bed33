"""WAV decoding, mono downmix, peak normalization and silence trimming."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

log = logging.getLogger(__name__)

EXPECTED_RATE = 44100
SILENCE_THRESHOLD = 0.0061
SILENCE_WINDOW = 4


class AudioError(ValueError):
    """Raised for unreadable, unsupported or degenerate audio."""


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    source_path: str = ""

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def decode_wav(path) -> tuple[np.ndarray, int]:
    """Read a RIFF/WAVE file.

    Returns ``(samples, rate)`` where ``samples`` has shape
    ``(n_samples, n_channels)`` as float64. PCM-16 is divided by 32768,
    IEEE float-32 is passed through.
    """
    path = Path(path)
    if not path.exists():
        raise AudioError(f"{path}: no such file")
    try:
        rate, data = wavfile.read(path)
    except Exception as exc:  # scipy raises ValueError or struct errors
        raise AudioError(f"{path}: unreadable WAV ({exc})") from exc

    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise AudioError(f"{path}: unsupported sample format {data.dtype}")

    if samples.ndim == 1:
        samples = samples[:, None]
    if samples.shape[0] == 0:
        raise AudioError(f"{path}: zero-length audio")
    return samples, int(rate)


def downmix_and_normalize(raw: np.ndarray) -> np.ndarray:
    """Sum channels per sample, then scale so the peak magnitude is 1."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim == 1:
        raw = raw[:, None]
    if raw.ndim != 2 or raw.shape[0] == 0 or raw.shape[1] == 0:
        raise AudioError("expected a non-empty (samples, channels) array")
    mono = raw.sum(axis=1)
    peak = np.max(np.abs(mono))
    if peak == 0.0:
        raise AudioError("all-zero signal cannot be normalized")
    return mono / peak


def _window_sums(samples: np.ndarray, mode: str) -> np.ndarray:
    if mode == "abs_of_sum":
        vals = samples
    elif mode == "sum_of_abs":
        vals = np.abs(samples)
    else:
        raise ValueError(f"unknown silence mode {mode!r}")
    # summed directly (not via cumsum differences) so threshold ties are exact
    n = len(vals) - SILENCE_WINDOW + 1
    sums = vals[:n].copy()
    for k in range(1, SILENCE_WINDOW):
        sums += vals[k : k + n]
    return np.abs(sums)


def trim_silence(
    clip: AudioClip,
    threshold: float = SILENCE_THRESHOLD,
    mode: str = "abs_of_sum",
) -> AudioClip:
    """Drop leading and trailing silence.

    A 4-sample window is loud when the magnitude of its sum exceeds
    ``threshold``. The result starts at the first loud window and ends at
    the last sample of the last loud window. ``mode="sum_of_abs"`` sums
    magnitudes instead.
    """
    x = np.asarray(clip.samples, dtype=np.float64)
    if len(x) < SILENCE_WINDOW:
        raise AudioError(f"{clip.source_path or 'clip'}: shorter than the silence window")
    loud = np.flatnonzero(_window_sums(x, mode) > threshold)
    if loud.size == 0:
        raise AudioError(f"{clip.source_path or 'clip'}: entirely silent")
    start = int(loud[0])
    stop = int(loud[-1]) + SILENCE_WINDOW
    return AudioClip(x[start:stop].copy(), clip.sample_rate, clip.source_path)


def load_clip(path, trim: bool = True, silence_mode: str = "abs_of_sum") -> AudioClip:
    """Decode, downmix, normalize and (optionally) trim a WAV file."""
    raw, rate = decode_wav(path)
    if rate != EXPECTED_RATE:
        warnings.warn(f"{path}: sample rate {rate} Hz (expected {EXPECTED_RATE}); not resampling")
    try:
        mono = downmix_and_normalize(raw)
    except AudioError as exc:
        raise AudioError(f"{path}: {exc}") from exc
    clip = AudioClip(mono, rate, str(path))
    if trim:
        clip = trim_silence(clip, mode=silence_mode)
    return clip


def write_wav(path, samples: np.ndarray, rate: int = EXPECTED_RATE) -> None:
    """Write mono or (n, channels) float samples in [-1, 1] as PCM-16."""
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 32767 / 32768)
    wavfile.write(path, rate, np.round(x * 32768.0).astype(np.int16))
