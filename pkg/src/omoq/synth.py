"""Labelled toy dataset for exercising the training and metric code.

This is *not* a time-scale modification simulator. Each clip is a harmonic
signal corrupted by broadband noise and amplitude warble whose strength
grows with a degradation level ``d`` in [0, 1]; the label is
``SMOS = 5 - 4 d``, so heavier degradation always means a lower score.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .audio import EXPECTED_RATE, write_wav
from .training import SIGNAL_CLASSES, ManifestRow, write_manifest

METHODS = ("SYN-A", "SYN-B", "SYN-C", "SYN-D")
BETAS = ("0.5", "0.8", "1.25", "1.6")


def _harmonic(f0, t, n_harm, rng, vibrato=0.0):
    phase = 2 * np.pi * f0 * t
    if vibrato:
        phase += vibrato * np.sin(2 * np.pi * 5.5 * t) / 5.5 * f0 * 0.02
    out = np.zeros_like(t)
    for k in range(1, n_harm + 1):
        out += np.sin(k * phase + rng.uniform(0, 2 * np.pi)) / k
    return out


def clean_signal(cls: str, duration: float, rng, rate: int = EXPECTED_RATE) -> np.ndarray:
    t = np.arange(int(duration * rate)) / rate
    if cls == "Musical":
        x = sum(_harmonic(f, t, 5, rng) for f in rng.uniform(110, 440, size=3))
    elif cls == "Solo":
        x = _harmonic(rng.uniform(196, 660), t, 6, rng, vibrato=1.0)
    elif cls == "Voice":
        f0 = rng.uniform(100, 220) * (1 + 0.1 * t / duration)
        x = _harmonic(f0, t, 12, rng) * (0.6 + 0.4 * np.sin(2 * np.pi * 4 * t) ** 2)
    else:
        raise ValueError(f"unknown signal class {cls!r}")
    fade = min(len(t) // 10, int(0.01 * rate))
    env = np.ones_like(t)
    env[:fade] = np.linspace(0, 1, fade)
    env[len(t) - fade :] = np.linspace(1, 0, fade)
    return x * env


def degrade(x: np.ndarray, d: float, rng, rate: int = EXPECTED_RATE) -> np.ndarray:
    """Additive white noise (SNR 35 dB down to -5 dB) plus 12 Hz amplitude warble of depth 0.8 d."""
    t = np.arange(len(x)) / rate
    warbled = x * (1 - 0.8 * d * 0.5 * (1 + np.sin(2 * np.pi * 12 * t)))
    snr_db = 35.0 - 40.0 * d
    noise = rng.standard_normal(len(x))
    noise *= np.sqrt(np.mean(warbled**2) / np.mean(noise**2) / 10 ** (snr_db / 10))
    return warbled + noise


def synthesize(n: int, out_dir, seed: int = 0, splits=(0.8, 0.1, 0.1),
               duration=(0.8, 1.4), rate: int = EXPECTED_RATE) -> list[ManifestRow]:
    """Write ``n`` WAVs plus ``manifest.csv`` into ``out_dir``; returns the rows."""
    if n < 2:
        raise ValueError("need at least two clips")
    out = Path(out_dir).resolve()
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    levels = np.linspace(0.0, 1.0, n)[rng.permutation(n)]
    n_train = int(round(splits[0] * n))
    n_val = int(round(splits[1] * n))
    order = rng.permutation(n)
    split_of = np.empty(n, dtype=object)
    split_of[order[:n_train]] = "train"
    split_of[order[n_train : n_train + n_val]] = "val"
    split_of[order[n_train + n_val :]] = "test"
    rows = []
    for i in range(n):
        cls = SIGNAL_CLASSES[i % len(SIGNAL_CLASSES)]
        x = degrade(clean_signal(cls, rng.uniform(*duration), rng, rate), levels[i], rng, rate)
        x *= 0.9 / np.max(np.abs(x))
        path = out / f"clip_{i:04d}.wav"
        write_wav(path, x, rate)
        rows.append(ManifestRow(str(path), round(5.0 - 4.0 * float(levels[i]), 6), METHODS[i % len(METHODS)],
                                BETAS[(i // len(METHODS)) % len(BETAS)], cls, str(split_of[i])))
    write_manifest(out / "manifest.csv", rows, relative_to=out)
    return rows
