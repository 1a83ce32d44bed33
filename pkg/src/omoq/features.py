"""Spectral and cepstral input representations.

All transforms operate on an :class:`~omoq.audio.AudioClip` and return a
time-major :class:`FeatureMatrix` of shape ``(frames, feature_dim)``.
Frames lie fully inside the signal (no centring or padding).
"""

from __future__ import annotations

import csv
import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import AudioClip, load_clip

KINDS = ("mag", "phase", "mag_phase", "power", "mfcc", "mfcc_d", "mfcc_d_dd")
N_MFCC = 128
LOG_FLOOR = 1e-10
STD_FLOOR = 1e-8
DELTA_WIDTH = 9


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class StftConfig:
    frame_length: int = 2048
    hop: int | None = None
    center: bool = False

    def __post_init__(self):
        n = self.frame_length
        if n <= 0 or n & (n - 1):
            raise FeatureError(f"frame length must be a power of two, got {n}")
        if self.hop is None:
            object.__setattr__(self, "hop", n // 2)
        if not 0 < self.hop <= n:
            raise FeatureError(f"hop must be in (0, {n}], got {self.hop}")
        if self.center:
            raise FeatureError("centred framing is not supported")

    @property
    def n_bins(self) -> int:
        return self.frame_length // 2 + 1


@dataclass
class FeatureMatrix:
    data: np.ndarray
    kind: str

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise FeatureError(f"feature matrix must be (L>=1, D), got {self.data.shape}")

    @property
    def frame_count(self) -> int:
        return self.data.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.data.shape[1]


def feature_dim(kind: str, n_fft: int = 2048, n_mfcc: int = N_MFCC) -> int:
    bins = n_fft // 2 + 1
    dims = {
        "mag": bins,
        "phase": bins,
        "power": bins,
        "mag_phase": 2 * bins,
        "mfcc": n_mfcc,
        "mfcc_d": 2 * n_mfcc,
        "mfcc_d_dd": 3 * n_mfcc,
    }
    try:
        return dims[kind]
    except KeyError:
        raise FeatureError(f"unknown feature kind {kind!r}; expected one of {KINDS}") from None


def hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_count(n_samples: int, cfg: StftConfig) -> int:
    if n_samples < cfg.frame_length:
        return 0
    return 1 + (n_samples - cfg.frame_length) // cfg.hop


def stft(clip: AudioClip | np.ndarray, cfg: StftConfig | None = None) -> np.ndarray:
    """Hann-windowed real FFT of each frame, shape ``(L, N/2 + 1)``."""
    cfg = cfg or StftConfig()
    x = np.asarray(clip.samples if isinstance(clip, AudioClip) else clip, dtype=np.float64)
    n_frames = frame_count(len(x), cfg)
    if n_frames < 1:
        raise FeatureError(f"clip of {len(x)} samples is shorter than one {cfg.frame_length}-sample frame")
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.frame_length)[:: cfg.hop][:n_frames]
    return np.fft.rfft(frames * hann_periodic(cfg.frame_length), axis=1)


def spectra(frames: np.ndarray, kind: str) -> FeatureMatrix:
    """Magnitude, phase, power or concatenated magnitude/phase spectra."""
    if kind == "mag":
        data = np.abs(frames)
    elif kind == "phase":
        data = np.angle(frames)
        # np.angle returns [-pi, pi]; map -pi onto pi so the range is (-pi, pi].
        data[data == -np.pi] = np.pi
    elif kind == "power":
        data = frames.real**2 + frames.imag**2
    elif kind == "mag_phase":
        return FeatureMatrix(
            np.concatenate([spectra(frames, "mag").data, spectra(frames, "phase").data], axis=1),
            kind,
        )
    else:
        raise FeatureError(f"{kind!r} is not a spectral feature kind")
    return FeatureMatrix(data, kind)


# Slaney mel scale: linear below 1 kHz, logarithmic above.
_F_SP = 200.0 / 3
_MIN_LOG_HZ = 1000.0
_MIN_LOG_MEL = _MIN_LOG_HZ / _F_SP
_LOGSTEP = np.log(6.4) / 27.0


def hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    mel = f / _F_SP
    log_region = f >= _MIN_LOG_HZ
    mel = np.where(log_region, _MIN_LOG_MEL + np.log(np.maximum(f, 1e-300) / _MIN_LOG_HZ) / _LOGSTEP, mel)
    return mel


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f = _F_SP * m
    return np.where(m >= _MIN_LOG_MEL, _MIN_LOG_HZ * np.exp(_LOGSTEP * (m - _MIN_LOG_MEL)), f)


@dataclass(frozen=True)
class MelFilterbank:
    weights: np.ndarray  # (n_mels, n_bins)
    centers_hz: np.ndarray
    fmin: float
    fmax: float

    @property
    def n_mels(self) -> int:
        return self.weights.shape[0]


def mel_filterbank(
    sample_rate: int,
    n_fft: int = 2048,
    n_mels: int = N_MFCC,
    fmin: float = 0.0,
    fmax: float | None = None,
) -> MelFilterbank:
    """Area-normalized triangular filters spaced uniformly on the mel scale."""
    fmax = sample_rate / 2 if fmax is None else fmax
    bin_hz = np.linspace(0.0, sample_rate / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    widths = np.diff(edges)
    ramps = edges[:, None] - bin_hz[None, :]
    rising = -ramps[:-2] / widths[:-1, None]
    falling = ramps[2:] / widths[1:, None]
    weights = np.maximum(0.0, np.minimum(rising, falling))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    return MelFilterbank(weights, edges[1:-1], fmin, fmax)


_DCT_CACHE: dict[int, np.ndarray] = {}


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix ``M`` with ``y = M @ x``."""
    if n not in _DCT_CACHE:
        k = np.arange(n)[:, None]
        i = np.arange(n)[None, :]
        m = np.cos(np.pi * k * (2 * i + 1) / (2 * n)) * np.sqrt(2.0 / n)
        m[0] /= np.sqrt(2.0)
        _DCT_CACHE[n] = m
    return _DCT_CACHE[n]


def mfcc(clip: AudioClip, n_mfcc: int = N_MFCC, cfg: StftConfig | None = None, n_mels: int | None = None) -> FeatureMatrix:
    """MFCCs: power spectrum -> mel energies -> natural log -> orthonormal DCT-II."""
    cfg = cfg or StftConfig()
    n_mels = n_mfcc if n_mels is None else n_mels
    if n_mfcc > n_mels:
        raise FeatureError("n_mfcc cannot exceed the number of mel filters")
    power = spectra(stft(clip, cfg), "power").data
    fb = mel_filterbank(clip.sample_rate, cfg.frame_length, n_mels)
    log_mel = np.log(power @ fb.weights.T + LOG_FLOOR)
    ceps = log_mel @ dct_matrix(n_mels).T
    return FeatureMatrix(ceps[:, :n_mfcc], "mfcc")


def delta(data: np.ndarray, width: int = DELTA_WIDTH) -> np.ndarray:
    """Regression deltas along time with edge frames replicated."""
    if width < 3 or width % 2 == 0:
        raise FeatureError("delta width must be odd and >= 3")
    half = width // 2
    padded = np.pad(data, ((half, half), (0, 0)), mode="edge")
    n = data.shape[0]
    out = np.zeros_like(data, dtype=np.float64)
    for k in range(1, half + 1):
        out += k * (padded[half + k : half + k + n] - padded[half - k : half - k + n])
    return out / (2.0 * sum(k * k for k in range(1, half + 1)))


def deltas(feat: FeatureMatrix, order: int) -> FeatureMatrix:
    """Append first (order 1) or first and second (order 2) deltas."""
    if order not in (1, 2):
        raise FeatureError("delta order must be 1 or 2")
    d1 = delta(feat.data)
    parts = [feat.data, d1]
    if order == 2:
        parts.append(delta(d1))
    kind = "mfcc_d" if order == 1 else "mfcc_d_dd"
    return FeatureMatrix(np.concatenate(parts, axis=1), kind)


def extract(clip: AudioClip, kind: str, cfg: StftConfig | None = None) -> FeatureMatrix:
    """Compute any of the supported feature kinds for one clip."""
    feature_dim(kind)
    if kind in ("mag", "phase", "power", "mag_phase"):
        return spectra(stft(clip, cfg), kind)
    base = mfcc(clip, cfg=cfg)
    if kind == "mfcc":
        return base
    return deltas(base, 1 if kind == "mfcc_d" else 2)


# -- standardization ---------------------------------------------------------


@dataclass
class StandardizeStats:
    mode: str
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mode": self.mode, "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "StandardizeStats":
        return cls(d["mode"], np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def compute_stats(feats: list[FeatureMatrix], mode: str) -> StandardizeStats | None:
    """Moments over the given (training) features. ``mode="none"`` gives ``None``."""
    if mode == "none":
        return None
    if not feats:
        raise FeatureError("cannot compute standardization stats from no features")
    stacked = np.concatenate([f.data for f in feats], axis=0).astype(np.float64)
    if mode == "overall":
        mean, std = np.array([stacked.mean()]), np.array([stacked.std()])
    elif mode == "per_bin":
        mean, std = stacked.mean(axis=0), stacked.std(axis=0)
    else:
        raise FeatureError(f"unknown standardization mode {mode!r}")
    return StandardizeStats(mode, mean, std)


def standardize(feat: FeatureMatrix, mode: str = "none", stats: StandardizeStats | None = None) -> FeatureMatrix:
    if mode == "none":
        return feat
    if stats is None:
        raise FeatureError(f"standardization mode {mode!r} requires training-set stats")
    if stats.mode != mode:
        raise FeatureError(f"stats were computed for mode {stats.mode!r}, not {mode!r}")
    std = np.maximum(stats.std, STD_FLOOR)
    return FeatureMatrix((feat.data - stats.mean) / std, feat.kind)


# -- feature cache -------------------------------------------------------------

CACHE_MAGIC = b"OMOQFEAT"
CACHE_VERSION = 1
_HEADER = struct.Struct("<8sI16sIIB")
_DTYPE_CODES = {1: np.dtype("<f4")}
INDEX_FIELDS = ["path", "kind", "L", "D_F", "mtime", "sha256", "cache_file"]


def write_feature_blob(path, feat: FeatureMatrix) -> None:
    data = np.ascontiguousarray(feat.data, dtype="<f4")
    header = _HEADER.pack(CACHE_MAGIC, CACHE_VERSION, feat.kind.encode().ljust(16, b"\0"), data.shape[0], data.shape[1], 1)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())


def read_feature_blob(path) -> FeatureMatrix:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FeatureError(f"{path}: truncated feature blob")
    magic, version, kind, n_frames, dim, dtype_code = _HEADER.unpack_from(raw)
    if magic != CACHE_MAGIC:
        raise FeatureError(f"{path}: not a feature blob")
    if version != CACHE_VERSION:
        raise FeatureError(f"{path}: feature blob version {version}, expected {CACHE_VERSION}")
    dtype = _DTYPE_CODES.get(dtype_code)
    if dtype is None:
        raise FeatureError(f"{path}: unknown dtype code {dtype_code}")
    body = raw[_HEADER.size :]
    if len(body) != n_frames * dim * dtype.itemsize:
        raise FeatureError(f"{path}: payload size mismatch")
    data = np.frombuffer(body, dtype=dtype).reshape(n_frames, dim).astype(np.float64)
    return FeatureMatrix(data, kind.rstrip(b"\0").decode())


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class FeatureCache:
    """On-disk cache of per-clip feature blobs with a CSV index.

    An entry is reused when the source file's mtime matches, or when the
    mtime changed but its content hash did not.
    """

    root: Path
    entries: dict = field(default_factory=dict)
    hits: int = 0
    misses: int = 0

    def __post_init__(self):
        self.root = Path(self.root)
        self.root.mkdir(parents=True, exist_ok=True)
        index = self.root / "index.csv"
        if index.exists():
            with open(index, newline="") as fh:
                for row in csv.DictReader(fh):
                    self.entries[(row["path"], row["kind"])] = row

    def _blob_name(self, path: str, kind: str) -> str:
        return hashlib.sha1(f"{path}|{kind}".encode()).hexdigest()[:20] + ".feat"

    def _lookup(self, key_path: str, kind: str) -> FeatureMatrix | None:
        entry = self.entries.get((key_path, kind))
        if entry is None or not (self.root / entry["cache_file"]).exists():
            return None
        if entry["mtime"] == repr(os.stat(key_path).st_mtime) or entry["sha256"] == file_digest(key_path):
            return read_feature_blob(self.root / entry["cache_file"])
        return None

    def _store(self, key_path: str, kind: str, feat: FeatureMatrix) -> FeatureMatrix:
        name = self._blob_name(key_path, kind)
        write_feature_blob(self.root / name, feat)
        self.entries[(key_path, kind)] = {
            "path": key_path,
            "kind": kind,
            "L": str(feat.frame_count),
            "D_F": str(feat.feature_dim),
            "mtime": repr(os.stat(key_path).st_mtime),
            "sha256": file_digest(key_path),
            "cache_file": name,
        }
        return read_feature_blob(self.root / name)

    def get(self, wav_path, kind: str, loader=None) -> FeatureMatrix:
        key_path = str(Path(wav_path).resolve())
        feat = self._lookup(key_path, kind)
        if feat is not None:
            self.hits += 1
            return feat
        self.misses += 1
        return self._store(key_path, kind, extract((loader or load_clip)(key_path), kind))

    def get_many(self, wav_paths, kind: str, workers: int = 1) -> list[FeatureMatrix]:
        """Like :meth:`get` for many files; misses are computed on up to ``workers`` processes."""
        keys = [str(Path(p).resolve()) for p in wav_paths]
        found = {k: self._lookup(k, kind) for k in dict.fromkeys(keys)}
        todo = [k for k, f in found.items() if f is None]
        self.hits += len(found) - len(todo)
        self.misses += len(todo)
        if workers > 1 and len(todo) > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(max_workers=workers) as pool:
                computed = list(pool.map(_extract_file, todo, [kind] * len(todo)))
        else:
            computed = [_extract_file(k, kind) for k in todo]
        for k, feat in zip(todo, computed):
            found[k] = self._store(k, kind, feat)
        return [found[k] for k in keys]

    def flush(self) -> None:
        tmp = self.root / "index.csv.tmp"
        with open(tmp, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=INDEX_FIELDS)
            writer.writeheader()
            for key in sorted(self.entries):
                writer.writerow(self.entries[key])
        tmp.replace(self.root / "index.csv")


def _extract_file(path: str, kind: str) -> FeatureMatrix:
    try:
        return extract(load_clip(path), kind)
    except FeatureError as exc:
        raise FeatureError(f"{path}: {exc}") from exc
