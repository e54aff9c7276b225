"""MFCC front end: 13 cepstra + deltas + delta-deltas at a 10 ms hop.

Waveforms are 16 kHz mono PCM16. The static cepstra follow the usual
pipeline (pre-emphasis, Hamming window, power spectrum, triangular mel
filterbank, floored log, orthonormal DCT-II). Feature sequences are plain
``(n_frames, dim)`` float64 arrays; row ``i`` is centred at
``i * hop_ms + window_ms / 2``.
"""

from __future__ import annotations

import csv
import struct
import wave
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct

from vtinv.errors import DataError

SAMPLE_RATE = 16000
FEATURE_MAGIC = b"VTF1"


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __len__(self) -> int:
        return len(self.samples)

    def as_float(self) -> np.ndarray:
        x = np.asarray(self.samples)
        if x.dtype == np.int16:
            return x.astype(np.float64) / 32768.0
        return x.astype(np.float64)


@dataclass(frozen=True)
class MfccConfig:
    sample_rate: int = SAMPLE_RATE
    n_coeffs: int = 13
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_mel_filters: int = 26
    fft_size: int = 512
    log_floor: float = 1e-10
    pre_emphasis: float = 0.97
    fmin_hz: float = 0.0
    fmax_hz: float = 8000.0
    delta_radius: int = 2

    def __post_init__(self):
        if not 0 < self.n_coeffs <= self.n_mel_filters:
            raise DataError("n_coeffs must be in 1..n_mel_filters")
        if not self.window_ms > self.hop_ms > 0:
            raise DataError("require window_ms > hop_ms > 0")
        if self.log_floor <= 0:
            raise DataError("log_floor must be positive")
        if not 0 <= self.pre_emphasis < 1:
            raise DataError("pre_emphasis must be in [0, 1)")
        if self.fft_size < self.window_samples:
            raise DataError("fft_size shorter than the analysis window")
        if self.delta_radius < 1:
            raise DataError("delta_radius must be >= 1")

    @property
    def window_samples(self) -> int:
        return int(round(self.window_ms * self.sample_rate / 1000))

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop_ms * self.sample_rate / 1000))

    @classmethod
    def from_dict(cls, d: dict) -> "MfccConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def frame_count(n_samples: int, window: int, hop: int) -> int:
    """Number of full analysis windows that fit in ``n_samples``."""
    if n_samples < window:
        return 0
    return (n_samples - window) // hop + 1


def frame_times_ms(n_frames: int, config: MfccConfig = MfccConfig()) -> np.ndarray:
    return np.arange(n_frames) * config.hop_ms + config.window_ms / 2


def aligned_sample_count(n_contour_frames: int, config: MfccConfig = MfccConfig()) -> int:
    """Audio length giving exactly two acoustic frames per 20 ms image."""
    return config.window_samples + config.hop_samples * (2 * n_contour_frames - 1)


def _hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel) / 2595.0) - 1.0)


def mel_filterbank(config: MfccConfig) -> np.ndarray:
    """Triangular filters as an ``(n_mel_filters, fft_size // 2 + 1)`` matrix."""
    n_bins = config.fft_size // 2 + 1
    mel_points = np.linspace(_hz_to_mel(config.fmin_hz), _hz_to_mel(config.fmax_hz),
                             config.n_mel_filters + 2)
    bins = np.floor((config.fft_size + 1) * _mel_to_hz(mel_points) / config.sample_rate).astype(int)
    fb = np.zeros((config.n_mel_filters, n_bins))
    for m in range(1, config.n_mel_filters + 1):
        lo, centre, hi = bins[m - 1], bins[m], bins[m + 1]
        for k in range(lo, centre):
            fb[m - 1, k] = (k - lo) / (centre - lo)
        for k in range(centre, hi):
            fb[m - 1, k] = (hi - k) / (hi - centre)
        if centre == hi:
            fb[m - 1, centre] = 1.0
    return fb


def extract_mfcc(waveform: Waveform, config: MfccConfig = MfccConfig()) -> np.ndarray:
    """Static cepstra, shape ``(n_frames, n_coeffs)``."""
    if waveform.sample_rate != config.sample_rate:
        raise DataError(f"unsupported rate: {waveform.sample_rate} Hz (expected {config.sample_rate})")
    win, hop = config.window_samples, config.hop_samples
    if len(waveform) < win:
        raise DataError(f"insufficient audio: {len(waveform)} samples < one {win}-sample window")

    x = waveform.as_float()
    emphasized = np.empty_like(x)
    emphasized[0] = x[0]
    emphasized[1:] = x[1:] - config.pre_emphasis * x[:-1]

    n = frame_count(len(x), win, hop)
    idx = np.arange(win)[None, :] + hop * np.arange(n)[:, None]
    frames = emphasized[idx] * np.hamming(win)
    power = np.abs(np.fft.rfft(frames, n=config.fft_size, axis=1)) ** 2 / config.fft_size
    energies = power @ mel_filterbank(config).T
    log_energies = np.log(np.maximum(energies, config.log_floor))
    return dct(log_energies, type=2, norm="ortho", axis=1)[:, : config.n_coeffs]


def _regression_delta(seq: np.ndarray, radius: int) -> np.ndarray:
    n = len(seq)
    padded = np.concatenate([np.repeat(seq[:1], radius, axis=0), seq,
                             np.repeat(seq[-1:], radius, axis=0)])
    denom = 2.0 * sum(k * k for k in range(1, radius + 1))
    out = np.zeros_like(seq, dtype=np.float64)
    for k in range(1, radius + 1):
        out += k * (padded[radius + k: radius + k + n] - padded[radius - k: radius - k + n])
    return out / denom


def append_deltas(static: np.ndarray, delta_radius: int = 2) -> np.ndarray:
    """Stack statics with regression deltas and delta-deltas (edges replicated)."""
    static = np.asarray(static, dtype=np.float64)
    if static.ndim != 2 or len(static) == 0:
        raise DataError("empty sequence")
    if delta_radius < 1:
        raise DataError("delta_radius must be >= 1")
    d1 = _regression_delta(static, delta_radius)
    d2 = _regression_delta(d1, delta_radius)
    return np.hstack([static, d1, d2])


def build_context_windows(frames: np.ndarray, radius: int = 5) -> np.ndarray:
    """Concatenate frames ``t-radius .. t+radius`` for every ``t`` (edges replicated)."""
    frames = np.asarray(frames)
    if radius < 0:
        raise DataError("radius must be >= 0")
    if frames.ndim != 2 or len(frames) == 0:
        raise DataError("empty sequence")
    n = len(frames)
    offsets = np.arange(-radius, radius + 1)
    idx = np.clip(np.arange(n)[:, None] + offsets[None, :], 0, n - 1)
    return frames[idx].reshape(n, -1)


def compute_features(waveform: Waveform, config: MfccConfig = MfccConfig()) -> np.ndarray:
    """Full 39-dim (for 13 coefficients) feature sequence."""
    return append_deltas(extract_mfcc(waveform, config), config.delta_radius)


# --- WAV and feature-file I/O -------------------------------------------------

def read_wav(path) -> Waveform:
    """Read a mono 16-bit PCM WAV. Rejects other layouts."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 1:
                raise DataError(f"{path}: expected mono audio, got {w.getnchannels()} channels")
            if w.getsampwidth() != 2:
                raise DataError(f"{path}: expected 16-bit PCM")
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as exc:
        raise DataError(f"{path}: invalid WAV ({exc})") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.int16)
    if rate != SAMPLE_RATE:
        raise DataError(f"{path}: unsupported rate: {rate} Hz")
    return Waveform(samples, rate)


def write_wav(path, waveform: Waveform) -> None:
    data = np.asarray(waveform.samples)
    if data.dtype != np.int16:
        data = np.clip(np.round(data * 32767.0), -32768, 32767).astype(np.int16)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(waveform.sample_rate)
        w.writeframes(data.astype("<i2").tobytes())


def write_feature_file(path, features: np.ndarray) -> None:
    """Binary layout: ``VTF1``, uint32 frame count, uint32 dim, float64 rows."""
    features = np.ascontiguousarray(features, dtype="<f8")
    if features.ndim != 2:
        raise DataError("feature matrix must be 2-D")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<II", *features.shape))
        f.write(features.tobytes())


def read_feature_file(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != FEATURE_MAGIC:
        raise DataError(f"{path}: not a VTF1 feature file")
    n, dim = struct.unpack_from("<II", blob, 4)
    body = blob[12:]
    if len(body) != 8 * n * dim:
        raise DataError(f"{path}: truncated feature file")
    return np.frombuffer(body, dtype="<f8").reshape(n, dim).copy()


def write_feature_csv(path, features: np.ndarray, config: MfccConfig = MfccConfig()) -> None:
    n, dim = features.shape
    times = frame_times_ms(n, config)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame_index", "time_ms"] + [f"f{j}" for j in range(dim)])
        for i in range(n):
            w.writerow([i, f"{times[i]:.1f}"] + [repr(float(v)) for v in features[i]])
