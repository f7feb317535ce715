"""Waveform I/O, log-mel analysis, and mel-to-waveform reconstruction.

The analysis convention is fixed so that a signal of N samples yields exactly
ceil(N / frame_hop) frames: frames start at multiples of the hop from sample 0
(no centering) and the tail is zero-padded. Delaying the input by one hop
therefore shifts the output by exactly one frame.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.signal
from scipy.io import wavfile

from .errors import (
    InvalidInputError,
    MissingFileError,
    MultichannelError,
    UnsupportedEncodingError,
)

DEFAULT_SAMPLE_RATE = 16000
LOG_FLOOR = 1e-10


@dataclass
class Waveform:
    """Mono audio signal, nominal amplitude range [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise InvalidInputError(f"waveform must be 1-D, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise InvalidInputError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate

    def rms(self) -> float:
        if len(self.samples) == 0:
            return 0.0
        return float(np.sqrt(np.mean(self.samples**2)))


@dataclass(frozen=True)
class FeatureConfig:
    """Log-mel analysis parameters (25 ms window / 10 ms hop / 80 bands default)."""

    sample_rate: int = DEFAULT_SAMPLE_RATE
    n_mels: int = 80
    win_ms: float = 25.0
    hop_ms: float = 10.0
    fmin: float = 0.0
    fmax: float | None = None  # None -> Nyquist
    log_base: str = "natural"  # "natural" or "10"
    log_floor: float = LOG_FLOOR

    @property
    def frame_len(self) -> int:
        return int(round(self.sample_rate * self.win_ms / 1000))

    @property
    def frame_hop(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000))

    @property
    def n_fft(self) -> int:
        return self.frame_len

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def validate(self):
        if self.n_mels < 1:
            raise InvalidInputError("n_mels must be >= 1")
        if self.frame_len < self.frame_hop:
            raise InvalidInputError("frame_len must be >= frame_hop")
        if self.log_base not in ("natural", "10"):
            raise InvalidInputError(f"unknown log_base {self.log_base!r}")


@dataclass
class LogMelSpectrogram:
    """Log mel-band energies, shape (n_mels, n_frames)."""

    values: np.ndarray
    frame_hop: int
    frame_len: int
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or self.values.shape[1] < 1:
            raise InvalidInputError(f"log-mel must be 2-D with >=1 frame, got shape {self.values.shape}")

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class VocoderConfig:
    """Iterative phase-reconstruction vocoder settings."""

    features: FeatureConfig = field(default_factory=FeatureConfig)
    n_iters: int = 32


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=16)
def _mel_filterbank_cached(n_mels: int, n_fft: int, sample_rate: int, fmin: float, fmax: float):
    """Triangular mel filterbank, shape (n_mels, n_fft//2 + 1). Built once per config."""
    mel_pts = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    bin_freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    fb = np.zeros((n_mels, len(bin_freqs)))
    for j in range(n_mels):
        lo, ctr, hi = hz_pts[j], hz_pts[j + 1], hz_pts[j + 2]
        rising = (bin_freqs - lo) / max(ctr - lo, 1e-12)
        falling = (hi - bin_freqs) / max(hi - ctr, 1e-12)
        fb[j] = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    fmax = cfg.fmax if cfg.fmax is not None else cfg.sample_rate / 2.0
    return _mel_filterbank_cached(cfg.n_mels, cfg.n_fft, cfg.sample_rate, float(cfg.fmin), float(fmax))


def mel_band_centers(cfg: FeatureConfig) -> np.ndarray:
    """Center frequency (Hz) of each mel band."""
    fmax = cfg.fmax if cfg.fmax is not None else cfg.sample_rate / 2.0
    mel_pts = np.linspace(_hz_to_mel(cfg.fmin), _hz_to_mel(fmax), cfg.n_mels + 2)
    return _mel_to_hz(mel_pts)[1:-1]


def _window(cfg: FeatureConfig) -> np.ndarray:
    return scipy.signal.get_window("hann", cfg.frame_len, fftbins=True)


def frame_count(n_samples: int, cfg: FeatureConfig) -> int:
    return max(1, int(np.ceil(n_samples / cfg.frame_hop)))


def _frame_signal(samples: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """Slice into (n_frames, frame_len) windows starting at multiples of the hop."""
    n_frames = frame_count(len(samples), cfg)
    padded_len = (n_frames - 1) * cfg.frame_hop + cfg.frame_len
    padded = np.zeros(padded_len)
    padded[: len(samples)] = samples
    idx = np.arange(cfg.frame_len)[None, :] + cfg.frame_hop * np.arange(n_frames)[:, None]
    return padded[idx]


def stft_power(samples: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """Windowed power spectrogram, shape (n_bins, n_frames)."""
    frames = _frame_signal(samples, cfg) * _window(cfg)
    spec = np.fft.rfft(frames, n=cfg.n_fft, axis=1)
    return (np.abs(spec) ** 2).T


def _apply_log(mel_energy: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    floored = np.maximum(mel_energy, cfg.log_floor)
    return np.log(floored) if cfg.log_base == "natural" else np.log10(floored)


def _invert_log(values: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    return np.exp(values) if cfg.log_base == "natural" else 10.0**values


def compute_log_mel(w: Waveform, cfg: FeatureConfig) -> LogMelSpectrogram:
    """Log mel-band energies of a waveform.

    Output has exactly ceil(len(w) / frame_hop) frames; entries are
    log(max(mel_energy, log_floor)).
    """
    cfg.validate()
    if len(w) == 0:
        raise InvalidInputError("cannot compute features of an empty waveform")
    if not np.all(np.isfinite(w.samples)):
        raise InvalidInputError("waveform contains non-finite samples")
    if w.sample_rate != cfg.sample_rate:
        raise InvalidInputError(
            f"waveform sample rate {w.sample_rate} != config sample rate {cfg.sample_rate}"
        )
    power = stft_power(w.samples, cfg)
    mel_energy = mel_filterbank(cfg) @ power
    values = _apply_log(mel_energy, cfg).astype(np.float32)
    return LogMelSpectrogram(
        values=values, frame_hop=cfg.frame_hop, frame_len=cfg.frame_len, sample_rate=cfg.sample_rate
    )


def _istft(spec: np.ndarray, cfg: FeatureConfig, n_frames: int) -> np.ndarray:
    """Overlap-add inverse of stft_power's framing; returns n_frames * hop samples."""
    win = _window(cfg)
    frames = np.fft.irfft(spec.T, n=cfg.n_fft, axis=1)[:, : cfg.frame_len]
    out_len = (n_frames - 1) * cfg.frame_hop + cfg.frame_len
    acc = np.zeros(out_len)
    norm = np.zeros(out_len)
    for k in range(n_frames):
        start = k * cfg.frame_hop
        acc[start : start + cfg.frame_len] += frames[k] * win
        norm[start : start + cfg.frame_len] += win**2
    acc[norm > 1e-10] /= norm[norm > 1e-10]
    return acc[: n_frames * cfg.frame_hop]


def vocode(mel: LogMelSpectrogram, cfg: VocoderConfig) -> Waveform:
    """Reconstruct a waveform from a log-mel spectrogram.

    Default implementation: mel -> linear power via clipped pseudo-inverse of
    the filterbank, then iterative phase reconstruction from a zero-phase
    start. Deterministic for a fixed iteration count. Output length is exactly
    n_frames * frame_hop samples.
    """
    fcfg = cfg.features
    fcfg.validate()
    if mel.n_mels != fcfg.n_mels:
        raise InvalidInputError(f"mel has {mel.n_mels} bands, vocoder config expects {fcfg.n_mels}")
    if mel.frame_hop != fcfg.frame_hop or mel.frame_len != fcfg.frame_len:
        raise InvalidInputError("mel framing does not match vocoder config")
    mel_power = _invert_log(np.asarray(mel.values, dtype=np.float64), fcfg)
    fb = mel_filterbank(fcfg)
    magnitude = np.sqrt(np.maximum(np.linalg.pinv(fb) @ mel_power, 0.0))
    n_frames = mel.n_frames

    x = _istft(magnitude.astype(complex), fcfg, n_frames)  # zero-phase init
    for _ in range(cfg.n_iters):
        spec = np.fft.rfft(_frame_signal(x, fcfg) * _window(fcfg), n=fcfg.n_fft, axis=1).T
        mag = np.abs(spec)
        phase = np.where(mag > 1e-12, spec / np.maximum(mag, 1e-12), 1.0)
        x = _istft(magnitude * phase, fcfg, n_frames)
    peak = np.max(np.abs(x)) if len(x) else 0.0
    if peak > 1.0:
        x = x / peak
    return Waveform(x, fcfg.sample_rate)


def read_wav(path) -> Waveform:
    """Read a mono PCM16 or IEEE float32 WAV file."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"no such audio file: {path}")
    try:
        sr, data = wavfile.read(path)
    except Exception as exc:
        raise UnsupportedEncodingError(f"cannot decode {path}: {exc}") from exc
    if data.ndim != 1:
        raise MultichannelError(f"{path} has {data.shape[1]} channels; mono required")
    if data.size == 0:
        raise UnsupportedEncodingError(f"{path} contains no samples")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        samples = data.astype(np.float64)
    else:
        raise UnsupportedEncodingError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, int(sr))


def write_wav(path, w: Waveform, encoding: str = "pcm16"):
    """Write a mono WAV file (PCM16 by default, or IEEE float32)."""
    path = Path(path)
    if not np.all(np.isfinite(w.samples)):
        raise InvalidInputError("refusing to write non-finite samples")
    if encoding == "pcm16":
        clipped = np.clip(w.samples, -1.0, 32767.0 / 32768.0)
        data = np.round(clipped * 32768.0).astype(np.int16)
    elif encoding == "float32":
        data = w.samples.astype(np.float32)
    else:
        raise InvalidInputError(f"unknown wav encoding {encoding!r}")
    wavfile.write(path, w.sample_rate, data)
