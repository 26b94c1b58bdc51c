"""MFCC front end: framing, Hamming window, 512-point power spectrum,
26-band mel filterbank over 0-8 kHz, natural log, orthonormal DCT-II, 13 coefficients.

Fixed conventions (none of these are negotiable per call, so cached features
stay comparable): HTK mel formula ``2595 * log10(1 + f / 700)``, triangles
evaluated at the exact bin centre frequencies ``k * 16000 / 512``, log floor
``1e-10``, coefficient 0 kept, no pre-emphasis, no liftering, no deltas,
trailing partial frame dropped.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft

from .errors import DataError

SAMPLE_RATE = 16000
FRAME_LENGTH = 400  # 25 ms
FRAME_SHIFT = 160  # 10 ms
NFFT = 512
NUM_BINS = NFFT // 2 + 1
NUM_FILTERS = 26
NUM_CEPS = 13
LOW_HZ = 0.0
HIGH_HZ = 8000.0
LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    source: str = "<memory>"

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class FeatureMatrix:
    """``coefficients`` is d x T (d = 13 rows, one column per 10 ms frame)."""

    coefficients: np.ndarray
    frame_shift_ms: int = 10
    frame_length_ms: int = 25

    @property
    def num_frames(self) -> int:
        return self.coefficients.shape[1]

    @property
    def dim(self) -> int:
        return self.coefficients.shape[0]


@dataclass(frozen=True)
class MelFilterbank:
    weights: np.ndarray  # (26, 257)
    low_hz: float = LOW_HZ
    high_hz: float = HIGH_HZ


def num_frames(num_samples: int) -> int:
    if num_samples < FRAME_LENGTH:
        return 0
    return (num_samples - FRAME_LENGTH) // FRAME_SHIFT + 1


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=None)
def hamming_window(length: int = FRAME_LENGTH) -> np.ndarray:
    n = np.arange(length)
    w = 0.54 - 0.46 * np.cos(2.0 * np.pi * n / (length - 1))
    w.setflags(write=False)
    return w


def _check_clip(clip: AudioClip) -> None:
    if clip.sample_rate != SAMPLE_RATE:
        raise DataError(f"{clip.source}: sample rate {clip.sample_rate} Hz, expected {SAMPLE_RATE} Hz")
    if len(clip.samples) < FRAME_LENGTH:
        raise DataError(
            f"{clip.source}: {len(clip.samples)} samples is shorter than one {FRAME_LENGTH}-sample frame"
        )


def frame_and_window(clip: AudioClip) -> np.ndarray:
    """Return a (T, 400) array of Hamming-windowed frames."""
    _check_clip(clip)
    x = np.asarray(clip.samples, dtype=np.float64)
    count = num_frames(len(x))
    frames = np.lib.stride_tricks.sliding_window_view(x, FRAME_LENGTH)[::FRAME_SHIFT][:count]
    return frames * hamming_window()


def power_spectrum(frames: np.ndarray) -> np.ndarray:
    """|rfft(frame, 512)|^2 for each row; (..., 400) -> (..., 257)."""
    spec = np.fft.rfft(np.asarray(frames, dtype=np.float64), n=NFFT, axis=-1)
    return spec.real**2 + spec.imag**2


@lru_cache(maxsize=None)
def _filterbank_weights() -> np.ndarray:
    mel_points = np.linspace(hz_to_mel(LOW_HZ), hz_to_mel(HIGH_HZ), NUM_FILTERS + 2)
    edges = mel_to_hz(mel_points)
    freqs = np.arange(NUM_BINS) * SAMPLE_RATE / NFFT
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (centre - lower)
    falling = (upper - freqs) / (upper - centre)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    weights.setflags(write=False)
    return weights


def build_mel_filterbank() -> MelFilterbank:
    return MelFilterbank(weights=_filterbank_weights())


def log_mel_energies(clip: AudioClip) -> np.ndarray:
    """(T, 26) natural-log filterbank energies."""
    power = power_spectrum(frame_and_window(clip))
    return np.log(power @ _filterbank_weights().T + LOG_FLOOR)


def mfcc_extract(clip: AudioClip) -> FeatureMatrix:
    log_energy = log_mel_energies(clip)
    ceps = scipy.fft.dct(log_energy, type=2, norm="ortho", axis=-1)[:, :NUM_CEPS]
    return FeatureMatrix(coefficients=np.ascontiguousarray(ceps.T))
