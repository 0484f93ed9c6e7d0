"""Front-end features: log-mel frames, F0 contours, mel-cepstra."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.fft import dct

from .audio_io import SAMPLE_RATE, Waveform
from .errors import TooShort

WINDOW_SAMPLES = 320
HOP_SAMPLES = 160
N_FFT = 512
N_MELS = 64
ENERGY_FLOOR = 1e-5
CEPSTRUM_ORDER = 13

F0_WINDOW = 400
F0_MIN_HZ = 60.0
F0_MAX_HZ = 400.0
VOICING_THRESHOLD = 0.3
# a shorter-lag peak within this fraction of the best one wins (octave guard)
_OCTAVE_RATIO = 0.9


@dataclass
class MelFrames:
    frames: np.ndarray  # [T_frames, n_mels]
    hop_samples: int = HOP_SAMPLES
    window_samples: int = WINDOW_SAMPLES

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]

    def __len__(self):
        return self.frames.shape[0]


@dataclass
class F0Contour:
    values_hz: np.ndarray  # 0.0 marks unvoiced frames
    hop_samples: int = HOP_SAMPLES

    def __len__(self):
        return self.values_hz.size

    @property
    def voiced(self) -> np.ndarray:
        return self.values_hz > 0


@dataclass
class CepstraFrames:
    frames: np.ndarray  # [T_frames, order], c_1..c_order

    @property
    def order(self) -> int:
        return self.frames.shape[1]

    def __len__(self):
        return self.frames.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int = N_MELS) -> np.ndarray:
    points = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(SAMPLE_RATE / 2), n_mels + 2))
    return points[1:-1]


@lru_cache(maxsize=8)
def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT) -> np.ndarray:
    """Triangular filters on the HTK mel scale, shape [n_mels, n_fft//2 + 1], peak weight 1."""
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(SAMPLE_RATE / 2), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * SAMPLE_RATE / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    bank = np.maximum(0.0, np.minimum(rising, falling))
    bank.setflags(write=False)
    return bank


def frame_count(n_samples: int, window: int = WINDOW_SAMPLES, hop: int = HOP_SAMPLES) -> int:
    if n_samples < window:
        return 0
    return (n_samples - window) // hop + 1


def _frames(x: np.ndarray, window: int, hop: int) -> np.ndarray:
    n = frame_count(x.size, window, hop)
    return np.lib.stride_tricks.sliding_window_view(x, window)[::hop][:n]


def log_mel(
    w: Waveform,
    n_mels: int = N_MELS,
    window_samples: int = WINDOW_SAMPLES,
    hop_samples: int = HOP_SAMPLES,
) -> MelFrames:
    x = np.asarray(w.samples, dtype=np.float64)
    if x.size < window_samples:
        raise TooShort(f"log_mel: need at least {window_samples} samples, got {x.size}")
    n_fft = max(N_FFT, 1 << (window_samples - 1).bit_length())
    frames = _frames(x, window_samples, hop_samples) * np.hanning(window_samples + 1)[:-1]
    magnitude = np.abs(np.fft.rfft(frames, n=n_fft, axis=1))
    energy = magnitude @ mel_filterbank(n_mels, n_fft).T
    out = np.log(np.maximum(energy, ENERGY_FLOOR)).astype(np.float32)
    return MelFrames(out, hop_samples=hop_samples, window_samples=window_samples)


def estimate_f0(w: Waveform) -> F0Contour:
    """Normalized-autocorrelation pitch tracker, one value per 10 ms hop.

    Frames share centres with :func:`log_mel` frames, so both contours have
    the same length for a given waveform.
    """
    x = np.asarray(w.samples, dtype=np.float64)
    if x.size < F0_WINDOW:
        raise TooShort(f"estimate_f0: need at least {F0_WINDOW} samples, got {x.size}")
    n_frames = frame_count(x.size)
    pad = (F0_WINDOW - WINDOW_SAMPLES) // 2
    padded = np.concatenate([np.zeros(pad), x, np.zeros(F0_WINDOW)])
    frames = _frames(padded, F0_WINDOW, HOP_SAMPLES)[:n_frames]

    lag_min = int(np.ceil(SAMPLE_RATE / F0_MAX_HZ))
    lag_max = int(np.floor(SAMPLE_RATE / F0_MIN_HZ))
    lags = np.arange(lag_min - 1, lag_max + 2)  # one extra each side for peak tests

    spec = np.fft.rfft(frames, n=2 * F0_WINDOW, axis=1)
    acf = np.fft.irfft(np.abs(spec) ** 2, axis=1)[:, lags]
    sq = np.cumsum(frames ** 2, axis=1)
    total = sq[:, -1:]
    head = sq[:, F0_WINDOW - 1 - lags]  # energy of x[0 : N-lag]
    tail = total - np.concatenate([np.zeros((n_frames, 1)), sq], axis=1)[:, lags]  # energy of x[lag:]
    denom = np.sqrt(head * tail)
    safe = denom > 1e-12 * np.maximum(total, 1e-300)
    r = np.where(safe, acf / np.where(safe, denom, 1.0), 0.0)

    f0 = np.zeros(n_frames)
    inner = r[:, 1:-1]
    is_peak = (inner >= r[:, :-2]) & (inner >= r[:, 2:])
    for i in range(n_frames):
        peaks = np.flatnonzero(is_peak[i])
        if peaks.size == 0:
            continue
        best = inner[i, peaks].max()
        if best <= VOICING_THRESHOLD:
            continue
        k = peaks[np.argmax(inner[i, peaks] >= _OCTAVE_RATIO * best)] + 1
        a, b, c = r[i, k - 1], r[i, k], r[i, k + 1]
        curve = a - 2 * b + c
        shift = 0.5 * (a - c) / curve if curve < 0 else 0.0
        lag = lags[k] + float(np.clip(shift, -0.5, 0.5))
        f0[i] = float(np.clip(SAMPLE_RATE / lag, F0_MIN_HZ, F0_MAX_HZ))
    return F0Contour(f0)


def f0_features(f0: F0Contour) -> np.ndarray:
    """[voiced flag; log(f0/60)/log(400/60)] as a [2, T] matrix, zeros where unvoiced."""
    hz = np.asarray(f0.values_hz, dtype=np.float64)
    voiced = hz > 0
    norm = np.zeros_like(hz)
    norm[voiced] = np.log(hz[voiced] / F0_MIN_HZ) / np.log(F0_MAX_HZ / F0_MIN_HZ)
    return np.stack([voiced.astype(np.float64), norm]).astype(np.float32)


def dct_cepstra(log_mel_frames: np.ndarray, order: int = CEPSTRUM_ORDER) -> np.ndarray:
    """Orthonormal DCT-II over the mel axis, keeping c_1..c_order."""
    c = dct(np.asarray(log_mel_frames, dtype=np.float64), type=2, norm="ortho", axis=-1)
    return c[..., 1:order + 1]


def mel_cepstra(w: Waveform, order: int = CEPSTRUM_ORDER) -> CepstraFrames:
    mel = log_mel(w, n_mels=N_MELS)
    return CepstraFrames(dct_cepstra(mel.frames, order))
