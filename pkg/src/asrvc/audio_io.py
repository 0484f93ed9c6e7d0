"""16 kHz mono PCM16 WAV I/O and 256-level mu-law companding."""

from __future__ import annotations

import math
import os
import wave
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NotFound, UnsupportedFormat
from .fileutil import atomic_write

SAMPLE_RATE = 16000
N_CLASSES = 256
MU = 255
ZERO_INDEX = 128

_LOG1P_MU = math.log1p(MU)


@dataclass
class Waveform:
    """Samples in [-1, 1] at 16 kHz."""

    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if self.sample_rate_hz != SAMPLE_RATE:
            raise UnsupportedFormat(f"sample rate {self.sample_rate_hz} Hz, expected {SAMPLE_RATE}")
        if not np.all(np.isfinite(self.samples)):
            raise DomainError("waveform contains non-finite samples")
        if self.samples.size and np.max(np.abs(self.samples)) > 1.0:
            raise DomainError("waveform samples must lie in [-1, 1]")

    def __len__(self):
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass
class QuantizedWave:
    indices: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= N_CLASSES):
            raise DomainError("quantized indices must lie in [0, 255]")

    def __len__(self):
        return self.indices.size


def read_wav(path) -> Waveform:
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise NotFound(f"{path}: no such file")
    try:
        with wave.open(path, "rb") as w:
            channels = w.getnchannels()
            width = w.getsampwidth()
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except wave.Error as exc:
        # the wave module only accepts PCM; anything else surfaces here
        raise UnsupportedFormat(f"{path}: encoding not supported ({exc})") from exc
    except EOFError as exc:
        raise UnsupportedFormat(f"{path}: truncated or not a RIFF/WAVE file") from exc
    if channels != 1:
        raise UnsupportedFormat(f"{path}: channels={channels}, expected 1")
    if width != 2:
        raise UnsupportedFormat(f"{path}: encoding {8 * width}-bit PCM, expected 16-bit")
    if rate != SAMPLE_RATE:
        raise UnsupportedFormat(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE}")
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float32) / 32768.0)


def to_pcm16(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    return np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")


def write_wav(path, w: Waveform) -> None:
    pcm = to_pcm16(w.samples)

    def _write(tmp):
        with wave.open(tmp, "wb") as out:
            out.setnchannels(1)
            out.setsampwidth(2)
            out.setframerate(SAMPLE_RATE)
            out.writeframes(pcm.tobytes())

    atomic_write(path, _write)


def compand(x):
    """The mu-law curve sign(x)*ln(1+255|x|)/ln(256)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.log1p(MU * np.abs(x)) / _LOG1P_MU


def expand(c):
    c = np.asarray(c, dtype=np.float64)
    return np.sign(c) * np.expm1(np.abs(c) * _LOG1P_MU) / MU


def mulaw_encode(x):
    """Map amplitude(s) in [-1, 1] to class indices in [0, 255].

    Scalars give an ``int``; arrays give an int64 array of the same shape.
    """
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DomainError("mulaw_encode: non-finite input")
    if arr.size and np.max(np.abs(arr)) > 1.0:
        raise DomainError("mulaw_encode: input outside [-1, 1]")
    idx = np.floor((compand(arr) + 1.0) / 2.0 * N_CLASSES)
    idx = np.clip(idx, 0, N_CLASSES - 1).astype(np.int64)
    return int(idx) if idx.ndim == 0 else idx


def mulaw_decode(i):
    """Map class index(es) to the bin centre in companded space, expanded."""
    arr = np.asarray(i)
    if arr.dtype.kind not in "iu":
        if not np.all(np.isfinite(arr)) or np.any(arr != np.floor(arr)):
            raise DomainError("mulaw_decode: indices must be integers")
        arr = arr.astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= N_CLASSES):
        raise DomainError("mulaw_decode: index outside [0, 255]")
    out = expand((arr + 0.5) / 128.0 - 1.0)
    return float(out) if out.ndim == 0 else out


def quantize(w: Waveform) -> QuantizedWave:
    return QuantizedWave(mulaw_encode(w.samples))


def dequantize(q: QuantizedWave) -> Waveform:
    return Waveform(mulaw_decode(q.indices).astype(np.float32))
