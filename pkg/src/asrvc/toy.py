"""Synthetic speech-like corpora for tests and desk-scale experiments.

A toy "speaker" is a fixed resonant filter (its timbre) driven by noise
under a syllable-like amplitude envelope (its content). Utterance-level
mel normalization removes a fixed filter, so encoder features carry the
envelope and the decoder must get timbre from the speaker embedding.
"""

from __future__ import annotations

import os

import numpy as np
from scipy.signal import lfilter

from .audio_io import SAMPLE_RATE, Waveform, write_wav

# name -> (resonance Hz, pole radius)
TIMBRES = {
    "low": (500.0, 0.97),
    "high": (3000.0, 0.97),
    "mid": (1400.0, 0.97),
    "top": (5500.0, 0.97),
}


def sine(freq: float, seconds: float, amplitude: float = 0.5, sr: int = SAMPLE_RATE) -> Waveform:
    t = np.arange(int(round(seconds * sr))) / sr
    return Waveform((amplitude * np.sin(2 * np.pi * freq * t)).astype(np.float32))


def syllable_envelope(n: int, rng: np.random.Generator, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Raised-cosine bursts of 80-250 ms separated by short gaps."""
    env = np.zeros(n)
    pos = int(rng.integers(0, sr // 20))
    while pos < n:
        length = int(rng.uniform(0.08, 0.25) * sr)
        seg = np.hanning(length) * rng.uniform(0.4, 1.0)
        stop = min(n, pos + length)
        env[pos:stop] = seg[:stop - pos]
        pos = stop + int(rng.uniform(0.02, 0.12) * sr)
    return env


def resonator(x: np.ndarray, freq: float, radius: float, sr: int = SAMPLE_RATE) -> np.ndarray:
    theta = 2 * np.pi * freq / sr
    return lfilter([1.0 - radius], [1.0, -2 * radius * np.cos(theta), radius * radius], x)


def speaker_clip(timbre: str, seconds: float, rng: np.random.Generator, rms: float = 0.12) -> Waveform:
    freq, radius = TIMBRES[timbre]
    n = int(round(seconds * SAMPLE_RATE))
    y = resonator(rng.standard_normal(n), freq, radius)
    y *= rms / max(np.sqrt(np.mean(y ** 2)), 1e-12)
    y *= syllable_envelope(n, rng)
    return Waveform(np.clip(y, -0.95, 0.95).astype(np.float32))


def write_corpus(out_dir, speakers: dict[str, str], n_clips: int, clip_seconds: float, seed: int = 0,
                 prefix: str = "") -> list[tuple[str, str]]:
    """Write ``n_clips`` WAVs per speaker (name -> timbre); returns manifest entries."""
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for name, timbre in speakers.items():
        for i in range(n_clips):
            path = os.path.join(os.fspath(out_dir), f"{prefix}{name}_{i:03d}.wav")
            write_wav(path, speaker_clip(timbre, clip_seconds, rng))
            entries.append((name, path))
    return entries
