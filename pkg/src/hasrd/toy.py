"""Synthetic speech-like corpora for desk-scale training and tests."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .codec_io import write_wav
from .validation import SAMPLE_RATE

# (F1, F2, F3) in Hz for a handful of vowel-like segments
_VOWELS = np.array([[730, 1090, 2440], [270, 2290, 3010], [300, 870, 2240], [530, 1840, 2480], [570, 840, 2410]])


def _envelope(freqs, formants, bandwidth=120.0):
    f = np.asarray(freqs, dtype=np.float64)[..., None]
    return np.exp(-0.5 * ((f - formants) / bandwidth) ** 2).sum(-1) + 0.02


def _voiced(n, f0, formants, rng):
    t = np.arange(n) / SAMPLE_RATE
    f0_track = f0 * (1 + 0.03 * np.sin(2 * np.pi * rng.uniform(2, 5) * t + rng.uniform(0, 6)))
    phase = 2 * np.pi * np.cumsum(f0_track) / SAMPLE_RATE
    out = np.zeros(n)
    for h in range(1, int(7000 / f0) + 1):
        out += _envelope(h * f0, formants) * np.sin(h * phase) / np.sqrt(h)
    return out


def _unvoiced(n, centre, rng):
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1 / SAMPLE_RATE)
    spec *= np.exp(-0.5 * ((f - centre) / 1200.0) ** 2)
    return np.fft.irfft(spec, n) * 4.0


def make_utterance(seconds: float, rng: np.random.Generator, f0: float | None = None) -> np.ndarray:
    n_total = int(round(seconds * SAMPLE_RATE))
    f0 = f0 if f0 is not None else rng.uniform(90, 240)
    pieces, n = [], 0
    while n < n_total:
        seg = int(rng.uniform(0.06, 0.2) * SAMPLE_RATE)
        kind = rng.random()
        if kind < 0.65:
            x = _voiced(seg, f0 * rng.uniform(0.9, 1.15), _VOWELS[rng.integers(len(_VOWELS))], rng)
        elif kind < 0.9:
            x = _unvoiced(seg, rng.uniform(2500, 6000), rng)
        else:
            x = 0.01 * rng.standard_normal(seg)
        ramp = np.minimum(1.0, np.minimum(np.arange(seg), np.arange(seg)[::-1]) / 160.0)
        pieces.append(x * ramp * rng.uniform(0.5, 1.0))
        n += seg
    x = np.concatenate(pieces)[:n_total]
    x = 0.5 * x / max(np.abs(x).max(), 1e-9)
    return x.astype(np.float32)


def make_toy_corpus(n_utterances: int = 10, seconds=(2.0, 3.0), seed: int = 0) -> list:
    """Return ``n_utterances`` float32 waveforms at 16 kHz, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    lo, hi = seconds if isinstance(seconds, (tuple, list)) else (seconds, seconds)
    return [make_utterance(rng.uniform(lo, hi), rng) for _ in range(n_utterances)]


def write_toy_corpus(directory, n_utterances: int = 10, seconds=(2.0, 3.0), seed: int = 0) -> list:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, wav in enumerate(make_toy_corpus(n_utterances, seconds, seed)):
        p = d / f"utt{i:04d}.wav"
        write_wav(p, wav)
        paths.append(p)
    return paths
