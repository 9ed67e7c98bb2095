"""Log-mel filterbank features, per-utterance normalization and frame stacking.

Framing is fixed at 16 kHz: 400-sample (25 ms) Hamming windows every
128 samples (8 ms), a 512-point FFT and 80 triangular mel filters spanning
0-8000 Hz.  Four mel frames stack into one label frame, so one label frame
covers 512 samples, the same hop as the encoder output.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .validation import SAMPLE_RATE, HASRDError, check_matrix, check_waveform

WINDOW_SAMPLES = 400
HOP_SAMPLES = 128
N_FFT = 512
NUM_MELS = 80
STACK_FACTOR = 4
LOG_FLOOR = 1e-10
VAR_FLOOR = 1e-8


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    n_fft: int,
    n_mels: int,
    sample_rate: int = SAMPLE_RATE,
    fmin: float = 0.0,
    fmax: float | None = None,
) -> np.ndarray:
    """Triangular HTK-scale mel filters, shape ``(n_mels, n_fft // 2 + 1)``.

    Filters are evaluated at the FFT bin centre frequencies and are not area
    normalized.  A filter narrower than the bin spacing may be all zero.
    """
    fmax = sample_rate / 2 if fmax is None else fmax
    bin_freqs = np.linspace(0.0, sample_rate / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_freqs[None, :] - lower) / (centre - lower)
    falling = (upper - bin_freqs[None, :]) / (upper - centre)
    return np.maximum(0.0, np.minimum(rising, falling))


def num_frames(num_samples: int) -> int:
    return 1 + (num_samples - WINDOW_SAMPLES) // HOP_SAMPLES


def _frame(x: np.ndarray) -> np.ndarray:
    n = num_frames(x.shape[0])
    idx = np.arange(WINDOW_SAMPLES)[None, :] + HOP_SAMPLES * np.arange(n)[:, None]
    return x[idx]


_HAMMING = np.hamming(WINDOW_SAMPLES)
_MEL_FB = mel_filterbank(N_FFT, NUM_MELS)


def compute_fbank(samples, num_mels: int = NUM_MELS, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Log-mel energies of a 16 kHz waveform as a ``(T, 80)`` float32 array.

    ``T = 1 + (len(samples) - 400) // 128``; power spectra are floored at
    1e-10 before the natural log.
    """
    if num_mels != NUM_MELS:
        raise HASRDError(f"num_mels must be {NUM_MELS}, got {num_mels}")
    x = check_waveform(samples, sample_rate)
    if x.shape[0] < WINDOW_SAMPLES:
        raise HASRDError(
            f"waveform too short: {x.shape[0]} samples, need at least one "
            f"{WINDOW_SAMPLES}-sample window"
        )
    frames = _frame(x.astype(np.float64)) * _HAMMING
    power = np.abs(np.fft.rfft(frames, n=N_FFT, axis=-1)) ** 2
    energies = power @ _MEL_FB.T
    return np.log(np.maximum(energies, LOG_FLOOR)).astype(np.float32)


def sentence_normalize(mel) -> np.ndarray:
    """Standardize each frequency dimension over time within one utterance."""
    m = check_matrix(mel, "mel")
    if m.shape[0] < 2:
        raise HASRDError("sentence normalization needs at least 2 frames")
    m = m.astype(np.float64)
    mean = m.mean(axis=0)
    var = m.var(axis=0)
    return ((m - mean) / np.sqrt(np.maximum(var, VAR_FLOOR))).astype(np.float32)


def stack_frames(mel, factor: int = STACK_FACTOR) -> np.ndarray:
    """Concatenate each run of ``factor`` frames; tail frames are dropped."""
    m = check_matrix(mel, "mel")
    t, f = m.shape
    if t < factor:
        raise HASRDError(f"need at least {factor} frames to stack, got {t}")
    t_out = t // factor
    return np.ascontiguousarray(m[: t_out * factor].reshape(t_out, factor * f))


def pad_for_hop(samples) -> np.ndarray:
    """Right-pad with zeros so that feature framing yields ``len // 128`` frames.

    With this padding, an utterance of ``n`` samples maps to exactly
    ``n // 512`` encoder frames.
    """
    x = np.asarray(samples, dtype=np.float32)
    return np.concatenate([x, np.zeros(WINDOW_SAMPLES - HOP_SAMPLES, dtype=np.float32)])


def utterance_features(samples) -> np.ndarray:
    """Hop-aligned, sentence-normalized fbank used as encoder input."""
    return sentence_normalize(compute_fbank(pad_for_hop(samples)))


class FbankTransformer(TransformerMixin, BaseEstimator):
    """Stateless transformer mapping a list of waveforms to feature matrices.

    Parameters
    ----------
    normalize : bool
        Apply per-utterance standardization.
    stack : int or None
        If set, stack this many frames per output row.
    hop_align : bool
        Zero-pad each waveform so that ``T == len // 128``.
    """

    def __init__(self, normalize: bool = True, stack: int | None = None, hop_align: bool = False):
        self.normalize = normalize
        self.stack = stack
        self.hop_align = hop_align

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        out = []
        for wav in X:
            x = pad_for_hop(wav) if self.hop_align else wav
            m = compute_fbank(x)
            if self.normalize:
                m = sentence_normalize(m)
            if self.stack:
                m = stack_frames(m, self.stack)
            out.append(m)
        return out
