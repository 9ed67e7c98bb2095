"""Training objectives and reconstruction distances."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F

from .features import mel_filterbank
from .validation import HASRDError

MEL_WINDOWS = (32, 64, 128, 256, 512, 1024, 2048)
MEL_BINS = (5, 10, 20, 40, 80, 160, 320)
STFT_WINDOWS = (2048, 512)
MAG_FLOOR = 1e-5


@dataclass(frozen=True)
class MelScaleSet:
    window_lengths: tuple = MEL_WINDOWS
    mel_bins: tuple = MEL_BINS

    def __post_init__(self):
        if len(self.window_lengths) != len(self.mel_bins):
            raise HASRDError("window_lengths and mel_bins must pair up")

    def __iter__(self):
        return iter(zip(self.window_lengths, self.mel_bins))


def mlm_loss(logits: torch.Tensor, labels, mask_set) -> torch.Tensor:
    """Mean cross-entropy of the target labels over masked positions only.

    ``logits`` is ``(..., U, K)``; ``mask_set`` is a boolean mask of the same
    leading shape or an index array into the last time axis.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    mask = torch.as_tensor(mask_set)
    if mask.dtype != torch.bool:
        idx = mask.long()
        mask = torch.zeros(logits.shape[:-1], dtype=torch.bool)
        mask[..., idx] = True
    if not bool(mask.any()):
        raise HASRDError("mlm_loss needs at least one masked position")
    return F.cross_entropy(logits[mask], labels[mask])


@lru_cache(maxsize=None)
def _mel_basis(n_fft: int, n_mels: int) -> torch.Tensor:
    return torch.from_numpy(mel_filterbank(n_fft, n_mels))


def _frames_needed(x: torch.Tensor, window: int) -> torch.Tensor:
    if x.shape[-1] < window:
        x = F.pad(x, (0, window - x.shape[-1]))
    return x


def stft_magnitude(x: torch.Tensor, window: int) -> torch.Tensor:
    """Hann-windowed magnitude STFT with hop ``window // 4`` and no centring."""
    x = _frames_needed(x, window)
    spec = torch.stft(
        x, n_fft=window, hop_length=window // 4, window=torch.hann_window(window, periodic=True, dtype=x.dtype),
        center=False, return_complex=True,
    )
    return spec.abs()


def log_mel(x: torch.Tensor, window: int, n_mels: int) -> torch.Tensor:
    mag = stft_magnitude(x, window)
    mel = torch.matmul(_mel_basis(window, n_mels).to(mag.dtype), mag)
    return torch.log10(mel.clamp(min=MAG_FLOOR))


def _check_pair(x, y):
    if x.shape != y.shape:
        raise HASRDError(f"length mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")


def multiscale_mel_loss(x: torch.Tensor, x_hat: torch.Tensor, scales: MelScaleSet = MelScaleSet()) -> torch.Tensor:
    """Mean over scales of the L1 distance between log10 mel spectrograms."""
    _check_pair(x, x_hat)
    terms = [F.l1_loss(log_mel(x, w, m), log_mel(x_hat, w, m)) for w, m in scales]
    return torch.stack(terms).mean()


def stft_distance(x: torch.Tensor, x_hat: torch.Tensor, windows=STFT_WINDOWS) -> torch.Tensor:
    """Mean over windows of the L1 distance between log10 magnitude STFTs."""
    _check_pair(x, x_hat)
    terms = []
    for w in windows:
        a = torch.log10(stft_magnitude(x, w).clamp(min=MAG_FLOOR))
        b = torch.log10(stft_magnitude(x_hat, w).clamp(min=MAG_FLOOR))
        terms.append(F.l1_loss(a, b))
    return torch.stack(terms).mean()


DEFAULT_WEIGHTS = {"mel": 15.0, "commitment": 0.25, "codebook": 1.0}


@dataclass
class LossReport:
    total: torch.Tensor
    components: dict = field(default_factory=dict)

    def check_finite(self):
        for name, v in self.components.items():
            v = float(torch.as_tensor(v).detach())
            if not math.isfinite(v):
                raise HASRDError(f"non-finite {name} loss: {v}")
        if not math.isfinite(float(torch.as_tensor(self.total).detach())):
            raise HASRDError("non-finite total loss")
        return self

    def log_line(self, step: int) -> str:
        c = {k: float(torch.as_tensor(v).detach()) for k, v in self.components.items()}
        return (
            f"step {step} total {float(torch.as_tensor(self.total).detach()):.6f} mel {c['mel']:.6f} "
            f"commit {c['commitment']:.6f} cb {c['codebook']:.6f}"
        )


def stage2_total(components: dict, weights: dict | None = None) -> LossReport:
    weights = {**DEFAULT_WEIGHTS, **(weights or {})}
    missing = [k for k in DEFAULT_WEIGHTS if k not in components]
    if missing:
        raise HASRDError(f"missing loss components: {', '.join(missing)}")
    total = sum(weights[k] * components[k] for k in DEFAULT_WEIGHTS)
    return LossReport(total, dict(components))


def parse_log_line(line: str) -> dict:
    """Inverse of :meth:`LossReport.log_line`."""
    tok = line.split()
    if len(tok) % 2 or tok[0] != "step":
        raise HASRDError(f"malformed loss log line: {line!r}")
    out = {tok[i]: float(tok[i + 1]) for i in range(2, len(tok), 2)}
    out["step"] = int(tok[1])
    return out


def waveform_tensor(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float32)) if not torch.is_tensor(x) else x
