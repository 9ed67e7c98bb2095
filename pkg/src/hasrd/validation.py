"""Input validation helpers shared by the estimators and functional ops."""

from __future__ import annotations

import numpy as np

SAMPLE_RATE = 16000


class HASRDError(ValueError):
    """Base class for errors raised on invalid inputs or state."""


class NotFittedError(HASRDError, AttributeError):
    """Raised when a component is used before it has been trained."""


def check_waveform(samples, sample_rate: int = SAMPLE_RATE, min_samples: int = 1) -> np.ndarray:
    """Return ``samples`` as a 1-D float32 array after checking rate and length."""
    if sample_rate != SAMPLE_RATE:
        raise HASRDError(f"sample rate must be {SAMPLE_RATE} Hz, got {sample_rate}")
    x = np.asarray(samples, dtype=np.float32)
    if x.ndim != 1:
        raise HASRDError(f"waveform must be 1-D, got shape {x.shape}")
    if x.shape[0] < min_samples:
        raise HASRDError(
            f"waveform too short: {x.shape[0]} samples, need at least {min_samples}"
        )
    if not np.all(np.isfinite(x)):
        raise HASRDError("waveform contains non-finite samples")
    return x


def check_matrix(a, name: str = "input", ncols: int | None = None, dtype=np.float32) -> np.ndarray:
    m = np.asarray(a, dtype=dtype)
    if m.ndim != 2:
        raise HASRDError(f"{name} must be 2-D, got shape {m.shape}")
    if ncols is not None and m.shape[1] != ncols:
        raise HASRDError(f"{name} must have {ncols} columns, got {m.shape[1]}")
    if not np.all(np.isfinite(m)):
        raise HASRDError(f"{name} contains non-finite values")
    return m


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or int(value) != value or value < minimum:
        raise HASRDError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_is_fitted(estimator, attributes) -> None:
    if isinstance(attributes, str):
        attributes = [attributes]
    if not all(getattr(estimator, a, None) is not None for a in attributes):
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit() first"
        )
