"""Input validation helpers shared by the estimators and the functional API."""

from __future__ import annotations

import numpy as np

SAMPLE_RATE = 16000


class ValidationError(ValueError):
    """Raised when user-supplied data violates a documented precondition."""


def check_signal(samples, *, min_length: int = 1, name: str = "signal") -> np.ndarray:
    """Return ``samples`` as a finite 1-D float64 array of at least ``min_length``."""
    arr = np.asarray(getattr(samples, "samples", samples), dtype=np.float64)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if arr.size < max(min_length, 1):
        raise ValidationError(
            f"{name} has {arr.size} samples, at least {max(min_length, 1)} required"
        )
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite samples")
    return arr


def check_signals(X, *, min_length: int = 1) -> list[np.ndarray]:
    """Validate a collection of waveforms (list of 1-D arrays or a 2-D array)."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = list(X)
    elif isinstance(X, np.ndarray) and X.ndim == 1 and X.dtype != object:
        raise ValidationError("expected a collection of waveforms, got a single 1-D array")
    signals = [check_signal(x, min_length=min_length, name=f"waveform {i}") for i, x in enumerate(X)]
    if not signals:
        raise ValidationError("no waveforms given")
    return signals


def check_same_length(a: np.ndarray, b: np.ndarray, what: str = "perturbation") -> None:
    if a.shape != b.shape:
        raise ValidationError(
            f"length mismatch: original has {a.shape[0]} samples, {what} has {b.shape[0]}"
        )
