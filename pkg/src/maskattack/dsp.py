"""STFT framing and power spectral density on the SPL-normalized dB scale."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import SAMPLE_RATE, ValidationError, check_signal

SPL_REFERENCE_DB = 96.0
# -inf dB stand-in used wherever the value must stay differentiable/total
NEG_SENTINEL_DB = -1e9
# floor added to |s/N|^2 on optimization paths (about -200 dB)
POWER_FLOOR = 1e-20


@dataclass(frozen=True)
class StftConfig:
    window_length: int = 2048
    hop_length: int = 512
    window: str = "modified_hann"
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        n = self.window_length
        if n <= 0 or n & (n - 1):
            raise ValidationError(f"window_length must be a power of two, got {n}")
        if not 0 < self.hop_length <= n:
            raise ValidationError(f"hop_length must be in (0, window_length], got {self.hop_length}")
        if self.window not in WINDOWS:
            raise ValidationError(f"unknown window {self.window!r}, choose from {sorted(WINDOWS)}")

    @property
    def n_bins(self) -> int:
        return self.window_length // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.window_length:
            raise ValidationError(
                f"signal of {n_samples} samples is shorter than one window ({self.window_length})"
            )
        return (n_samples - self.window_length) // self.hop_length + 1

    def bin_frequencies(self) -> np.ndarray:
        return np.arange(self.n_bins) * (self.sample_rate / self.window_length)

    def window_array(self) -> np.ndarray:
        return WINDOWS[self.window](self.window_length)


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def modified_hann(n: int) -> np.ndarray:
    """Periodic Hann scaled by sqrt(8/3) so its mean power is one."""
    return np.sqrt(8.0 / 3.0) * hann(n)


WINDOWS = {"modified_hann": modified_hann, "hann": hann}


@dataclass
class Spectrogram:
    values: np.ndarray  # frames x bins, complex
    config: StftConfig

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


@dataclass
class PsdMatrix:
    """Frames x bins PSD in dB; ``normalization_offset`` is None until normalized."""

    values: np.ndarray
    normalization_offset: float | None = None

    @property
    def is_normalized(self) -> bool:
        return self.normalization_offset is not None


def frame_signal(x: np.ndarray, length: int, hop: int) -> np.ndarray:
    """Read-only view of shape (frames, length); a trailing partial frame is dropped."""
    n_frames = (x.shape[-1] - length) // hop + 1
    if n_frames < 1:
        raise ValidationError(f"signal of {x.shape[-1]} samples is shorter than one frame ({length})")
    return np.lib.stride_tricks.sliding_window_view(x, length, axis=-1)[..., ::hop, :][..., :n_frames, :]


def stft(wave, cfg: StftConfig | None = None) -> Spectrogram:
    cfg = cfg or StftConfig()
    x = check_signal(wave, min_length=cfg.window_length, name="waveform")
    frames = frame_signal(x, cfg.window_length, cfg.hop_length) * cfg.window_array()
    return Spectrogram(np.fft.rfft(frames, axis=-1), cfg)


def psd(spec: Spectrogram, cfg: StftConfig | None = None) -> PsdMatrix:
    """10*log10(|s/N|^2) per cell; zero magnitude gives -inf."""
    cfg = cfg or spec.config
    power = np.abs(spec.values / cfg.window_length) ** 2
    with np.errstate(divide="ignore"):
        values = 10.0 * np.log10(power)
    return PsdMatrix(values)


def normalize_spl(p: PsdMatrix) -> PsdMatrix:
    """Shift every cell so the global maximum sits at 96 dB."""
    finite = np.isfinite(p.values)
    if not finite.any():
        raise ValidationError("cannot normalize the PSD of a silent signal (no finite entries)")
    top = p.values[finite].max()
    shift = SPL_REFERENCE_DB - top
    values = p.values + shift
    # m + (96 - m) can miss 96 by one ulp
    values[p.values == top] = SPL_REFERENCE_DB
    prior = p.normalization_offset or 0.0
    return PsdMatrix(values, prior + shift)


def normalized_psd(wave, cfg: StftConfig | None = None) -> PsdMatrix:
    return normalize_spl(psd(stft(wave, cfg), cfg))


def perturbation_psd(delta, offset: float, cfg: StftConfig | None = None) -> np.ndarray:
    """PSD of a perturbation shifted by the *original's* normalization offset.

    Uses the floored power so that it agrees exactly with the differentiable
    threshold loss.
    """
    cfg = cfg or StftConfig()
    spec = stft(delta, cfg)
    power = np.abs(spec.values) ** 2 / cfg.window_length**2
    return 10.0 * np.log10(power + POWER_FLOOR) + offset


def psd_to_csv(values: np.ndarray, path, fmt: str = "%.6f") -> None:
    arr = np.where(np.isfinite(values), values, NEG_SENTINEL_DB)
    np.savetxt(path, arr, delimiter=",", fmt=fmt)
