"""Differentiable MFCC frontend: framing, Hann window, power spectrum, mel, log, DCT-II."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .._validation import SAMPLE_RATE, ValidationError, check_signal
from ..dsp import hann
from . import tape as T


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = SAMPLE_RATE
    frame_length: int = 400  # 25 ms
    hop_length: int = 160  # 10 ms
    n_fft: int = 512
    n_mels: int = 30
    n_mfcc: int = 30
    log_floor: float = 1e-10
    fmin: float = 0.0
    fmax: float | None = None

    def __post_init__(self):
        if self.n_fft < self.frame_length:
            raise ValidationError("n_fft must be at least frame_length")
        if self.n_mfcc > self.n_mels:
            raise ValidationError("n_mfcc cannot exceed n_mels")

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.frame_length:
            raise ValidationError(
                f"input of {n_samples} samples is shorter than one frontend frame ({self.frame_length})"
            )
        return (n_samples - self.frame_length) // self.hop_length + 1

    def to_dict(self) -> dict:
        return asdict(self)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int, fmin: float = 0.0,
                   fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-mel filters, shape (n_fft // 2 + 1, n_mels)."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (centre - lower)
    falling = (upper - freqs[None, :]) / (upper - centre)
    fb = np.maximum(0.0, np.minimum(rising, falling)).T
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=8)
def dct_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Orthonormal DCT-II as a right-multiplication matrix, shape (n_in, n_out)."""
    n = np.arange(n_in)[:, None]
    k = np.arange(n_out)[None, :]
    mat = np.cos(np.pi * k * (2 * n + 1) / (2 * n_in)) * np.sqrt(2.0 / n_in)
    mat[:, 0] /= np.sqrt(2.0)
    mat.setflags(write=False)
    return mat


@lru_cache(maxsize=8)
def _window(length: int) -> np.ndarray:
    w = hann(length)
    w.setflags(write=False)
    return w


def mfcc(wave, cfg: FrontendConfig | None = None) -> T.Tensor:
    """(samples,) -> (frames, n_mfcc) or (batch, samples) -> (batch, frames, n_mfcc)."""
    cfg = cfg or FrontendConfig()
    n = T._val(wave).shape[-1]
    cfg.n_frames(n)
    frames = T.frame(wave, cfg.frame_length, cfg.hop_length)
    windowed = T.mul(frames, _window(cfg.frame_length))
    power = T.power_spectrum(windowed, cfg.n_fft)
    mel = T.matmul(power, mel_filterbank(cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax))
    logmel = T.log(mel, floor=cfg.log_floor)
    return T.matmul(logmel, dct_matrix(cfg.n_mels, cfg.n_mfcc))


class MFCCTransformer(TransformerMixin, BaseEstimator):
    """sklearn wrapper returning one (frames, n_mfcc) array per waveform."""

    def __init__(self, n_mfcc=30, n_mels=30, frame_length=400, hop_length=160, n_fft=512,
                 log_floor=1e-10):
        self.n_mfcc = n_mfcc
        self.n_mels = n_mels
        self.frame_length = frame_length
        self.hop_length = hop_length
        self.n_fft = n_fft
        self.log_floor = log_floor

    def fit(self, X=None, y=None):
        self.config_ = FrontendConfig(
            frame_length=self.frame_length, hop_length=self.hop_length, n_fft=self.n_fft,
            n_mels=self.n_mels, n_mfcc=self.n_mfcc, log_floor=self.log_floor,
        )
        return self

    def transform(self, X):
        cfg = getattr(self, "config_", None) or self.fit().config_
        return [mfcc(check_signal(x, min_length=cfg.frame_length), cfg).value for x in X]

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.requires_fit = False
        return tags
