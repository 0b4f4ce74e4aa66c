"""Frequency-masking threshold of a signal.

Pipeline per frame of the SPL-normalized PSD:

1. maskers: local maxima above the threshold in quiet, thinned so that no
   two lie within 0.5 Bark (the louder survives), then smoothed by
   power-summing each masker with its two neighbour bins;
2. one individual threshold per masker, using a two-slope spreading
   function on the Bark axis;
3. the global threshold, a power sum of the threshold in quiet and all
   individual thresholds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_signal
from .dsp import PsdMatrix, StftConfig, normalize_spl, psd, stft

# stands in for +inf dB (bins outside the audible range) to keep thresholds finite
POS_SENTINEL_DB = 1e9
ATH_MIN_HZ = 20.0
ATH_MAX_HZ = 8000.0
BARK_SUPPRESSION_WIDTH = 0.5
SPREAD_LOW = -3.0
SPREAD_HIGH = 8.0


def bark_scale(freq_hz):
    f = np.asarray(freq_hz, dtype=np.float64)
    return 13.0 * np.arctan(0.00076 * f) + 3.5 * np.arctan((f / 7500.0) ** 2)


def ath(freq_hz):
    """Absolute threshold of hearing in dB SPL; +inf outside 20 Hz - 8 kHz."""
    f = np.asarray(freq_hz, dtype=np.float64)
    inside = (f >= ATH_MIN_HZ) & (f <= ATH_MAX_HZ)
    khz = np.where(inside, f, 1000.0) / 1000.0
    curve = 3.64 * khz**-0.8 - 6.5 * np.exp(-0.6 * (khz - 3.3) ** 2) + 1e-3 * khz**4
    out = np.where(inside, curve, np.inf)
    return out[()] if out.ndim == 0 else out


def masking_index(bark):
    """Offset of an individual threshold below its masker's level."""
    return -6.025 - 0.275 * np.asarray(bark, dtype=np.float64)


def spreading_function(delta_bark, masker_spl):
    """Two-slope spread in dB; -inf outside [-3, 8) Bark."""
    dz = np.asarray(delta_bark, dtype=np.float64)
    p = np.asarray(masker_spl, dtype=np.float64)
    conditions = [
        (dz >= -3) & (dz < -1),
        (dz >= -1) & (dz < 0),
        (dz >= 0) & (dz < 1),
        (dz >= 1) & (dz < 8),
    ]
    choices = [
        17 * dz - 0.4 * p + 11,
        (0.4 * p + 6) * dz,
        -17 * dz,
        (0.15 * p - 17) * dz - 0.15 * p,
    ]
    return np.select(conditions, choices, default=-np.inf)


@dataclass(frozen=True)
class Masker:
    bin_index: int
    bark: float
    spl: float


def _power_sum_db(*levels):
    return 10.0 * np.log10(sum(10.0 ** (np.asarray(lv) / 10.0) for lv in levels))


def _local_maxima(row: np.ndarray) -> np.ndarray:
    """Interior bins >= both neighbours; on a plateau only its first bin is kept."""
    centre, left, right = row[1:-1], row[:-2], row[2:]
    is_peak = (centre >= left) & (centre >= right)
    plateau_tail = centre == left
    idx = np.flatnonzero(is_peak & ~plateau_tail) + 1
    return idx


def _suppress(indices: list[int], levels: list[float], barks: np.ndarray) -> list[int]:
    kept = list(indices)
    lv = dict(zip(indices, levels))
    i = 0
    while i < len(kept) - 1:
        a, b = kept[i], kept[i + 1]
        if barks[b] - barks[a] < BARK_SUPPRESSION_WIDTH:
            # ties keep the lower bin
            del kept[i + 1 if lv[a] >= lv[b] else i]
        else:
            i += 1
    return kept


def _smoothed(row: np.ndarray, k: int) -> float:
    last = row.shape[0] - 1
    return float(_power_sum_db(row[max(k - 1, 0)], row[k], row[min(k + 1, last)]))


def find_maskers(p: PsdMatrix, frame: int, cfg: StftConfig | None = None, *,
                 smooth_before_suppression: bool = False) -> list[Masker]:
    cfg = cfg or StftConfig()
    row = np.asarray(p.values[frame], dtype=np.float64)
    freqs = cfg.bin_frequencies()
    barks = bark_scale(freqs)
    quiet = ath(freqs)

    idx = _local_maxima(row)
    idx = idx[row[idx] >= quiet[idx]]
    if idx.size == 0:
        return []
    idx = [int(k) for k in idx]
    if smooth_before_suppression:
        levels = [_smoothed(row, k) for k in idx]
        kept = _suppress(idx, levels, barks)
        smooth = dict(zip(idx, levels))
        return [Masker(k, float(barks[k]), smooth[k]) for k in kept]
    kept = _suppress(idx, [float(row[k]) for k in idx], barks)
    return [Masker(k, float(barks[k]), _smoothed(row, k)) for k in kept]


def individual_threshold(masker: Masker, maskee_bark):
    """Threshold (dB) that ``masker`` imposes at Bark position(s) ``maskee_bark``."""
    dz = np.asarray(maskee_bark, dtype=np.float64) - masker.bark
    return masker.spl + masking_index(masker.bark) + spreading_function(dz, masker.spl)


@dataclass
class MaskingThreshold:
    """Global masking threshold (frames x bins, dB on the normalized SPL scale)."""

    values: np.ndarray
    ath: np.ndarray
    bark: np.ndarray
    normalization_offset: float
    config: StftConfig
    maskers: list[list[Masker]] = field(default_factory=list, repr=False)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


def _frame_threshold(maskers: list[Masker], barks: np.ndarray, quiet: np.ndarray) -> np.ndarray:
    """Power sum of the threshold in quiet and every masker's individual threshold.

    Bins no masker reaches keep the quiet threshold exactly (inf stays inf).
    """
    if not maskers:
        return quiet.copy()
    m_bark = np.array([m.bark for m in maskers])[:, None]
    m_spl = np.array([m.spl for m in maskers])[:, None]
    levels = m_spl + masking_index(m_bark) + spreading_function(barks[None, :] - m_bark, m_spl)
    masked = (10.0 ** (levels / 10.0)).sum(axis=0)
    with np.errstate(over="ignore"):
        total = 10.0 ** (quiet / 10.0) + masked
    with np.errstate(divide="ignore"):
        return np.where(masked > 0, 10.0 * np.log10(total), quiet)


def global_threshold(p: PsdMatrix, cfg: StftConfig | None = None, *,
                     smooth_before_suppression: bool = False) -> MaskingThreshold:
    cfg = cfg or StftConfig()
    freqs = cfg.bin_frequencies()
    barks = bark_scale(freqs)
    quiet = ath(freqs)
    all_maskers, rows = [], []
    for t in range(p.values.shape[0]):
        maskers = find_maskers(p, t, cfg, smooth_before_suppression=smooth_before_suppression)
        all_maskers.append(maskers)
        rows.append(_frame_threshold(maskers, barks, quiet))
    values = np.array(rows).reshape(p.values.shape[0], cfg.n_bins)
    values = np.where(np.isinf(values), POS_SENTINEL_DB, values)
    quiet = np.where(np.isinf(quiet), POS_SENTINEL_DB, quiet)
    offset = p.normalization_offset if p.normalization_offset is not None else 0.0
    return MaskingThreshold(values, quiet, barks, float(offset), cfg, all_maskers)


def masking_threshold(wave, cfg: StftConfig | None = None, *,
                      smooth_before_suppression: bool = False) -> MaskingThreshold:
    """Threshold of a raw waveform.

    A silent waveform has no finite PSD to normalize; it gets offset 0 and a
    threshold equal to the threshold in quiet.
    """
    cfg = cfg or StftConfig()
    x = check_signal(wave, min_length=cfg.window_length, name="waveform")
    raw = psd(stft(x, cfg), cfg)
    if not np.isfinite(raw.values).any():
        norm = PsdMatrix(raw.values, 0.0)
    else:
        norm = normalize_spl(raw)
    return global_threshold(norm, cfg, smooth_before_suppression=smooth_before_suppression)


class MaskingThresholdTransformer(TransformerMixin, BaseEstimator):
    """Maps waveforms to their global masking thresholds (frames x bins arrays).

    Stateless: ``fit`` only validates the configuration.
    """

    def __init__(self, window_length=2048, hop_length=512, window="modified_hann",
                 smooth_before_suppression=False):
        self.window_length = window_length
        self.hop_length = hop_length
        self.window = window
        self.smooth_before_suppression = smooth_before_suppression

    def _config(self) -> StftConfig:
        return StftConfig(self.window_length, self.hop_length, self.window)

    def fit(self, X=None, y=None):
        self.config_ = self._config()
        return self

    def threshold(self, wave) -> MaskingThreshold:
        cfg = getattr(self, "config_", None) or self._config()
        return masking_threshold(wave, cfg, smooth_before_suppression=self.smooth_before_suppression)

    def transform(self, X):
        return [self.threshold(x).values for x in X]

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.requires_fit = False
        return tags
