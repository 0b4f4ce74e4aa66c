import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskattack.dsp import PsdMatrix, StftConfig, normalized_psd
from maskattack.psycho import (
    POS_SENTINEL_DB, Masker, MaskingThresholdTransformer, ath, bark_scale, find_maskers, global_threshold,
    individual_threshold, masking_index, masking_threshold, spreading_function,
)

from oracles import ref_global_threshold, ref_spread

CFG = StftConfig()
FREQS = CFG.bin_frequencies()


def test_bark_values():
    assert bark_scale(0.0) == 0.0
    assert bark_scale(1000.0) == pytest.approx(8.510531510721993, abs=1e-12)


@given(st.floats(0, 20000), st.floats(1e-3, 5000))
def test_bark_monotone(f, df):
    assert bark_scale(f + df) > bark_scale(f)


def test_ath_values():
    assert ath(1000.0) == pytest.approx(3.369066525895342, abs=1e-12)
    assert ath(100.0) > ath(1000.0)
    assert ath(0.0) == np.inf
    assert ath(8001.0) == np.inf
    assert np.isinf(ath(FREQS[[0, 1, 2]])).tolist() == [True, True, True]
    assert np.isfinite(ath(FREQS[3]))


def test_masking_index():
    assert masking_index(10.0) == pytest.approx(-8.775)


@settings(max_examples=200)
@given(st.floats(-5, 10), st.floats(0, 120))
def test_spreading_function_matches_reference(dz, p):
    assert spreading_function(dz, p) == pytest.approx(ref_spread(dz, p), abs=1e-9)


def test_spreading_function_is_continuous_at_zero():
    assert spreading_function(0.0, 80.0) == 0.0
    assert spreading_function(-1e-12, 80.0) == pytest.approx(0.0, abs=1e-9)


def _row(base=-200.0):
    return np.full(CFG.n_bins, base)


def test_single_peak_masker():
    row = _row()
    row[127:130] = [40.0, 96.0, 40.0]
    ms = find_maskers(PsdMatrix(row[None], 0.0), 0)
    assert len(ms) == 1
    assert ms[0].bin_index == 128
    assert ms[0].spl == pytest.approx(10 * math.log10(1e4 + 10**9.6 + 1e4))
    assert ms[0].spl == pytest.approx(96.0000218, abs=1e-6)


def test_equal_peaks_within_half_bark_keep_one():
    row = _row()
    row[[40, 44]] = 70.0  # four bins apart is about 0.3 Bark here
    assert bark_scale(FREQS[44]) - bark_scale(FREQS[40]) == pytest.approx(0.3, abs=0.02)
    ms = find_maskers(PsdMatrix(row[None], 0.0), 0)
    assert [m.bin_index for m in ms] == [40]


def test_louder_peak_survives_suppression():
    row = _row()
    row[[100, 104]] = [60.0, 70.0]
    assert [m.bin_index for m in find_maskers(PsdMatrix(row[None], 0.0), 0)] == [104]


def test_plateau_keeps_lowest_bin():
    row = _row()
    row[200:203] = 60.0
    assert [m.bin_index for m in find_maskers(PsdMatrix(row[None], 0.0), 0)] == [200]


def test_peak_below_ath_is_not_a_masker():
    row = _row()
    row[10] = ath(FREQS[10]) - 1.0
    row[500] = ath(FREQS[500]) + 1.0
    assert [m.bin_index for m in find_maskers(PsdMatrix(row[None], 0.0), 0)] == [500]


def test_silent_frame_has_no_maskers():
    assert find_maskers(PsdMatrix(np.full((1, CFG.n_bins), -np.inf), 0.0), 0) == []


def test_smoothing_order_flag():
    # smoothing before suppression lets the broader peak win the tie-break
    row = _row()
    row[100], row[104] = 70.0, 69.0
    row[[103, 105]] = 68.0
    p = PsdMatrix(row[None], 0.0)
    assert [m.bin_index for m in find_maskers(p, 0)] == [100]
    assert [m.bin_index for m in find_maskers(p, 0, smooth_before_suppression=True)] == [104]


def test_individual_threshold_examples():
    b = bark_scale(1000.0)
    m = Masker(128, float(b), 96.0)
    assert individual_threshold(m, b) == pytest.approx(96 - 6.025 - 0.275 * b)
    assert individual_threshold(m, b - 4) == -np.inf
    assert individual_threshold(m, b + 8) == -np.inf


def test_no_maskers_gives_ath():
    th = global_threshold(PsdMatrix(np.full((2, CFG.n_bins), -np.inf), 0.0))
    quiet = ath(FREQS)
    finite = np.isfinite(quiet)
    np.testing.assert_array_equal(th.values[:, finite], np.broadcast_to(quiet[finite], (2, finite.sum())))
    assert (th.values[:, ~finite] == POS_SENTINEL_DB).all()


def test_equal_power_masker_adds_3db():
    from maskattack.psycho import _frame_threshold

    k, i = 300, 301
    b = bark_scale(FREQS)
    quiet = ath(FREQS)
    # for 0 <= dz < 1 the spread does not depend on the masker level
    dz = b[i] - b[k]
    spl = quiet[i] - masking_index(b[k]) + 17 * dz
    m = Masker(k, float(b[k]), float(spl))
    assert individual_threshold(m, b[i]) == pytest.approx(quiet[i])
    out = _frame_threshold([m], b, quiet)
    assert out[i] - quiet[i] == pytest.approx(10 * np.log10(2), abs=1e-9)


def test_one_khz_sine():
    t = np.arange(16000) / 16000
    x = 32767 * np.sin(2 * np.pi * 1000 * t)
    th = masking_threshold(x)
    steady = range(1, th.n_frames - 1)
    for f in steady:
        bins = [m.bin_index for m in th.maskers[f]]
        assert any(abs(k - 128) <= 1 for k in bins)
    b = bark_scale(1000.0)
    near = th.values[5, 128]
    assert abs(near - (96 + masking_index(b))) < 3.0
    assert th.values[5, 512] < 40.0
    ref, _, _ = ref_global_threshold(x)
    np.testing.assert_allclose(th.values, ref, atol=1e-6, rtol=0)


def test_threshold_at_least_ath(rng):
    th = masking_threshold(rng.standard_normal(8000) * 1000)
    assert (th.values >= th.ath[None, :] - 1e-12).all()
    assert np.isfinite(th.values).all()


def test_superset_of_maskers_is_monotone():
    from maskattack.psycho import _frame_threshold

    b = bark_scale(FREQS)
    quiet = ath(FREQS)
    ms = [Masker(k, float(b[k]), 80.0) for k in (50, 200, 600)]
    small = _frame_threshold(ms[:2], b, quiet)
    big = _frame_threshold(ms, b, quiet)
    assert (big >= small).all()


def test_silent_signal_threshold_is_ath():
    th = masking_threshold(np.zeros(4096))
    assert th.normalization_offset == 0.0
    np.testing.assert_array_equal(th.values, np.broadcast_to(th.ath, th.values.shape))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_oracle_equivalence(seed):
    x = np.random.default_rng(seed).standard_normal(16000) * 3000
    th = masking_threshold(x)
    ref, ref_maskers, offset = ref_global_threshold(x)
    assert th.normalization_offset == pytest.approx(offset, abs=1e-9)
    assert [[m.bin_index for m in f] for f in th.maskers] == [[k for k, _, _ in f] for f in ref_maskers]
    np.testing.assert_allclose(th.values, ref, atol=1e-6, rtol=0)


def test_oracle_equivalence_smoothing_first():
    x = np.random.default_rng(9).standard_normal(6000) * 3000
    th = masking_threshold(x, smooth_before_suppression=True)
    ref, _, _ = ref_global_threshold(x, smooth_first=True)
    np.testing.assert_allclose(th.values, ref, atol=1e-6, rtol=0)


def test_transformer(rng):
    X = [rng.standard_normal(4096) * 100, rng.standard_normal(6000) * 100]
    tr = MaskingThresholdTransformer()
    out = tr.fit_transform(X)
    assert [o.shape for o in out] == [(5, 1025), (8, 1025)]
    assert tr.get_params()["window_length"] == 2048
    np.testing.assert_array_equal(tr.transform(X[:1])[0], masking_threshold(X[0]).values)
