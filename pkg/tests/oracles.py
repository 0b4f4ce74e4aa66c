"""Independent reference implementations used only by the tests.

Written straight from the formulas with scalar loops and an explicit DFT; no
code is shared with the package's vectorized paths.
"""

import math

import numpy as np

FS = 16000


def ref_bark(f):
    return 13.0 * math.atan(0.00076 * f) + 3.5 * math.atan((f / 7500.0) ** 2)


def ref_ath(f):
    if f < 20.0 or f > 8000.0:
        return math.inf
    k = f / 1000.0
    return 3.64 * k ** -0.8 - 6.5 * math.exp(-0.6 * (k - 3.3) ** 2) + 0.001 * k ** 4


def ref_spread(dz, p):
    if -3 <= dz < -1:
        return 17 * dz - 0.4 * p + 11
    if -1 <= dz < 0:
        return (0.4 * p + 6) * dz
    if 0 <= dz < 1:
        return -17 * dz
    if 1 <= dz < 8:
        return (0.15 * p - 17) * dz - 0.15 * p
    return -math.inf


def ref_psd_normalized(x, n=2048, hop=512):
    """Eqs. for PSD and 96 dB normalization via an explicit DFT matrix."""
    win = np.array([math.sqrt(8.0 / 3.0) * (0.5 - 0.5 * math.cos(2 * math.pi * i / n)) for i in range(n)])
    bins = n // 2 + 1
    kn = np.outer(np.arange(bins), np.arange(n))
    dft = np.exp(-2j * np.pi * kn / n)
    n_frames = (len(x) - n) // hop + 1
    rows = []
    for t in range(n_frames):
        s = dft @ (x[t * hop:t * hop + n] * win)
        row = []
        for k in range(bins):
            mag2 = abs(s[k] / n) ** 2
            row.append(10 * math.log10(mag2) if mag2 > 0 else -math.inf)
        rows.append(row)
    p = np.array(rows)
    top = max(v for v in p.ravel() if math.isfinite(v))
    return p + (96.0 - top), 96.0 - top


def ref_maskers(row, n=2048, smooth_first=False):
    bins = len(row)
    freqs = [k * FS / n for k in range(bins)]
    cands = []
    for k in range(1, bins - 1):
        if row[k] >= row[k - 1] and row[k] >= row[k + 1] and not row[k] == row[k - 1]:
            if row[k] >= ref_ath(freqs[k]):
                cands.append(k)

    def smooth(k):
        lo, hi = max(k - 1, 0), min(k + 1, bins - 1)
        return 10 * math.log10(10 ** (row[lo] / 10) + 10 ** (row[k] / 10) + 10 ** (row[hi] / 10))

    level = {k: (smooth(k) if smooth_first else row[k]) for k in cands}
    kept = list(cands)
    i = 0
    while i < len(kept) - 1:
        a, b = kept[i], kept[i + 1]
        if ref_bark(freqs[b]) - ref_bark(freqs[a]) < 0.5:
            if level[a] >= level[b]:
                kept.pop(i + 1)
            else:
                kept.pop(i)
        else:
            i += 1
    return [(k, ref_bark(freqs[k]), smooth(k)) for k in kept]


def ref_global_threshold(x, n=2048, hop=512, smooth_first=False):
    """Returns (threshold frames x bins, maskers per frame, offset)."""
    p, offset = ref_psd_normalized(np.asarray(x, dtype=float), n, hop)
    bins = n // 2 + 1
    freqs = [k * FS / n for k in range(bins)]
    barks = [ref_bark(f) for f in freqs]
    aths = [ref_ath(f) for f in freqs]
    out = np.zeros_like(p)
    all_maskers = []
    for t in range(p.shape[0]):
        maskers = ref_maskers(list(p[t]), n, smooth_first)
        all_maskers.append(maskers)
        for i in range(bins):
            if math.isinf(aths[i]):
                out[t, i] = 1e9
                continue
            total = 10 ** (aths[i] / 10)
            for _, bj, spl in maskers:
                sf = ref_spread(barks[i] - bj, spl)
                if sf == -math.inf:
                    continue
                total += 10 ** ((spl + (-6.025 - 0.275 * bj) + sf) / 10)
            out[t, i] = 10 * math.log10(total)
    return out, all_maskers, offset


def central_difference(f, x, coords, h):
    """Central finite differences of scalar ``f`` at ``x`` along the given flat coordinates."""
    x = np.array(x, dtype=float)
    flat = x.reshape(-1)
    out = []
    for c in coords:
        old = flat[c]
        flat[c] = old + h
        up = f(x)
        flat[c] = old - h
        down = f(x)
        flat[c] = old
        out.append((up - down) / (2 * h))
    return np.array(out)


def relative_error(numeric, analytic, floor=1e-12):
    """Elementwise |a-b| / max(|a|, |b|, floor)."""
    numeric = np.asarray(numeric)
    analytic = np.asarray(analytic)
    scale = np.maximum(np.maximum(np.abs(numeric), np.abs(analytic)), floor)
    return np.abs(numeric - analytic) / scale
