"""Attack success rate, SNR, masking-threshold exceedance and run summaries."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from ._validation import ValidationError, check_same_length, check_signal
from .dsp import perturbation_psd

STAGES = ("before", "stage1", "stage2")
STAGE_TITLES = {"before": "Before Attack", "stage1": "Attack Stage1", "stage2": "Attack Stage2"}


def success_rate(results: Sequence) -> float:
    """N_s / N over results carrying a ``success`` flag (or plain booleans)."""
    flags = [bool(getattr(r, "success", r)) for r in results]
    if not flags:
        raise ValidationError("success rate of an empty result list is undefined")
    return sum(flags) / len(flags)


def snr_db(x, delta) -> float:
    """Whole-utterance 10*log10(sum x^2 / sum delta^2); +inf for a zero perturbation."""
    x = check_signal(x, name="original")
    delta = check_signal(delta, name="perturbation")
    check_same_length(x, delta)
    signal = float(np.dot(x, x))
    noise = float(np.dot(delta, delta))
    if signal == 0.0:
        raise ValidationError("SNR undefined for a zero-energy original")
    if noise == 0.0:
        return float("inf")
    return 10.0 * np.log10(signal / noise)


class Exceedance(NamedTuple):
    fraction: float
    margin_db: float


def exceedance(x, delta, threshold) -> Exceedance:
    """Fraction of (frame, bin) cells where the perturbation PSD exceeds the
    masking threshold, and the mean excess over those cells (0 when none)."""
    x = check_signal(x, name="original")
    delta = check_signal(delta, name="perturbation")
    check_same_length(x, delta)
    p_delta = perturbation_psd(delta, threshold.normalization_offset, threshold.config)
    if p_delta.shape != threshold.values.shape:
        raise ValidationError(
            f"perturbation framing {p_delta.shape} does not match threshold {threshold.values.shape}"
        )
    excess = p_delta - threshold.values
    above = excess > 0
    if not above.any():
        return Exceedance(0.0, 0.0)
    return Exceedance(float(above.mean()), float(excess[above].mean()))


# -- run summaries -----------------------------------------------------------


@dataclass
class SummaryRow:
    mode: str
    stage: str
    n: int
    n_success: int
    acc: float
    mean_snr_db: float | None
    mean_exceedance: float | None
    pesq: float | None = None
    n_errors: int = 0


@dataclass
class RunSummary:
    rows: list[SummaryRow] = field(default_factory=list)
    n_errors: int = 0

    def row(self, mode: str, stage: str) -> SummaryRow:
        for r in self.rows:
            if r.mode == mode and r.stage == stage:
                return r
        raise KeyError((mode, stage))

    @property
    def modes(self) -> list[str]:
        return list(dict.fromkeys(r.mode for r in self.rows))

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows], "n_errors": self.n_errors}


def _mean(values) -> float | None:
    vals = [v for v in values if np.isfinite(v)]
    return float(np.mean(vals)) if vals else None


def summarize(results: Iterable, errors: Mapping[str, int] | None = None) -> RunSummary:
    """Group results by test mode and stage (``before`` is the unattacked original).

    ``errors`` counts failed utterances per mode; they are reported but not
    included in the rates.
    """
    results = [r for r in results if r.error is None]
    errors = {(m or "all"): int(c) for m, c in (errors or {}).items() if c}
    if not results and not errors:
        raise ValidationError("no results to summarize")
    summary = RunSummary(n_errors=sum(errors.values()))
    groups: dict[str, list] = {m: [] for m in errors}
    for r in results:
        groups.setdefault(r.mode or "all", []).append(r)
    for mode in sorted(groups):
        group = groups[mode]
        n, n_err = len(group), errors.get(mode, 0)
        flags = [r.pre_attack_success for r in group]
        summary.rows.append(SummaryRow(mode, "before", n, sum(flags), sum(flags) / n if n else 0.0,
                                       None, None, n_errors=n_err))
        for stage in ("stage1", "stage2"):
            metrics = [getattr(r, stage) for r in group]
            n_s = sum(m.success for m in metrics)
            summary.rows.append(SummaryRow(
                mode, stage, n, n_s, n_s / n if n else 0.0,
                _mean(m.snr_db for m in metrics), _mean(m.exceedance for m in metrics), n_errors=n_err,
            ))
    return summary


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"


SUMMARY_CSV_HEADER = (
    "mode", "n", "before_acc",
    "stage1_successes", "stage1_acc", "stage1_snr_db", "stage1_exceedance",
    "stage2_successes", "stage2_acc", "stage2_snr_db", "stage2_exceedance", "pesq", "errors",
)


def write_summary_csv(summary: RunSummary, path) -> None:
    """One row per test mode, stage metrics side by side."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_CSV_HEADER)
        for mode in summary.modes:
            before, s1, s2 = (summary.row(mode, s) for s in STAGES)
            writer.writerow([
                mode, s1.n, _fmt(before.acc),
                s1.n_success, _fmt(s1.acc), _fmt(s1.mean_snr_db), _fmt(s1.mean_exceedance),
                s2.n_success, _fmt(s2.acc), _fmt(s2.mean_snr_db), _fmt(s2.mean_exceedance), "", s1.n_errors,
            ])


def write_stage_table_csv(summary: RunSummary, path) -> None:
    """Success rate (%) with stages as rows and test modes as columns."""
    modes = summary.modes
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["system"] + modes)
        for stage in STAGES:
            writer.writerow([STAGE_TITLES[stage]] + [f"{100 * summary.row(m, stage).acc:.1f}" for m in modes])


def write_summary_json(summary: RunSummary, path) -> None:
    Path(path).write_text(json.dumps(summary.to_dict(), indent=1, sort_keys=True), encoding="utf-8")
