"""Audio files, corpus manifests and attack result persistence.

Waveforms are kept on the raw 16-bit PCM amplitude scale (no division by
32768) so that perturbation bounds such as ``eps0=2000`` keep their meaning.
"""

from __future__ import annotations

import csv
import io
import json
import wave
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from ._validation import SAMPLE_RATE, ValidationError, check_signal

PCM_MIN = -32768
PCM_MAX = 32767
NO_LABEL = "none"
MANIFEST_HEADER = ("path", "true_label", "target_label")


class WavFormatError(ValueError):
    """The file is not 16-bit PCM mono WAV at 16 kHz."""


class ManifestError(ValueError):
    """A manifest line could not be parsed or failed validation."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = check_signal(self.samples, name="waveform")
        if int(self.sample_rate) != SAMPLE_RATE:
            raise ValidationError(f"unsupported sample rate {self.sample_rate} Hz, need {SAMPLE_RATE}")
        self.sample_rate = int(self.sample_rate)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


def quantize_pcm16(samples) -> np.ndarray:
    """Round half away from zero, then saturate to the int16 range."""
    x = np.asarray(samples, dtype=np.float64)
    rounded = np.sign(x) * np.floor(np.abs(x) + 0.5)
    return np.clip(rounded, PCM_MIN, PCM_MAX).astype(np.int16)


def read_wav(path) -> Waveform:
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            comptype = wf.getcomptype()
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        raise WavFormatError(f"{path}: unsupported format ({exc})") from exc
    except EOFError as exc:
        raise WavFormatError(f"{path}: truncated or empty WAV file") from exc
    if comptype != "NONE":
        raise WavFormatError(f"{path}: unsupported compression {comptype!r}")
    if channels != 1:
        raise WavFormatError(f"{path}: unsupported channel count {channels} (mono required)")
    if width != 2:
        raise WavFormatError(f"{path}: unsupported sample width {8 * width} bits (16-bit PCM required)")
    if rate != SAMPLE_RATE:
        raise WavFormatError(f"{path}: unsupported sample rate {rate} Hz ({SAMPLE_RATE} Hz required)")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    if samples.size == 0:
        raise WavFormatError(f"{path}: no audio frames")
    return Waveform(samples, rate)


def write_wav(wave_: Waveform, path) -> None:
    samples = wave_.samples if isinstance(wave_, Waveform) else check_signal(wave_)
    rate = wave_.sample_rate if isinstance(wave_, Waveform) else SAMPLE_RATE
    pcm = quantize_pcm16(samples)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(rate)
        wf.writeframes(pcm.astype("<i2").tobytes())


# -- manifests ---------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    true_label: str | None
    target_label: str | None
    mode: str | None = None

    @property
    def is_labelled(self) -> bool:
        return self.true_label is not None


@dataclass
class CorpusManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path | None = None

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p

    def labels(self) -> set[str]:
        out = set()
        for e in self.entries:
            out.update(lab for lab in (e.true_label, e.target_label) if lab is not None)
        return out

    def validate_labels(self, known: Iterable[str]) -> None:
        known = set(known)
        missing = sorted(self.labels() - known)
        if missing:
            raise ManifestError(f"speaker ids not in the model's label set: {', '.join(missing)}")

    def to_csv(self) -> str:
        """Canonical serialization; ``load_manifest`` of this text round-trips."""
        has_mode = any(e.mode is not None for e in self.entries)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER + (("mode",) if has_mode else ()))
        for e in self.entries:
            row = [e.path, e.true_label or NO_LABEL, e.target_label or ""]
            if has_mode:
                row.append(e.mode or "")
            writer.writerow(row)
        return buf.getvalue()


def parse_manifest(text: str, *, require_target: bool = True, root=None) -> CorpusManifest:
    """Parse manifest CSV text.

    The header is ``path,true_label,target_label`` with an optional fourth
    ``mode`` column used to group results (e.g. ``M2F'``). ``none`` marks an
    original without a speaker (music, noise). An empty target is allowed
    only when ``require_target`` is false (training manifests).
    """
    reader = csv.reader(io.StringIO(text))
    rows = [(i + 1, row) for i, row in enumerate(reader)]
    rows = [(n, r) for n, r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise ManifestError("line 1: empty manifest, header expected")
    lineno, header = rows[0]
    header = tuple(c.strip() for c in header)
    if header[:3] != MANIFEST_HEADER or len(header) > 4 or (len(header) == 4 and header[3] != "mode"):
        raise ManifestError(f"line {lineno}: bad header {','.join(header)!r}, expected 'path,true_label,target_label'")
    entries = []
    for lineno, row in rows[1:]:
        cells = [c.strip() for c in row]
        if len(cells) != len(header):
            raise ManifestError(f"line {lineno}: expected {len(header)} fields, got {len(cells)}")
        path, true_label, target_label = cells[:3]
        mode = cells[3] if len(cells) == 4 and cells[3] else None
        if not path:
            raise ManifestError(f"line {lineno}: empty path")
        if not true_label:
            raise ManifestError(f"line {lineno}: empty true_label (use '{NO_LABEL}' for unlabelled audio)")
        true_label = None if true_label == NO_LABEL else true_label
        if target_label == NO_LABEL:
            raise ManifestError(f"line {lineno}: target_label cannot be '{NO_LABEL}'")
        target_label = target_label or None
        if target_label is None and require_target:
            raise ManifestError(f"line {lineno}: missing target_label")
        if target_label is not None and target_label == true_label:
            raise ManifestError(f"line {lineno}: target equals true label ({target_label})")
        entries.append(ManifestEntry(path, true_label, target_label, mode))
    return CorpusManifest(entries, Path(root) if root is not None else None)


def load_manifest(path, *, require_target: bool = True) -> CorpusManifest:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    return parse_manifest(text, require_target=require_target, root=path.parent)


def save_manifest(manifest: CorpusManifest, path) -> None:
    Path(path).write_text(manifest.to_csv(), encoding="utf-8")


# -- attack results ----------------------------------------------------------


@dataclass
class StageTrace:
    """Per-iteration record of one attack stage.

    ``bound`` holds eps for stage 1 and alpha for stage 2: the value used in
    that iteration's update. ``success`` is evaluated on the iterate the
    gradient was taken at.
    """

    stage: int
    iteration: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    ce_loss: list[float] = field(default_factory=list)
    th_loss: list[float] = field(default_factory=list)
    bound: list[float] = field(default_factory=list)
    success: list[bool] = field(default_factory=list)
    linf: list[float] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def append(self, iteration, loss, ce_loss, th_loss, bound, success, linf):
        self.iteration.append(int(iteration))
        self.loss.append(float(loss))
        self.ce_loss.append(float(ce_loss))
        self.th_loss.append(float(th_loss))
        self.bound.append(float(bound))
        self.success.append(bool(success))
        self.linf.append(float(linf))

    def __len__(self):
        return len(self.iteration)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StageTrace":
        return cls(**d)


@dataclass
class StageMetrics:
    success: bool
    snr_db: float
    exceedance: float
    exceedance_margin_db: float
    linf: float
    iterations: int
    pesq: float | None = None


@dataclass
class AttackResult:
    path: str
    true_label: str | None
    target_label: str
    mode: str | None
    pre_attack_success: bool
    stage1: StageMetrics
    stage2: StageMetrics
    stage1_trace: StageTrace
    stage2_trace: StageTrace
    adversarial: Waveform | None = None
    stage1_adversarial: Waveform | None = None
    error: str | None = None

    @property
    def final_metrics(self) -> StageMetrics:
        return self.stage2

    @property
    def success(self) -> bool:
        return self.stage2.success

    def to_dict(self) -> dict:
        """JSON-ready view without the waveforms."""
        return {
            "path": self.path,
            "true_label": self.true_label,
            "target_label": self.target_label,
            "mode": self.mode,
            "pre_attack_success": self.pre_attack_success,
            "stage1": asdict(self.stage1),
            "stage2": asdict(self.stage2),
            "final_metrics": asdict(self.stage2),
            "stage1_trace": self.stage1_trace.to_dict(),
            "stage2_trace": self.stage2_trace.to_dict(),
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttackResult":
        return cls(
            path=d["path"],
            true_label=d["true_label"],
            target_label=d["target_label"],
            mode=d.get("mode"),
            pre_attack_success=bool(d["pre_attack_success"]),
            stage1=StageMetrics(**d["stage1"]),
            stage2=StageMetrics(**d["stage2"]),
            stage1_trace=StageTrace.from_dict(d["stage1_trace"]),
            stage2_trace=StageTrace.from_dict(d["stage2_trace"]),
            error=d.get("error"),
        )


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _finite_or_none(value):
    # JSON has no infinities; an all-zero perturbation has infinite SNR
    if isinstance(value, float) and not np.isfinite(value):
        return "inf" if value > 0 else "-inf"
    return value


def dump_result(result: AttackResult, path) -> None:
    d = result.to_dict()
    for stage in ("stage1", "stage2", "final_metrics"):
        d[stage] = {k: _finite_or_none(v) for k, v in d[stage].items()}
    Path(path).write_text(json.dumps(d, indent=1, default=_json_default, sort_keys=True), encoding="utf-8")


def load_result(path) -> AttackResult:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    for stage in ("stage1", "stage2"):
        d[stage] = {k: (float(v) if v in ("inf", "-inf") else v) for k, v in d[stage].items()}
    return AttackResult.from_dict(d)


UTTERANCE_CSV_HEADER = ("path", "target", "mode", "stage", "success", "snr_db", "exceedance", "iterations")


def write_utterance_csv(results: Iterable[AttackResult], path) -> None:
    """One row per (utterance, stage); doubles as SNR-vs-stage scatter data."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(UTTERANCE_CSV_HEADER)
        for r in results:
            for stage, m in (("stage1", r.stage1), ("stage2", r.stage2)):
                writer.writerow(
                    [r.path, r.target_label, r.mode or "", stage, int(m.success),
                     f"{m.snr_db:.6f}", f"{m.exceedance:.6f}", m.iterations]
                )
