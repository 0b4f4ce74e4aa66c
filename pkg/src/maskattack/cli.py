"""Command-line workflow: make-corpus, train, threshold, attack, evaluate.

Exit codes: 0 success, 1 runtime error, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ._validation import ValidationError
from .attack import attack_utterance
from .audio_io import (
    ManifestError, WavFormatError, dump_result, load_manifest, load_result, read_wav, write_utterance_csv,
    write_wav,
)
from .config import ConfigError, RunConfig, resolve_config
from .diffnet.model import Checkpoint, CheckpointError
from .diffnet.training import XVectorClassifier
from .dsp import normalize_spl, psd, psd_to_csv, stft
from .metrics import summarize, write_stage_table_csv, write_summary_csv, write_summary_json
from .psycho import ath, masking_threshold

log = logging.getLogger("maskattack")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


# -- helpers -----------------------------------------------------------------


def _setup_logging(level: str, logfile: Path | None = None) -> None:
    root = logging.getLogger()
    for h in list(root.handlers):
        root.removeHandler(h)
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    handlers = [logging.StreamHandler(sys.stderr)]
    if logfile is not None:
        handlers.append(logging.FileHandler(logfile, encoding="utf-8"))
    for h in handlers:
        h.setFormatter(fmt)
        root.addHandler(h)
    root.setLevel(getattr(logging, level.upper()))


def _overrides(args: argparse.Namespace) -> dict:
    return {k: v for k, v in vars(args).items() if v is not None}


def _load(path, loader, field: str, **kw):
    try:
        return loader(path, **kw)
    except FileNotFoundError:
        raise ConfigError(f"{field}: file not found: {path}") from None


def _write_json(path: Path, data) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(data, indent=1, sort_keys=True), encoding="utf-8")
    os.replace(tmp, path)


# -- make-corpus -------------------------------------------------------------


def cmd_make_corpus(args) -> int:
    from .corpus import write_corpus

    out = Path(args.out)
    manifest = write_corpus(out, args.speakers, args.utterances, args.attack, args.music,
                            args.duration, args.seed)
    log.info("wrote %d training utterances to %s", len(manifest), out)
    return EXIT_OK


# -- train -------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, _overrides(args))
    cfg.require_existing("manifest")
    out = args.out or cfg.checkpoint
    if not out:
        raise ConfigError("out: required but not set (checkpoint path to write)")
    manifest = load_manifest(cfg.manifest, require_target=False)
    if not len(manifest):
        raise ManifestError(f"{cfg.manifest}: no entries")
    unlabelled = [e.path for e in manifest if e.true_label is None]
    if unlabelled:
        raise ManifestError(f"training manifest entry without a speaker: {unlabelled[0]}")
    waves = [read_wav(manifest.resolve(e)).samples for e in manifest]
    labels = [e.true_label for e in manifest]
    est = XVectorClassifier(
        hidden_dim=cfg.model.hidden_dim, pooling_dim=cfg.model.pooling_dim, fc_dims=cfg.model.fc_dims,
        n_mfcc=cfg.model.n_mfcc, epochs=cfg.train.epochs, batch_size=cfg.train.batch_size,
        learning_rate=cfg.train.learning_rate, seed=cfg.seed,
    )
    est.fit(waves, labels)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    est.save(out)
    _write_json(out.with_name(out.name + ".log.json"), {
        "config": cfg.to_dict(), "history": est.history_, "train_accuracy": est.train_accuracy_,
        "n_utterances": len(labels), "labels": list(est.classes_),
    })
    log.info("training accuracy %.4f, checkpoint %s", est.train_accuracy_, out)
    print(f"train_accuracy {est.train_accuracy_:.4f}")
    return EXIT_OK


# -- threshold ---------------------------------------------------------------


def cmd_threshold(args) -> int:
    cfg = resolve_config(args.config, _overrides(args))
    wav = _load(args.audio, read_wav, "audio")
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    th = masking_threshold(wav, cfg.stft)
    psd_to_csv(th.values, out / "threshold.csv")
    raw = psd(stft(wav, cfg.stft), cfg.stft)
    # silence has nothing to normalize; dump it on the offset-0 scale the threshold used
    p = normalize_spl(raw).values if np.isfinite(raw.values).any() else raw.values
    psd_to_csv(np.maximum(p, -1e9), out / "psd.csv")
    with open(out / "maskers.csv", "w", encoding="utf-8") as fh:
        fh.write("frame,bin,freq_hz,bark,spl_db\n")
        freqs = cfg.stft.bin_frequencies()
        for t, frame in enumerate(th.maskers):
            for m in frame:
                fh.write(f"{t},{m.bin_index},{freqs[m.bin_index]:.3f},{m.bark:.6f},{m.spl:.6f}\n")
    if args.ath:
        freqs = cfg.stft.bin_frequencies()
        with open(out / "ath.csv", "w", encoding="utf-8") as fh:
            fh.write("bin,freq_hz,ath_db\n")
            for k, f in enumerate(freqs):
                fh.write(f"{k},{f:.3f},{float(ath(f)):.6f}\n")
    print(f"{th.values.shape[0]} frames x {th.values.shape[1]} bins, offset {th.normalization_offset:.6f} dB")
    return EXIT_OK


# -- attack ------------------------------------------------------------------

_WORKER_MODEL: Checkpoint | None = None


def _init_worker(checkpoint_path: str, level: int) -> None:
    global _WORKER_MODEL
    _WORKER_MODEL = Checkpoint.load(checkpoint_path)
    logging.getLogger().setLevel(level)


def result_key(entry) -> str:
    return f"{Path(entry.path).stem}__to_{entry.target_label}"


def _attack_job(job: dict) -> tuple[str, str | None]:
    """Attack one utterance and write its outputs; returns (key, error message)."""
    key, run = job["key"], Path(job["run_dir"])
    err_path = run / "errors" / f"{key}.json"
    try:
        from .attack import Stage1Config, Stage2Config
        from .dsp import StftConfig

        wav = read_wav(job["wav"])
        result = attack_utterance(
            _WORKER_MODEL, wav.samples, job["target"], Stage1Config(**job["stage1"]),
            Stage2Config(**job["stage2"]), StftConfig(**job["stft"]),
            path=job["path"], true_label=job["true_label"], mode=job["mode"],
        )
        write_wav(result.stage1_adversarial, run / "adv" / f"{key}.stage1.adv.wav")
        write_wav(result.adversarial, run / "adv" / f"{key}.adv.wav")
        tmp = run / "results" / f"{key}.json.tmp"
        dump_result(result, tmp)
        os.replace(tmp, run / "results" / f"{key}.json")
        if err_path.exists():
            err_path.unlink()
        return key, None
    except Exception as exc:  # noqa: BLE001 - one bad utterance must not stop the batch
        msg = f"{type(exc).__name__}: {exc}"
        _write_json(err_path, {"key": key, "path": job["path"], "target_label": job["target"],
                               "mode": job["mode"], "error": msg})
        return key, msg


def cmd_attack(args) -> int:
    cfg = resolve_config(args.config, _overrides(args))
    cfg.require_existing("manifest", "checkpoint")
    cfg.require("out")
    if cfg.workers < 1:
        raise ConfigError("workers: must be >= 1")
    manifest = load_manifest(cfg.manifest)
    if not len(manifest):
        raise ManifestError(f"{cfg.manifest}: no entries")
    model = _load(cfg.checkpoint, Checkpoint.load, "checkpoint")
    manifest.validate_labels(model.labels)
    keys = [result_key(e) for e in manifest]
    dupes = sorted({k for k in keys if keys.count(k) > 1})
    if dupes:
        raise ManifestError(f"duplicate manifest entry (same file stem and target): {dupes[0]}")

    run = Path(cfg.out)
    for sub in ("results", "adv", "errors"):
        (run / sub).mkdir(parents=True, exist_ok=True)
    _setup_logging(args.log_level, run / "attack.log")
    _write_json(run / "config.json", cfg.to_dict())

    pending = []
    for key, entry in zip(keys, manifest):
        if (run / "results" / f"{key}.json").exists():
            continue
        pending.append({
            "key": key, "run_dir": str(run), "wav": str(manifest.resolve(entry)), "path": entry.path,
            "target": entry.target_label, "true_label": entry.true_label, "mode": entry.mode,
            "stage1": asdict(cfg.stage1), "stage2": asdict(cfg.stage2), "stft": asdict(cfg.stft),
        })
    log.info("%d entries, %d already done, %d to attack", len(keys), len(keys) - len(pending), len(pending))

    level = logging.getLogger().level
    if cfg.workers == 1 or len(pending) <= 1:
        _init_worker(cfg.checkpoint, level)
        outcomes = map(_attack_job, pending)
        _drain(outcomes, len(pending))
    else:
        with ProcessPoolExecutor(cfg.workers, initializer=_init_worker,
                                 initargs=(cfg.checkpoint, level)) as pool:
            _drain(pool.map(_attack_job, pending), len(pending))

    summary = _write_summaries(run, run, keys)
    return EXIT_OK if summary.n_errors == 0 else EXIT_RUNTIME


def _drain(outcomes, total: int) -> None:
    for i, (key, err) in enumerate(outcomes, 1):
        if err is None:
            log.info("[%d/%d] %s done", i, total, key)
        else:
            log.error("[%d/%d] %s failed: %s", i, total, key, err)


def _collect(run: Path, keys: list[str] | None = None):
    """Load result JSONs (optionally restricted to ``keys``) and per-mode error counts."""
    results_dir = run / "results" if (run / "results").is_dir() else run
    paths = sorted(results_dir.glob("*.json"))
    if keys is not None:
        wanted = set(keys)
        paths = [p for p in paths if p.stem in wanted]
    results = []
    for p in paths:
        try:
            results.append(load_result(p))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise RuntimeError(f"malformed result file {p}: {exc}") from None
    errors: dict[str, int] = {}
    err_dir = run / "errors"
    if err_dir.is_dir():
        for p in sorted(err_dir.glob("*.json")):
            if keys is not None and p.stem not in set(keys):
                continue
            try:
                mode = json.loads(p.read_text(encoding="utf-8")).get("mode")
            except json.JSONDecodeError:
                raise RuntimeError(f"malformed error file {p}") from None
            errors[mode or "all"] = errors.get(mode or "all", 0) + 1
    results.sort(key=lambda r: (r.mode or "", r.path, r.target_label))
    return results, errors


def _write_summaries(run: Path, out: Path, keys=None):
    results, errors = _collect(run, keys)
    if not results and not errors:
        raise RuntimeError(f"{run}: no result files found")
    summary = summarize(results, errors)
    out.mkdir(parents=True, exist_ok=True)
    write_summary_csv(summary, out / "summary.csv")
    write_stage_table_csv(summary, out / "table.csv")
    write_summary_json(summary, out / "summary.json")
    write_utterance_csv(results, out / "utterances.csv")
    for row in summary.rows:
        log.info("%s %s: %d/%d success", row.mode, row.stage, row.n_success, row.n)
    print((out / "summary.csv").read_text(encoding="utf-8"), end="")
    if summary.n_errors:
        log.error("%d utterance(s) failed; see %s", summary.n_errors, run / "errors")
    return summary


# -- evaluate ----------------------------------------------------------------


def cmd_evaluate(args) -> int:
    run = Path(args.results)
    if not run.is_dir():
        raise ConfigError(f"results: directory not found: {run}")
    _write_summaries(run, Path(args.out) if args.out else run)
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out")


def _attack_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--eps0", type=float)
    p.add_argument("--lr1", type=float)
    p.add_argument("--lr2", type=float)
    p.add_argument("--alpha0", type=float)
    p.add_argument("--stage1-steps", type=int)
    p.add_argument("--stage2-steps", type=int)
    p.add_argument("--stage1-optimizer", choices=("sign", "adam"))
    p.add_argument("--stage2-optimizer", choices=("adam", "sgd"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskattack", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-corpus", help="render a synthetic desk corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--speakers", type=int, default=10)
    p.add_argument("--utterances", type=int, default=50, help="training utterances per speaker")
    p.add_argument("--attack", type=int, default=0, help="held-out utterances with wrong targets")
    p.add_argument("--music", type=int, default=0, help="non-speech clips with targets")
    p.add_argument("--duration", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_corpus)

    p = sub.add_parser("train", help="train the speaker classifier")
    _common(p)
    p.add_argument("--manifest")
    p.add_argument("--epochs", type=int)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--pooling-dim", type=int)
    p.add_argument("--fc-dims", type=lambda s: tuple(int(v) for v in s.split(",")))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("threshold", help="dump masking threshold, PSD and maskers of a WAV")
    p.add_argument("audio")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--ath", action="store_true", help="also write the absolute threshold curve")
    p.set_defaults(func=cmd_threshold)

    p = sub.add_parser("attack", help="run the two-stage attack over a manifest")
    _common(p)
    _attack_flags(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", help="summarize a results directory")
    p.add_argument("results")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _setup_logging(args.log_level)
    try:
        return args.func(args)
    except (ValidationError, ManifestError, WavFormatError, CheckpointError) as exc:
        print(f"maskattack: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RuntimeError, OSError) as exc:
        print(f"maskattack: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
