"""Acceptance gate: one PASS/FAIL line per criterion.

The desk experiment trains the x-vector-shaped classifier on a synthetic
10-speaker corpus and runs both attack stages at full step counts through
the CLI, so the module takes roughly half an hour on one CPU core.
"""

import csv
import json
import time

import numpy as np
import pytest

from maskattack.attack import combined_loss
from maskattack.audio_io import CorpusManifest, ManifestEntry, load_manifest, load_result, read_wav, save_manifest
from maskattack.cli import main
from maskattack.diffnet import tape as T
from maskattack.diffnet.frontend import mfcc
from maskattack.diffnet.model import Checkpoint, grad_wrt_input, init_parameters, logits, network, predict_index
from maskattack.psycho import masking_threshold

from oracles import central_difference, ref_global_threshold, relative_error

pytestmark = pytest.mark.slow

DESK_MODEL = ["--hidden-dim", "128", "--pooling-dim", "256", "--fc-dims", "128,128", "--epochs", "15"]


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} :: {detail}")
        assert ok, detail

    return emit


# -- 1: threshold oracle ---------------------------------------------------


def _random_signal(seed):
    r = np.random.default_rng(seed)
    t = np.arange(16000) / 16000
    x = r.standard_normal(16000) * 10 ** r.uniform(1, 3.5)
    for _ in range(r.integers(1, 6)):
        x += r.uniform(100, 10000) * np.sin(2 * np.pi * r.uniform(50, 7900) * t + r.uniform(0, 6.3))
    return x * np.hanning(16000) ** r.uniform(0, 1)


def test_criterion_1_threshold_oracle_equivalence(report):
    start = time.perf_counter()
    worst, masker_match = 0.0, True
    for seed in range(10):
        x = _random_signal(seed)
        th = masking_threshold(x)
        ref, ref_maskers, _ = ref_global_threshold(x)
        worst = max(worst, float(np.abs(th.values - ref).max()))
        masker_match &= [[m.bin_index for m in f] for f in th.maskers] == [[k for k, _, _ in f] for f in ref_maskers]
    elapsed = time.perf_counter() - start
    report(1, "threshold oracle equivalence", worst <= 1e-6 and masker_match and elapsed < 60,
           f"max |T - T_ref| = {worst:.3e} dB (<= 1e-6), maskers identical: {masker_match}, {elapsed:.1f} s")


# -- 2: gradient suite -----------------------------------------------------


def test_criterion_2_gradient_suite(report, untrained_model, trained_model, tiny_corpus, tiny_config):
    start = time.perf_counter()
    r = np.random.default_rng(2024)
    errors = {}

    # frontend
    x = r.standard_normal(3200) * 1000
    w = r.standard_normal(mfcc(x).shape)
    with T.Tape() as tape:
        xt = T.Tensor(x, requires_grad=True)
        loss = T.sum_(T.mul(mfcc(xt), w))
    (g,) = tape.gradient(loss, [xt])
    coords = r.choice(x.size, 100, replace=False)
    num = central_difference(lambda v: float((mfcc(v).value * w).sum()), x, coords, 1.0)
    errors["frontend"] = relative_error(num, g[coords], floor=1e-8)

    # network, input side
    x = r.standard_normal(4000) * 2000

    def ce(v):
        return float(T.softmax_cross_entropy(logits(untrained_model, v), 1).value)

    _, g, _ = grad_wrt_input(untrained_model, x, 1)
    coords = r.choice(x.size, 100, replace=False)
    errors["network/input"] = relative_error(central_difference(ce, x, coords, 1.0), g[coords], floor=1e-9)

    # network, parameter side (training mode)
    params = {k: v.astype(np.float64) for k, v in init_parameters(tiny_config, seed=1).items()}
    feats = r.standard_normal((3, 20, 30))
    y = np.array([0, 2, 1])
    names = ["tdnn0.weight", "tdnn2.bias", "tdnn4.bn.gamma", "fc0.weight", "output.weight"]

    def loss_of(name, value):
        p = {k: (v.copy() if "running" in k else v) for k, v in params.items()}
        p[name] = value
        return float(T.softmax_cross_entropy(network(tiny_config, p, feats, training=True), y).value)

    with T.Tape() as tape:
        ps = {k: (T.Tensor(v, requires_grad=True) if k in names else v.copy()) for k, v in params.items()}
        loss = T.softmax_cross_entropy(network(tiny_config, ps, feats, training=True), y)
    grads = tape.gradient(loss, [ps[n] for n in names])
    errs = []
    for name, g in zip(names, grads):
        coords = r.choice(g.size, min(10, g.size), replace=False)
        num = central_difference(lambda v, name=name: loss_of(name, v), params[name], coords, 1e-5)
        errs.append(relative_error(num, g.reshape(-1)[coords], floor=1e-7))
    errors["network/params"] = np.concatenate(errs)

    # combined attack loss
    utt = tiny_corpus.waves[0]
    th = masking_threshold(utt)
    delta = r.standard_normal(utt.size) * 300
    _, _, _, g, _ = combined_loss(trained_model, utt, delta, 2, th, 0.5)
    coords = r.choice(utt.size, 100, replace=False)
    num = central_difference(lambda d: combined_loss(trained_model, utt, d, 2, th, 0.5)[0], delta, coords, 1e-2)
    errors["combined loss"] = relative_error(num, g[coords], floor=1e-9)

    elapsed = time.perf_counter() - start
    total = sum(e.size for e in errors.values())
    worst = max(float(e.max()) for e in errors.values())
    parts = ", ".join(f"{k} {e.size} @ {e.max():.1e}" for k, e in errors.items())
    report(2, "gradient suite", worst < 1e-3 and total >= 300 and elapsed < 300,
           f"{total} coordinates, max rel err {worst:.2e} (< 1e-3) [{parts}], {elapsed:.1f} s")


# -- desk experiment -------------------------------------------------------


def _wrong_targets(manifest: CorpusManifest, model: Checkpoint, seed: int) -> CorpusManifest:
    """Retarget unlabelled clips to a speaker the model does not already predict."""
    r = np.random.default_rng(seed)
    n = len(model.labels)
    entries = []
    for e in manifest:
        pred = predict_index(model, read_wav(manifest.resolve(e)).samples)
        target = model.labels[(pred + 1 + int(r.integers(n - 1))) % n]
        entries.append(ManifestEntry(e.path, e.true_label, target, e.mode))
    return CorpusManifest(entries, manifest.root)


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    corpus = root / "corpus"
    start = time.perf_counter()
    assert main(["make-corpus", "--out", str(corpus), "--speakers", "10", "--utterances", "50",
                 "--attack", "50", "--music", "20", "--seed", "0"]) == 0
    ckpt = root / "desk.ckpt"
    assert main(["train", "--manifest", str(corpus / "train.csv"), "--out", str(ckpt), "--seed", "0",
                 *DESK_MODEL]) == 0
    model = Checkpoint.load(ckpt)
    save_manifest(_wrong_targets(load_manifest(corpus / "music.csv"), model, seed=0), corpus / "music_wrong.csv")

    runs = {}
    for name, manifest in (("speech", "attack.csv"), ("music", "music_wrong.csv")):
        runs[name] = root / name
        main(["attack", "--manifest", str(corpus / manifest), "--checkpoint", str(ckpt),
              "--out", str(runs[name]), "--seed", "0"])
    log = json.loads(ckpt.with_name(ckpt.name + ".log.json").read_text())
    results = {k: [load_result(p) for p in sorted((v / "results").glob("*.json"))] for k, v in runs.items()}
    errors = {k: sorted(p.name for p in (v / "errors").glob("*.json")) for k, v in runs.items()}
    return dict(root=root, corpus=corpus, ckpt=ckpt, log=log, results=results, errors=errors, runs=runs,
                minutes=(time.perf_counter() - start) / 60)


def _rates(results):
    n = len(results)
    return (sum(r.pre_attack_success for r in results) / n, sum(r.stage1.success for r in results) / n,
            sum(r.stage2.success for r in results) / n)


def test_criterion_3_desk_attack(report, desk):
    res = desk["results"]["speech"]
    acc = desk["log"]["train_accuracy"]
    before, s1, s2 = _rates(res)
    ok = (acc >= 0.95 and len(res) == 50 and not desk["errors"]["speech"] and before == 0.0
          and s1 >= 0.6 and s2 >= 0.9 and s2 >= s1 and desk["minutes"] <= 120)
    report(3, "desk-scale attack", ok,
           f"train acc {acc:.3f} (>= 0.95), N={len(res)}, errors {len(desk['errors']['speech'])}, "
           f"pre-attack {before:.2f} (== 0), stage1 {s1:.2f} (>= 0.60), stage2 {s2:.2f} (>= 0.90, >= stage1), "
           f"fixture {desk['minutes']:.1f} min")


def test_criterion_4_inaudibility_direction(report, desk):
    res = desk["results"]["speech"]
    e1 = float(np.mean([r.stage1.exceedance for r in res]))
    e2 = float(np.mean([r.stage2.exceedance for r in res]))
    snr1 = float(np.mean([r.stage1.snr_db for r in res if np.isfinite(r.stage1.snr_db)]))
    snr2 = float(np.mean([r.stage2.snr_db for r in res if np.isfinite(r.stage2.snr_db)]))
    report(4, "stage 2 exceedance below stage 1", e2 < e1,
           f"mean exceedance stage1 {e1:.4f} > stage2 {e2:.4f}; mean SNR stage1 {snr1:.2f} dB, stage2 {snr2:.2f} dB")


def test_criterion_5_non_speech(report, desk):
    res = desk["results"]["music"]
    before, s1, s2 = _rates(res)
    ok = len(res) == 20 and not desk["errors"]["music"] and before == 0.0 and s2 >= 0.8
    report(5, "non-speech attack", ok,
           f"N={len(res)}, true label none for all: {all(r.true_label is None for r in res)}, "
           f"pre-attack {before:.2f} (== 0), stage1 {s1:.2f}, stage2 {s2:.2f} (>= 0.80)")


def _stage1_ok(trace, eps0, decay):
    eps = eps0
    for bound, ok, linf in zip(trace.bound, trace.success, trace.linf):
        if ok:
            eps *= decay
        if bound != eps or linf > bound:
            return False
    return all(b <= a for a, b in zip(trace.bound, trace.bound[1:]))


def _stage2_ok(trace, alpha0, up, down):
    alpha = alpha0
    for bound, ok in zip(trace.bound, trace.success):
        if bound != alpha:
            return False
        alpha *= up if ok else down
    return True


def test_criterion_6_trace_invariants(report, desk):
    results = desk["results"]["speech"] + desk["results"]["music"]
    cfg = json.loads((desk["runs"]["speech"] / "config.json").read_text())
    s1, s2 = cfg["stage1"], cfg["stage2"]
    bad1 = [r.path for r in results if not _stage1_ok(r.stage1_trace, s1["eps0"], s1["eps_decay"])]
    bad2 = [r.path for r in results
            if not _stage2_ok(r.stage2_trace, s2["alpha0"], s2["alpha_up"], s2["alpha_down"])]
    iters = sum(len(r.stage1_trace) + len(r.stage2_trace) for r in results)
    report(6, "schedule and projection invariants", not bad1 and not bad2 and len(results) == 70,
           f"{len(results)} traces, {iters} iterations; stage1 violations {bad1[:3]}, stage2 violations {bad2[:3]}")


def test_criterion_7_determinism(report, desk):
    corpus, ckpt, root = desk["corpus"], desk["ckpt"], desk["root"]
    subset = CorpusManifest(list(load_manifest(corpus / "attack.csv"))[:8], corpus)
    save_manifest(subset, corpus / "subset.csv")
    outs = []
    for name in ("rerun_a", "rerun_b"):
        main(["attack", "--manifest", str(corpus / "subset.csv"), "--checkpoint", str(ckpt), "--out",
              str(root / name), "--seed", "0", "--stage1-steps", "300", "--stage2-steps", "100"])
        outs.append(root / name)
    same = {f: (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
            for f in ("summary.csv", "table.csv", "utterances.csv")}
    rows = list(csv.reader(open(outs[0] / "summary.csv", encoding="utf-8")))
    report(7, "byte-identical summaries", all(same.values()) and len(rows) > 1,
           f"two runs on {len(subset)} utterances: " + ", ".join(f"{k} {'identical' if v else 'DIFFER'}"
                                                                for k, v in same.items()))

