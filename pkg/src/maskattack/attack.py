"""Two-stage targeted attack with a frequency-masking constraint.

Stage 1 runs l-inf bounded sign-gradient descent on the cross-entropy toward
the target speaker, shrinking the bound by ``eps_decay`` after every
successful iterate. Stage 2 refines that perturbation by descending on
``CE + alpha * L_TH`` where ``L_TH`` is the mean hinge of the perturbation's
PSD over the original's masking threshold; ``alpha`` grows on success and
shrinks on failure.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import ValidationError, check_same_length, check_signal
from .audio_io import AttackResult, StageMetrics, StageTrace, Waveform
from .diffnet import tape as T
from .diffnet.model import Checkpoint, forward, grad_wrt_input, logits
from .diffnet.optim import Adam
from .dsp import POWER_FLOOR, StftConfig
from .metrics import exceedance, snr_db
from .psycho import MaskingThreshold, masking_threshold

log = logging.getLogger(__name__)

_DB_PER_NEPER = 10.0 / np.log(10.0)


@dataclass(frozen=True)
class Stage1Config:
    lr: float = 100.0
    steps: int = 3000
    eps0: float = 2000.0
    eps_decay: float = 0.8
    optimizer: str = "sign"  # "sign": raw clipped sign step; "adam": Adam fed the sign

    def __post_init__(self):
        if self.lr <= 0 or self.eps0 <= 0 or self.steps < 0:
            raise ValidationError("stage 1 lr and eps0 must be positive, steps non-negative")
        if not 0 < self.eps_decay < 1:
            raise ValidationError("eps_decay must lie in (0, 1)")
        if self.optimizer not in ("sign", "adam"):
            raise ValidationError(f"unknown stage 1 optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class Stage2Config:
    lr: float = 1.0
    steps: int = 1000
    alpha0: float = 0.05
    alpha_up: float = 1.2
    alpha_down: float = 0.8
    optimizer: str = "adam"  # "adam" or "sgd" (the raw gradient step)

    def __post_init__(self):
        if self.lr <= 0 or self.alpha0 < 0 or self.steps < 0:
            raise ValidationError("stage 2 lr must be positive, alpha0 and steps non-negative")
        if self.alpha_up <= 0 or self.alpha_down <= 0:
            raise ValidationError("alpha multipliers must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValidationError(f"unknown stage 2 optimizer {self.optimizer!r}")


class AttackAborted(RuntimeError):
    """A stage hit a non-finite loss; ``trace`` holds the iterations so far."""

    def __init__(self, message: str, trace: StageTrace):
        super().__init__(message)
        self.trace = trace


def threshold_loss(x, delta, threshold: MaskingThreshold) -> T.Tensor:
    """Mean over frames and bins of max(PSD_delta - T_G, 0), differentiable in ``delta``.

    The perturbation PSD is shifted by the original's normalization offset,
    so the loss measures the perturbation against the original's level.
    """
    xv = np.asarray(getattr(x, "samples", x), dtype=np.float64)
    dv = T._val(delta)
    check_same_length(xv, dv)
    cfg = threshold.config
    n = cfg.window_length
    frames = T.frame(delta, n, cfg.hop_length)
    if frames.shape[0] != threshold.n_frames:
        raise ValidationError(
            f"perturbation has {frames.shape[0]} frames, threshold has {threshold.n_frames}"
        )
    power = T.power_spectrum(T.mul(frames, cfg.window_array()), n)
    level = T.mul(T.log(T.mul(power, 1.0 / n**2), floor=POWER_FLOOR), _DB_PER_NEPER)
    excess = T.sub(T.add(level, threshold.normalization_offset), threshold.values)
    return T.mean(T.relu(excess))


def _is_success(probs: np.ndarray, target: int) -> bool:
    return int(np.argmax(probs)) == target


def stage1(model: Checkpoint, x, target: int, cfg: Stage1Config = Stage1Config()):
    """Returns (delta, trace, success).

    ``delta`` is the last successful iterate, or the final iterate when no
    iterate succeeded. Each trace record's ``bound`` is the eps that clipped
    that iteration's update, so ``linf <= bound`` holds record by record.
    """
    x = check_signal(x, name="original")
    delta = np.zeros_like(x)
    eps = float(cfg.eps0)
    best = None
    trace = StageTrace(stage=1)
    opt = Adam(cfg.lr) if cfg.optimizer == "adam" else None
    for i in range(cfg.steps):
        try:
            loss, grad, probs = grad_wrt_input(model, x + delta, target)
        except T.NonFiniteError as exc:
            raise AttackAborted(f"stage 1: {exc} at iteration {i}", trace) from exc
        success = _is_success(probs, target)
        if success:
            best = delta.copy()
            eps *= cfg.eps_decay
        if opt is None:
            delta = delta - cfg.lr * np.sign(grad)
        else:
            state = {"delta": delta}
            opt.step(state, {"delta": np.sign(grad)})
            delta = state["delta"]
        delta = np.clip(delta, -eps, eps)
        trace.append(i, loss, loss, 0.0, eps, success, np.abs(delta).max())
    if _is_success(forward(model, x + delta).value, target):
        best = delta.copy()
        trace.notes.append("final iterate successful")
    if best is None:
        trace.notes.append("no successful iterate")
        return delta, trace, False
    return best, trace, True


def _combined_loss(model, x, delta, target, threshold, alpha):
    with T.Tape() as tape:
        d = T.Tensor(delta, requires_grad=True)
        z = logits(model, T.add(x, d))
        ce = T.softmax_cross_entropy(z, target)
        th = threshold_loss(x, d, threshold)
        loss = T.add(ce, T.mul(th, alpha))
    (grad,) = tape.gradient(loss, [d])
    return float(loss.value), float(ce.value), float(th.value), grad, z.value


def combined_loss(model: Checkpoint, x, delta, target: int, threshold: MaskingThreshold, alpha: float):
    """(loss, ce, th, gradient w.r.t. delta, logits) of CE + alpha * L_TH."""
    x = check_signal(x, name="original")
    delta = check_signal(delta, name="perturbation")
    return _combined_loss(model, x, delta, target, threshold, alpha)


def stage2(model: Checkpoint, x, delta0, target: int, threshold: MaskingThreshold,
           cfg: Stage2Config = Stage2Config(), *, stage1_succeeded: bool = True):
    """Returns (delta, trace, success).

    ``delta`` is the successful iterate with the lowest threshold loss, or
    the final iterate when none succeeded. Record ``i`` stores the alpha used
    at iteration ``i``; the next alpha is alpha * alpha_up on success and
    alpha * alpha_down otherwise.
    """
    x = check_signal(x, name="original")
    delta = check_signal(delta0, name="perturbation").copy()
    check_same_length(x, delta)
    trace = StageTrace(stage=2)
    if not stage1_succeeded:
        trace.notes.append("started from an unsuccessful stage 1 perturbation")
    alpha = float(cfg.alpha0)
    opt = Adam(cfg.lr) if cfg.optimizer == "adam" else None
    state = {"delta": delta}
    best, best_th = None, np.inf
    for i in range(cfg.steps):
        try:
            loss, ce, th, grad, scores = _combined_loss(model, x, delta, target, threshold, alpha)
        except T.NonFiniteError as exc:
            raise AttackAborted(f"stage 2: {exc} at iteration {i}", trace) from exc
        success = _is_success(scores, target)
        if success and th < best_th:
            best, best_th = delta.copy(), th
        trace.append(i, loss, ce, th, alpha, success, np.abs(delta).max())
        if opt is not None:
            opt.step(state, {"delta": grad})
            delta = state["delta"]
        else:
            delta = delta - cfg.lr * grad
            state["delta"] = delta
        alpha *= cfg.alpha_up if success else cfg.alpha_down
    probs = forward(model, x + delta).value
    if _is_success(probs, target):
        th = float(threshold_loss(x, delta, threshold).value)
        if th < best_th:
            best, best_th = delta.copy(), th
            trace.notes.append("final iterate selected")
    if best is None:
        return delta, trace, False
    return best, trace, True


def _stage_metrics(model, x, delta, target, threshold, iterations) -> StageMetrics:
    success = _is_success(forward(model, x + delta).value, target)
    exc = exceedance(x, delta, threshold)
    return StageMetrics(
        success=success, snr_db=snr_db(x, delta) if np.any(x) else float("nan"),
        exceedance=exc.fraction, exceedance_margin_db=exc.margin_db,
        linf=float(np.abs(delta).max()), iterations=iterations,
    )


def attack_utterance(model: Checkpoint, x, target, cfg1: Stage1Config = Stage1Config(),
                     cfg2: Stage2Config = Stage2Config(), stft_cfg: StftConfig | None = None, *,
                     path: str = "", true_label: str | None = None, mode: str | None = None) -> AttackResult:
    """Full pipeline for one original: threshold, stage 1, stage 2, metrics.

    ``target`` is a speaker id from the model's label table or a class index.
    """
    stft_cfg = stft_cfg or StftConfig()
    x = check_signal(x, min_length=max(stft_cfg.window_length, model.config.min_samples()), name="original")
    target_idx = model.label_index(target) if isinstance(target, str) else int(target)
    target_label = model.labels[target_idx]
    if true_label is not None and true_label == target_label:
        raise ValidationError(f"target equals true label ({target_label})")
    threshold = masking_threshold(x, stft_cfg)
    pre = _is_success(forward(model, x).value, target_idx)

    d1, tr1, ok1 = stage1(model, x, target_idx, cfg1)
    d2, tr2, _ = stage2(model, x, d1, target_idx, threshold, cfg2, stage1_succeeded=ok1)
    m1 = _stage_metrics(model, x, d1, target_idx, threshold, len(tr1))
    m2 = _stage_metrics(model, x, d2, target_idx, threshold, len(tr2))
    log.info("%s -> %s: stage1 %s (snr %.1f dB), stage2 %s (snr %.1f dB, exceedance %.3f)",
             path or "<array>", target_label, m1.success, m1.snr_db, m2.success, m2.snr_db, m2.exceedance)
    return AttackResult(
        path=path, true_label=true_label, target_label=target_label, mode=mode,
        pre_attack_success=pre, stage1=m1, stage2=m2, stage1_trace=tr1, stage2_trace=tr2,
        adversarial=Waveform(x + d2), stage1_adversarial=Waveform(x + d1),
    )


class MaskingAttack(BaseEstimator):
    """sklearn-style front end to the two-stage attack.

    ``estimator`` is a fitted ``XVectorClassifier`` or a ``Checkpoint``.
    """

    def __init__(self, estimator=None, lr1=100.0, stage1_steps=3000, eps0=2000.0, eps_decay=0.8,
                 lr2=1.0, stage2_steps=1000, alpha0=0.05, alpha_up=1.2, alpha_down=0.8,
                 stage2_optimizer="adam", window_length=2048, hop_length=512):
        self.estimator = estimator
        self.lr1 = lr1
        self.stage1_steps = stage1_steps
        self.eps0 = eps0
        self.eps_decay = eps_decay
        self.lr2 = lr2
        self.stage2_steps = stage2_steps
        self.alpha0 = alpha0
        self.alpha_up = alpha_up
        self.alpha_down = alpha_down
        self.stage2_optimizer = stage2_optimizer
        self.window_length = window_length
        self.hop_length = hop_length

    def _model(self) -> Checkpoint:
        model = getattr(self.estimator, "checkpoint_", self.estimator)
        if not isinstance(model, Checkpoint):
            raise ValidationError("estimator must be a fitted XVectorClassifier or a Checkpoint")
        return model

    def configs(self) -> tuple[Stage1Config, Stage2Config, StftConfig]:
        return (
            Stage1Config(self.lr1, self.stage1_steps, self.eps0, self.eps_decay),
            Stage2Config(self.lr2, self.stage2_steps, self.alpha0, self.alpha_up, self.alpha_down,
                         self.stage2_optimizer),
            StftConfig(self.window_length, self.hop_length),
        )

    def attack(self, x, target, **kwargs) -> AttackResult:
        cfg1, cfg2, stft_cfg = self.configs()
        return attack_utterance(self._model(), x, target, cfg1, cfg2, stft_cfg, **kwargs)

    def generate(self, X, targets) -> list[np.ndarray]:
        """Stage 2 adversarial waveforms, one per (original, target) pair."""
        if len(X) != len(targets):
            raise ValidationError(f"{len(X)} originals but {len(targets)} targets")
        return [self.attack(x, t).adversarial.samples for x, t in zip(X, targets)]
