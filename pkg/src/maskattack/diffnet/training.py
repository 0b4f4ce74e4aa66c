"""Training loop and the sklearn-compatible classifier wrapper."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .._validation import ValidationError, check_signals
from . import tape as T
from .frontend import FrontendConfig, mfcc
from .model import Checkpoint, ModelConfig, forward, init_parameters, is_buffer, network
from .optim import Adam

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, iteration: int, op: str):
        super().__init__(f"training diverged at iteration {iteration} (non-finite value in '{op}')")
        self.iteration = iteration
        self.op = op


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    zero_init_output: bool = False
    final_lr_fraction: float = 0.1
    calibration_size: int = 256


def _batches(lengths: Sequence[int], batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled minibatches drawn from buckets of equal feature length."""
    lengths = np.asarray(lengths)
    batches = []
    for n in np.unique(lengths):
        idx = rng.permutation(np.flatnonzero(lengths == n))
        batches.extend(idx[i:i + batch_size] for i in range(0, idx.size, batch_size))
    batches = [b for b in batches if b.size >= 2]
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def extract_features(waves: Sequence[np.ndarray], cfg: FrontendConfig) -> list[np.ndarray]:
    return [mfcc(w, cfg).value for w in waves]


def accuracy(model: Checkpoint, waves: Sequence[np.ndarray], y: Sequence[int]) -> float:
    hits = sum(int(np.argmax(forward(model, w).value)) == int(t) for w, t in zip(waves, y))
    return hits / len(y)


def train(
    waves: Sequence[np.ndarray],
    y: Sequence[int],
    labels: Sequence[str],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig = TrainConfig(),
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[Checkpoint, list[dict]]:
    """Fit the x-vector network with Adam on whole utterances.

    Returns the checkpoint and a per-epoch history of mean loss and batch
    accuracy. Deterministic for a given ``train_cfg.seed``.
    """
    y = np.asarray(y, dtype=np.int64)
    if len(waves) != y.size:
        raise ValidationError(f"{len(waves)} waveforms but {y.size} labels")
    if y.min() < 0 or y.max() >= model_cfg.num_speakers:
        raise ValidationError("label index out of range for the model's speaker count")
    rng = np.random.default_rng(train_cfg.seed)
    init = init_parameters(model_cfg, seed=int(rng.integers(2**31)), zero_output=train_cfg.zero_init_output)
    if train_cfg.epochs == 0:
        return Checkpoint(model_cfg, init, list(labels)), []

    feats = extract_features(waves, model_cfg.frontend)
    lengths = [f.shape[0] for f in feats]
    work = {k: v.astype(np.float64) for k, v in init.items()}
    trainable = [k for k in work if not is_buffer(k)]
    opt = Adam(train_cfg.learning_rate)
    history = []
    iteration = 0
    for epoch in range(train_cfg.epochs):
        frac = epoch / max(train_cfg.epochs - 1, 1)
        opt.lr = train_cfg.learning_rate * (1 - (1 - train_cfg.final_lr_fraction) * frac)
        losses, hits, seen = [], 0, 0
        for batch in _batches(lengths, train_cfg.batch_size, rng):
            xb = np.stack([feats[i] for i in batch])
            yb = y[batch]
            try:
                with T.Tape() as tape:
                    params = {k: (T.Tensor(v, requires_grad=True) if k in trainable else v)
                              for k, v in work.items()}
                    z = network(model_cfg, params, xb, training=True)
                    loss = T.softmax_cross_entropy(z, yb)
                grads = tape.gradient(loss, [params[k] for k in trainable])
            except T.NonFiniteError as exc:
                raise TrainingDivergedError(iteration, exc.op) from exc
            opt.step(work, dict(zip(trainable, grads)))
            losses.append(float(loss.value))
            hits += int((z.value.argmax(axis=1) == yb).sum())
            seen += yb.size
            iteration += 1
        record = {"epoch": epoch + 1, "loss": float(np.mean(losses)), "batch_accuracy": hits / max(seen, 1)}
        history.append(record)
        log.info("epoch %d loss %.4f acc %.3f", record["epoch"], record["loss"], record["batch_accuracy"])
        if on_epoch is not None:
            on_epoch(record)
    _calibrate_batch_norm(model_cfg, work, feats, lengths, train_cfg.calibration_size, rng)
    ckpt = Checkpoint(model_cfg, {k: v.astype(np.float32) for k, v in work.items()}, list(labels))
    return ckpt, history


def _calibrate_batch_norm(cfg, work, feats, lengths, size, rng) -> None:
    """Replace running statistics by those of one large batch per length bucket.

    Momentum averages collected while the weights were still moving fit the
    final network poorly. Bucket statistics are averaged by bucket size.
    """
    lengths = np.asarray(lengths)
    buffers = [k for k in work if is_buffer(k)]
    sums = {k: np.zeros_like(work[k]) for k in buffers}
    count = 0
    for length in np.unique(lengths):
        idx = np.flatnonzero(lengths == length)
        idx = rng.permutation(idx)[: max(2, int(round(size * idx.size / lengths.size)))]
        if idx.size < 2:
            continue
        scratch = dict(work)
        scratch.update({k: np.zeros_like(work[k]) for k in buffers})
        network(cfg, scratch, np.stack([feats[i] for i in idx]), training=True, bn_momentum=1.0)
        for k in buffers:
            sums[k] += scratch[k] * idx.size
        count += idx.size
    if count:
        for k in buffers:
            work[k] = sums[k] / count


class XVectorClassifier(ClassifierMixin, BaseEstimator):
    """Speaker classifier on raw 16 kHz PCM-scale waveforms.

    Defaults follow the x-vector layout: five TDNN layers (512 units, 1500 at
    the pooling input, 15-frame context), statistics pooling, two 512-unit
    fully connected layers and a softmax output over speakers.
    """

    def __init__(self, hidden_dim=512, pooling_dim=1500, fc_dims=(512, 512), n_mfcc=30,
                 epochs=30, batch_size=16, learning_rate=1e-3, seed=0, zero_init_output=False):
        self.hidden_dim = hidden_dim
        self.pooling_dim = pooling_dim
        self.fc_dims = fc_dims
        self.n_mfcc = n_mfcc
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed
        self.zero_init_output = zero_init_output

    def _model_config(self, n_classes: int) -> ModelConfig:
        return ModelConfig(
            num_speakers=n_classes, mfcc_dim=self.n_mfcc, hidden_dim=self.hidden_dim,
            pooling_dim=self.pooling_dim, fc_dims=tuple(self.fc_dims),
            frontend=FrontendConfig(n_mels=max(30, self.n_mfcc), n_mfcc=self.n_mfcc),
        )

    def fit(self, X, y, on_epoch=None):
        waves = check_signals(X)
        y = np.asarray(y).astype(str)
        self.classes_ = np.unique(y)
        if self.classes_.size < 2:
            raise ValidationError("need at least two speakers to train")
        y_idx = np.searchsorted(self.classes_, y)
        cfg = self._model_config(self.classes_.size)
        tcfg = TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.seed, self.zero_init_output)
        self.checkpoint_, self.history_ = train(waves, y_idx, list(self.classes_), cfg, tcfg, on_epoch)
        self.train_accuracy_ = accuracy(self.checkpoint_, waves, y_idx)
        return self

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "XVectorClassifier":
        c = ckpt.config
        est = cls(hidden_dim=c.hidden_dim, pooling_dim=c.pooling_dim, fc_dims=c.fc_dims, n_mfcc=c.mfcc_dim)
        est.checkpoint_ = ckpt
        est.classes_ = np.asarray(ckpt.labels)
        est.history_ = []
        return est

    @classmethod
    def load(cls, path) -> "XVectorClassifier":
        return cls.from_checkpoint(Checkpoint.load(path))

    def save(self, path) -> None:
        check_is_fitted(self, "checkpoint_")
        self.checkpoint_.save(path)

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "checkpoint_")
        return np.stack([forward(self.checkpoint_, w).value for w in check_signals(X)])

    def predict(self, X) -> np.ndarray:
        return self.classes_[self.predict_proba(X).argmax(axis=1)]
