"""x-vector shaped speaker classifier and its binary checkpoint format."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .._validation import ValidationError
from . import tape as T
from .frontend import FrontendConfig, mfcc

DEFAULT_CONTEXTS = ((-2, -1, 0, 1, 2), (-2, 0, 2), (-3, 0, 3), (0,), (0,))


@dataclass(frozen=True)
class ModelConfig:
    num_speakers: int
    mfcc_dim: int = 30
    tdnn_contexts: tuple = DEFAULT_CONTEXTS
    hidden_dim: int = 512
    pooling_dim: int = 1500
    fc_dims: tuple = (512, 512)
    bn_eps: float = 1e-5
    pool_eps: float = 1e-9
    frontend: FrontendConfig = field(default_factory=FrontendConfig)

    def __post_init__(self):
        object.__setattr__(self, "tdnn_contexts", tuple(tuple(int(o) for o in c) for c in self.tdnn_contexts))
        object.__setattr__(self, "fc_dims", tuple(int(d) for d in self.fc_dims))
        if isinstance(self.frontend, dict):
            object.__setattr__(self, "frontend", FrontendConfig(**self.frontend))
        if self.num_speakers < 2:
            raise ValidationError("num_speakers must be at least 2")
        if self.frontend.n_mfcc != self.mfcc_dim:
            raise ValidationError("frontend n_mfcc must equal mfcc_dim")

    @property
    def receptive_field(self) -> int:
        return 1 + sum(max(c) - min(c) for c in self.tdnn_contexts)

    @property
    def tdnn_dims(self) -> tuple:
        return (self.hidden_dim,) * (len(self.tdnn_contexts) - 1) + (self.pooling_dim,)

    @property
    def embedding_dim(self) -> int:
        return 2 * self.pooling_dim

    def min_samples(self) -> int:
        fe = self.frontend
        return fe.frame_length + (self.receptive_field - 1) * fe.hop_length

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tdnn_contexts"] = [list(c) for c in self.tdnn_contexts]
        d["fc_dims"] = list(self.fc_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    shapes = {}
    in_dim = cfg.mfcc_dim
    for i, (ctx, out) in enumerate(zip(cfg.tdnn_contexts, cfg.tdnn_dims)):
        shapes[f"tdnn{i}.weight"] = (len(ctx) * in_dim, out)
        shapes[f"tdnn{i}.bias"] = (out,)
        shapes.update(_bn_shapes(f"tdnn{i}.bn", out))
        in_dim = out
    in_dim = cfg.embedding_dim
    for j, out in enumerate(cfg.fc_dims):
        shapes[f"fc{j}.weight"] = (in_dim, out)
        shapes[f"fc{j}.bias"] = (out,)
        shapes.update(_bn_shapes(f"fc{j}.bn", out))
        in_dim = out
    shapes["output.weight"] = (in_dim, cfg.num_speakers)
    shapes["output.bias"] = (cfg.num_speakers,)
    return shapes


def _bn_shapes(prefix, dim):
    return {f"{prefix}.{k}": (dim,) for k in ("gamma", "beta", "running_mean", "running_var")}


def is_buffer(name: str) -> bool:
    return name.endswith(".running_mean") or name.endswith(".running_var")


def init_parameters(cfg: ModelConfig, seed: int = 0, *, zero_output: bool = False) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".weight"):
            if name.startswith("output") and zero_output:
                arr = np.zeros(shape)
            else:
                gain = 1.0 if name.startswith("output") else 2.0
                arr = rng.standard_normal(shape) * np.sqrt(gain / shape[0])
        elif name.endswith((".gamma", ".running_var")):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = arr.astype(np.float32)
    return params


def network(cfg: ModelConfig, params: Mapping, feats, *, training: bool = False,
            bn_momentum: float = 0.1) -> T.Tensor:
    """Logits for features of shape (batch, frames, mfcc_dim).

    ``params`` maps names to Tensors or float64 arrays. Running statistics
    must be float64 arrays; they are updated in place when ``training``.
    """
    n_frames = T._val(feats).shape[1]
    if n_frames < cfg.receptive_field:
        raise ValidationError(
            f"{n_frames} feature frames are fewer than the TDNN receptive field ({cfg.receptive_field})"
        )

    def block(h, prefix):
        h = T.relu(T.add(T.matmul(h, params[f"{prefix}.weight"]), params[f"{prefix}.bias"]))
        return T.batch_norm(
            h, params[f"{prefix}.bn.gamma"], params[f"{prefix}.bn.beta"],
            params[f"{prefix}.bn.running_mean"], params[f"{prefix}.bn.running_var"],
            training=training, eps=cfg.bn_eps, momentum=bn_momentum,
        )

    h = feats
    for i, ctx in enumerate(cfg.tdnn_contexts):
        h = block(T.context_splice(h, ctx), f"tdnn{i}")
    h = T.stats_pool(h, eps=cfg.pool_eps)
    for j in range(len(cfg.fc_dims)):
        h = block(h, f"fc{j}")
    return T.add(T.matmul(h, params["output.weight"]), params["output.bias"])


# -- checkpoint --------------------------------------------------------------

MAGIC = b"XVECCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint file."""


@dataclass(eq=False)
class Checkpoint:
    """Frozen model: config, float32 parameters and the speaker label table."""

    config: ModelConfig
    params: dict[str, np.ndarray]
    labels: list[str]
    version: int = FORMAT_VERSION
    _cache: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.labels = [str(lab) for lab in self.labels]
        self.params = dict(self.params)
        if len(set(self.labels)) != len(self.labels):
            raise CheckpointError("label table has duplicate speaker ids")
        if len(self.labels) != self.config.num_speakers:
            raise CheckpointError(
                f"label table has {len(self.labels)} ids but config expects {self.config.num_speakers}"
            )
        expected = parameter_shapes(self.config)
        if set(expected) != set(self.params):
            missing = sorted(set(expected) ^ set(self.params))
            raise CheckpointError(f"parameter set inconsistent with config: {missing[:5]}")
        for name, shape in expected.items():
            arr = np.ascontiguousarray(self.params[name], dtype=np.float32)
            if arr.shape != shape:
                raise CheckpointError(f"parameter {name} has shape {arr.shape}, expected {shape}")
            arr.setflags(write=False)
            self.params[name] = arr

    @property
    def n_parameters(self) -> int:
        return sum(a.size for n, a in self.params.items() if not is_buffer(n))

    def arrays(self) -> dict[str, np.ndarray]:
        """float64 copies for computation, built once."""
        if self._cache is None:
            cache = {}
            for name, arr in self.params.items():
                a64 = arr.astype(np.float64)
                a64.setflags(write=False)
                cache[name] = a64
            self._cache = cache
        return self._cache

    def label_index(self, label: str) -> int:
        try:
            return self.labels.index(str(label))
        except ValueError:
            raise ValidationError(f"speaker id {label!r} not in the model's label set") from None

    def permuted(self, order: Sequence[int]) -> "Checkpoint":
        """Same network with output classes reordered: new class i is old class order[i]."""
        order = list(order)
        params = dict(self.params)
        params["output.weight"] = self.params["output.weight"][:, order]
        params["output.bias"] = self.params["output.bias"][order]
        return Checkpoint(self.config, params, [self.labels[i] for i in order])

    def equals(self, other: "Checkpoint") -> bool:
        return (
            self.config == other.config
            and self.labels == other.labels
            and all(np.array_equal(self.params[k], other.params[k]) for k in self.params)
        )

    # serialization

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", self.version))
        _write_blob(buf, json.dumps(self.config.to_dict(), sort_keys=True).encode())
        _write_blob(buf, json.dumps(self.labels).encode())
        names = sorted(self.params)
        buf.write(struct.pack("<I", len(names)))
        for name in names:
            arr = self.params[name]
            _write_blob(buf, name.encode())
            buf.write(struct.pack("<B", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(arr.astype("<f4").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        buf = io.BytesIO(data)
        if buf.read(len(MAGIC)) != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic bytes)")
        (version,) = _unpack(buf, "<I")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        config = ModelConfig.from_dict(json.loads(_read_blob(buf)))
        labels = json.loads(_read_blob(buf))
        (count,) = _unpack(buf, "<I")
        params = {}
        for _ in range(count):
            name = _read_blob(buf).decode()
            (ndim,) = _unpack(buf, "<B")
            shape = _unpack(buf, f"<{ndim}I")
            n = int(np.prod(shape)) if ndim else 1
            raw = buf.read(4 * n)
            if len(raw) != 4 * n:
                raise CheckpointError(f"truncated data for parameter {name}")
            params[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        if buf.read(1):
            raise CheckpointError("trailing bytes after last parameter")
        return cls(config, params, labels, version)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def _write_blob(buf, payload: bytes):
    buf.write(struct.pack("<I", len(payload)))
    buf.write(payload)


def _unpack(buf, fmt):
    size = struct.calcsize(fmt)
    raw = buf.read(size)
    if len(raw) != size:
        raise CheckpointError("truncated checkpoint header")
    return struct.unpack(fmt, raw)


def _read_blob(buf) -> bytes:
    (n,) = _unpack(buf, "<I")
    raw = buf.read(n)
    if len(raw) != n:
        raise CheckpointError("truncated checkpoint block")
    return raw


# -- inference ---------------------------------------------------------------


def _as_batch(wave):
    v = T._val(wave)
    if v.ndim == 1:
        return T.reshape(wave, (1, -1)) if isinstance(wave, T.Tensor) else v[None, :], True
    return wave, False


def logits(model: Checkpoint, wave) -> T.Tensor:
    """Frozen-model logits for one waveform (samples,) or a batch (batch, samples)."""
    batch, single = _as_batch(wave)
    n = T._val(batch).shape[-1]
    if n < model.config.min_samples():
        raise ValidationError(
            f"input of {n} samples yields fewer frames than the receptive field "
            f"({model.config.receptive_field}); need at least {model.config.min_samples()} samples"
        )
    feats = mfcc(batch, model.config.frontend)
    out = network(model.config, model.arrays(), feats, training=False)
    return T.reshape(out, (-1,)) if single else out


def forward(model: Checkpoint, wave) -> T.Tensor:
    """Posterior over speakers (softmax of the logits)."""
    return T.softmax(logits(model, wave), axis=-1)


def predict_index(model: Checkpoint, wave) -> int:
    return int(np.argmax(forward(model, np.asarray(T._val(wave))).value))


def grad_wrt_input(model: Checkpoint, wave, target: int, scale: float = 1.0):
    """(loss, d loss / d samples, probabilities) for cross-entropy toward ``target``.

    The loss is computed from the logits (log-softmax) so the gradient stays
    informative even when p[target] underflows.
    """
    with T.Tape() as tape:
        x = T.Tensor(T._val(wave), requires_grad=True)
        z = logits(model, x)
        loss = T.softmax_cross_entropy(z, target)
        if scale != 1.0:
            loss = T.mul(loss, scale)
    (grad,) = tape.gradient(loss, [x])
    zv = z.value - z.value.max()
    probs = np.exp(zv) / np.exp(zv).sum()
    return float(loss.value), grad, probs
