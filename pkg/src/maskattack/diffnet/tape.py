"""A small dynamic-tape reverse-mode differentiation engine over numpy arrays.

Only the primitives the MFCC frontend, the x-vector network and the masking
loss need are provided. Every op checks that its output is finite; the
backward pass checks every propagated gradient and names the op that first
produced a non-finite value.

    with Tape() as tape:
        x = Tensor(samples, requires_grad=True)
        loss = some_function(x)
    (grad,) = tape.gradient(loss, [x])
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

_state = threading.local()


class NonFiniteError(FloatingPointError):
    """A forward value or gradient became NaN/inf; ``op`` names the culprit."""

    def __init__(self, op: str, phase: str):
        super().__init__(f"non-finite {phase} produced by op '{op}'")
        self.op = op
        self.phase = phase


class Tensor:
    __slots__ = ("value", "requires_grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    shape = property(lambda self: self.value.shape)
    ndim = property(lambda self: self.value.ndim)

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not a supported primitive")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class _Node:
    __slots__ = ("op", "out", "inputs", "vjp")

    def __init__(self, op, out, inputs, vjp):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Records ops executed while active; each thread has its own tape stack."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, node: _Node) -> None:
        self.nodes.append(node)

    def gradient(self, target: Tensor, sources: Sequence[Tensor], seed=None) -> list[np.ndarray]:
        """Reverse sweep from ``target``; returns d(target)/d(source) for each source.

        Sources that ``target`` does not depend on get zero gradients.
        """
        seed = np.ones_like(target.value) if seed is None else np.asarray(seed, dtype=np.float64)
        grads: dict[int, np.ndarray] = {id(target): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not (isinstance(inp, Tensor) and inp.requires_grad):
                    continue
                if not np.all(np.isfinite(gi)):
                    raise NonFiniteError(node.op, "gradient")
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
        return [grads.get(id(s), np.zeros_like(s.value)) for s in sources]


def current_tape() -> Tape | None:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def _val(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _make(op: str, value: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(op, "value")
    tape = current_tape()
    track = tape is not None and any(isinstance(i, Tensor) and i.requires_grad for i in inputs)
    out = Tensor(value, requires_grad=track)
    if track:
        tape.record(_Node(op, out, inputs, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    return _make("add", av + bv, (a, b),
                 lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    return _make("sub", av - bv, (a, b),
                 lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    return _make("mul", av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def log(x, floor: float = 0.0) -> Tensor:
    """Natural log of ``x + floor``."""
    shifted = _val(x) + floor
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(shifted)
    return _make("log", value, (x,), lambda g: (g / shifted,))


def relu(x) -> Tensor:
    xv = _val(x)
    return _make("relu", np.maximum(xv, 0.0), (x,), lambda g: (g * (xv > 0),))


def reshape(x, shape) -> Tensor:
    xv = _val(x)
    return _make("reshape", xv.reshape(shape), (x,), lambda g: (g.reshape(xv.shape),))


# -- reductions --------------------------------------------------------------


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    xv = _val(x)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xv.shape).copy(),)

    return _make("sum", xv.sum(axis=axis, keepdims=keepdims), (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    xv = _val(x)
    count = xv.size if axis is None else np.prod([xv.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)

    def vjp(g):
        ga = gb = None
        if isinstance(a, Tensor) and a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        if isinstance(b, Tensor) and b.requires_grad:
            if av.ndim == 1:
                gb = np.outer(av, g)
            elif av.ndim > 2 and bv.ndim == 2:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return _make("matmul", av @ bv, (a, b), vjp)


# -- signal ops --------------------------------------------------------------


def frame(x, length: int, hop: int) -> Tensor:
    """(..., samples) -> (..., frames, length); a trailing partial frame is dropped."""
    xv = _val(x)
    n = xv.shape[-1]
    n_frames = (n - length) // hop + 1
    if n_frames < 1:
        raise ValueError(f"signal of {n} samples is shorter than one frame ({length})")
    view = np.lib.stride_tricks.sliding_window_view(xv, length, axis=-1)[..., ::hop, :][..., :n_frames, :]

    def vjp(g):
        out = np.zeros_like(xv)
        for t in range(n_frames):
            out[..., t * hop:t * hop + length] += g[..., t, :]
        return (out,)

    return _make("frame", np.ascontiguousarray(view), (x,), vjp)


def power_spectrum(frames, n_fft: int) -> Tensor:
    """|rfft(frames, n_fft)|^2 along the last axis (zero-padded when shorter)."""
    fv = _val(frames)
    length = fv.shape[-1]
    spec = np.fft.rfft(fv, n=n_fft, axis=-1)

    def vjp(g):
        full = np.zeros(g.shape[:-1] + (n_fft,), dtype=np.complex128)
        full[..., : g.shape[-1]] = g * spec
        back = 2.0 * n_fft * np.fft.ifft(full, axis=-1).real
        return (back[..., :length],)

    return _make("power_spectrum", spec.real**2 + spec.imag**2, (frames,), vjp)


def context_splice(x, offsets: Sequence[int]) -> Tensor:
    """TDNN input splicing: (B, T, D) -> (B, T - span, len(offsets) * D)."""
    xv = _val(x)
    lo, hi = min(offsets), max(offsets)
    t_out = xv.shape[1] - (hi - lo)
    if t_out < 1:
        raise ValueError(f"{xv.shape[1]} frames cannot cover context {list(offsets)}")
    pieces = [xv[:, o - lo:o - lo + t_out, :] for o in offsets]
    d = xv.shape[2]

    def vjp(g):
        out = np.zeros_like(xv)
        for j, o in enumerate(offsets):
            out[:, o - lo:o - lo + t_out, :] += g[:, :, j * d:(j + 1) * d]
        return (out,)

    return _make("context_splice", np.concatenate(pieces, axis=2), (x,), vjp)


# -- network blocks ----------------------------------------------------------


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray, *,
               training: bool, eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """Normalizes over every axis but the last.

    In training mode batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place; otherwise the stored statistics
    make this a fixed affine map.
    """
    xv = _val(x)
    gv, bv = _val(gamma), _val(beta)
    axes = tuple(range(xv.ndim - 1))
    if training:
        mu = xv.mean(axis=axes)
        var = xv.var(axis=axes)
        count = xv.size // xv.shape[-1]
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * count / max(count - 1, 1)
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    value = xhat * gv + bv

    def vjp(g):
        g_gamma = (g * xhat).sum(axis=axes)
        g_beta = g.sum(axis=axes)
        gx_hat = g * gv
        if training:
            m = xv.size // xv.shape[-1]
            gx = inv / m * (m * gx_hat - gx_hat.sum(axis=axes) - xhat * (gx_hat * xhat).sum(axis=axes))
        else:
            gx = gx_hat * inv
        return gx, g_gamma, g_beta

    return _make("batch_norm", value, (x, gamma, beta), vjp)


def stats_pool(x, eps: float = 1e-9) -> Tensor:
    """(B, T, D) -> (B, 2D): mean over frames, then sqrt(var + eps)."""
    xv = _val(x)
    t = xv.shape[1]
    mu = xv.mean(axis=1)
    centred = xv - mu[:, None, :]
    std = np.sqrt((centred**2).mean(axis=1) + eps)
    d = xv.shape[2]

    def vjp(g):
        g_mu, g_std = g[:, :d], g[:, d:]
        gx = g_mu[:, None, :] / t + centred * (g_std / (t * std))[:, None, :]
        return (gx,)

    return _make("stats_pool", np.concatenate([mu, std], axis=1), (x,), vjp)


def softmax(z, axis: int = -1) -> Tensor:
    zv = _val(z)
    e = np.exp(zv - zv.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)
    return _make("softmax", p, (z,), lambda g: (p * (g - (g * p).sum(axis=axis, keepdims=True)),))


PROB_FLOOR = 1e-12


def cross_entropy(probs, targets) -> Tensor:
    """Mean of -log(max(p[target], 1e-12)) over the batch; ``probs`` is (B, C) or (C,)."""
    pv = _val(probs)
    single = pv.ndim == 1
    p2 = pv[None, :] if single else pv
    tg = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    rows = np.arange(p2.shape[0])
    picked = p2[rows, tg]
    clipped = np.maximum(picked, PROB_FLOOR)
    value = -np.log(clipped).mean()

    def vjp(g):
        out = np.zeros_like(p2)
        out[rows, tg] = np.where(picked >= PROB_FLOOR, -g / (clipped * p2.shape[0]), 0.0)
        return (out[0] if single else out,)

    return _make("cross_entropy", np.asarray(value), (probs,), vjp)


def softmax_cross_entropy(z, targets) -> Tensor:
    """Mean of logsumexp(z) - z[target] over the batch; ``z`` is (B, C) or (C,).

    Equal to ``cross_entropy(softmax(z), targets)`` wherever p[target] is above
    the probability floor, but its gradient never vanishes below it.
    """
    zv = _val(z)
    single = zv.ndim == 1
    z2 = zv[None, :] if single else zv
    tg = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    rows = np.arange(z2.shape[0])
    shifted = z2 - z2.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    value = (lse - shifted[rows, tg]).mean()
    p = np.exp(shifted - lse[:, None])

    def vjp(g):
        out = p.copy()
        out[rows, tg] -= 1.0
        out *= g / z2.shape[0]
        return (out[0] if single else out,)

    return _make("softmax_cross_entropy", np.asarray(value), (z,), vjp)
