"""Small dense-network toolkit: layers, blockwise softmax, losses, ADAM.

Everything works on float64 numpy arrays.  Gradients are written out by hand
for the fixed encoder/decoder topology; there is no general autodiff graph.
"""
from __future__ import annotations

import io
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

Blocks = Sequence[tuple[int, int]]

CLAMP = 1e-12


class TrainingDiverged(FloatingPointError):
    """A loss or gradient stopped being finite."""


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _check_blocks(blocks: Blocks, width: int) -> None:
    pos = 0
    for off, w in blocks:
        if w <= 0:
            raise ValueError("empty block in layout")
        if off != pos:
            raise ValueError("blocks must tile the columns in order")
        pos += w
    if pos != width:
        raise ValueError(f"blocks cover {pos} columns, matrix has {width}")


def blockwise_softmax(x: np.ndarray, blocks: Blocks) -> np.ndarray:
    """Softmax applied independently to each column block of each row."""
    x = np.asarray(x, dtype=np.float64)
    _check_blocks(blocks, x.shape[1])
    out = np.empty_like(x)
    for off, w in blocks:
        z = x[:, off : off + w]
        e = np.exp(z - z.max(axis=1, keepdims=True))
        out[:, off : off + w] = e / e.sum(axis=1, keepdims=True)
    return out


def blockwise_log_softmax(x: np.ndarray, blocks: Blocks) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    _check_blocks(blocks, x.shape[1])
    out = np.empty_like(x)
    for off, w in blocks:
        z = x[:, off : off + w]
        z = z - z.max(axis=1, keepdims=True)
        out[:, off : off + w] = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return out


def softmax_vjp(p: np.ndarray, grad: np.ndarray, blocks: Blocks) -> np.ndarray:
    """Pull ``grad`` (w.r.t. blockwise-softmax output ``p``) back to its input."""
    out = np.empty_like(grad)
    for off, w in blocks:
        ps = p[:, off : off + w]
        gs = grad[:, off : off + w]
        out[:, off : off + w] = ps * (gs - (gs * ps).sum(axis=1, keepdims=True))
    return out


def uniform_blocks(classes: int, count: int) -> list[tuple[int, int]]:
    return [(i * classes, classes) for i in range(count)]


def cross_entropy(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean over rows of ``-sum(target * log(pred))``, pred clamped to [1e-12, 1]."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    logp = np.log(np.clip(pred, CLAMP, 1.0))
    return float(-(target * logp).sum() / pred.shape[0])


def kl_uniform_categorical(q: np.ndarray, classes: int) -> float:
    """Mean over rows and latent blocks of KL(q || uniform(classes))."""
    q = np.asarray(q, dtype=np.float64)
    n, width = q.shape
    if width % classes:
        raise ValueError("latent width is not a multiple of the class count")
    d = width // classes
    safe = np.where(q > 0, q, 1.0)
    terms = np.where(q > 0, q * (np.log(safe) + math.log(classes)), 0.0)
    return float(terms.sum() / (n * d))


ACTIVATIONS = ("relu", "identity", "softmax")


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = "relu"
    blocks: Optional[list[tuple[int, int]]] = None

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.bias.shape != (self.weights.shape[1],):
            raise ValueError("bias length must equal layer output width")
        if self.activation == "softmax":
            if self.blocks is None:
                raise ValueError("blockwise-softmax layer needs a block layout")
            _check_blocks(self.blocks, self.weights.shape[1])

    @classmethod
    def init(cls, rng, fan_in, fan_out, activation="relu", blocks=None) -> "DenseLayer":
        return cls(glorot_uniform(rng, fan_in, fan_out), np.zeros(fan_out), activation, blocks)

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape

    def pre(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.weights.shape[0]:
            raise ValueError(f"layer expects width {self.weights.shape[0]}, got {x.shape[1]}")
        return x @ self.weights + self.bias

    def act(self, a: np.ndarray) -> np.ndarray:
        if self.activation == "relu":
            return np.maximum(a, 0.0)
        if self.activation == "softmax":
            return blockwise_softmax(a, self.blocks)
        return a

    def act_vjp(self, a: np.ndarray, h: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.activation == "relu":
            return grad * (a > 0)
        if self.activation == "softmax":
            return softmax_vjp(h, grad, self.blocks)
        return grad


@dataclass
class Trace:
    """Inputs, pre-activations and outputs recorded by :func:`forward`."""

    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    out: list[np.ndarray] = field(default_factory=list)


def forward(layers: Sequence[DenseLayer], x: np.ndarray) -> Trace:
    tr = Trace()
    h = np.asarray(x, dtype=np.float64)
    for layer in layers:
        a = layer.pre(h)
        tr.inputs.append(h)
        tr.pre.append(a)
        h = layer.act(a)
        tr.out.append(h)
    return tr


def backward(
    layers: Sequence[DenseLayer],
    trace: Trace,
    grad_out: np.ndarray,
    grad_is_pre: bool = False,
) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Reverse pass.  Returns per-layer ``(dW, db)`` and the gradient w.r.t. the input.

    ``grad_out`` is taken w.r.t. the last layer's output, or w.r.t. its
    pre-activation when ``grad_is_pre`` (for fused softmax + cross-entropy).
    """
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(layers)  # type: ignore[list-item]
    g = grad_out
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        if not (grad_is_pre and i == len(layers) - 1):
            g = layer.act_vjp(trace.pre[i], trace.out[i], g)
        grads[i] = (trace.inputs[i].T @ g, g.sum(axis=0))
        g = g @ layer.weights.T
    return grads, g


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """Bias-corrected ADAM update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int((~np.isfinite(g)).sum())
            raise TrainingDiverged(f"non-finite gradient in {name} ({bad} entries) at step {state.t + 1}")
        if params[name].shape != g.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def gradient_check(
    loss_fn: Callable[[dict[str, np.ndarray]], float],
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    h: float = 1e-5,
    samples: int = 200,
    seed: int = 0,
    floor: float = 1e-8,
) -> float:
    """Max relative error between ``grads`` and central finite differences.

    Checks ``samples`` coordinates drawn across all parameters (all of them if
    there are fewer).  Relative error is ``|a - n| / max(|a| + |n|, floor)``.
    """
    coords = [(name, i) for name in sorted(params) for i in range(params[name].size)]
    rng = np.random.default_rng(seed)
    if len(coords) > samples:
        pick = rng.choice(len(coords), size=samples, replace=False)
        coords = [coords[i] for i in sorted(pick)]
    worst = 0.0
    for name, i in coords:
        flat = params[name].reshape(-1)
        old = flat[i]
        flat[i] = old + h
        up = loss_fn(params)
        flat[i] = old - h
        down = loss_fn(params)
        flat[i] = old
        num = (up - down) / (2 * h)
        ana = float(grads[name].reshape(-1)[i])
        err = abs(ana - num) / max(abs(ana) + abs(num), floor)
        worst = max(worst, err)
    return worst


# -- checkpoints ---------------------------------------------------------------
#
# magic "SBNNCKPT" | u32 version | u32 count
# count x (u16 name_len | name utf-8 | u32 rows | u32 cols), cols == 0 marks a vector
# then every tensor's float64 data, little-endian, row-major, in table order

MAGIC = b"SBNNCKPT"
VERSION = 1


def write_checkpoint(params: dict[str, np.ndarray], path: os.PathLike | str) -> None:
    buf = io.BytesIO()
    names = list(params)
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(names)))
    for name in names:
        arr = np.asarray(params[name])
        rows, cols = (arr.shape[0], 0) if arr.ndim == 1 else arr.shape
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<II", rows, cols))
    for name in names:
        buf.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_checkpoint(path: os.PathLike | str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    table = []
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + ln].decode("utf-8")
        pos += ln
        rows, cols = struct.unpack_from("<II", data, pos)
        pos += 8
        table.append((name, rows, cols))
    out = {}
    for name, rows, cols in table:
        shape = (rows,) if cols == 0 else (rows, cols)
        size = int(np.prod(shape)) * 8
        arr = np.frombuffer(data[pos : pos + size], dtype="<f8").astype(np.float64)
        pos += size
        out[name] = arr.reshape(shape)
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes after tensor data")
    return out
