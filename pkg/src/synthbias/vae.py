"""Categorical VAE over one-hot tabular records.

The encoder maps a record to D categorical posteriors over C classes; a
Gumbel-softmax draw stands in for the discrete latent so the whole network
trains by backprop; the decoder emits one softmax per attribute (plus the
label) and the loss is reconstruction cross-entropy plus KL to a uniform
prior.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
import os
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import __version__
from .nn import (
    AdamState,
    DenseLayer,
    TrainingDiverged,
    adam_step,
    backward,
    blockwise_log_softmax,
    blockwise_softmax,
    forward,
    read_checkpoint,
    softmax_vjp,
    uniform_blocks,
    write_checkpoint,
)
from .schema import Dataset, Schema, SchemaError, encoded_blocks, one_hot_encode, split

GUMBEL_EPS = 1e-20


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 256
    learning_rate: float = 1e-3
    seed: int = 0
    tau_initial: float = 1.0
    tau_floor: float = 0.5
    tau_decay: float = 0.98
    patience: int = 10
    classes: int = 10
    latent: int = 8
    encoder_hidden: tuple[int, int] = (128, 64)
    decoder_hidden: tuple[int, int] = (64, 128)

    def __post_init__(self):
        self.encoder_hidden = tuple(int(h) for h in self.encoder_hidden)
        self.decoder_hidden = tuple(int(h) for h in self.decoder_hidden)
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        for name in ("batch_size", "learning_rate", "tau_initial", "tau_floor", "tau_decay",
                     "patience", "classes", "latent"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if len(self.encoder_hidden) != 2 or len(self.decoder_hidden) != 2:
            raise ValueError("encoder and decoder take exactly two hidden widths each")
        if min(self.encoder_hidden + self.decoder_hidden) <= 0:
            raise ValueError("hidden widths must be positive")

    def tau(self, epoch: int) -> float:
        return max(self.tau_floor, self.tau_initial * self.tau_decay**epoch)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_hidden"] = list(self.encoder_hidden)
        d["decoder_hidden"] = list(self.decoder_hidden)
        return d

    @classmethod
    def from_dict(cls, doc: Optional[dict]) -> "TrainConfig":
        doc = dict(doc or {})
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class LossTrace:
    train_ce: list[float] = field(default_factory=list)
    train_kl: list[float] = field(default_factory=list)
    train_total: list[float] = field(default_factory=list)
    val_ce: list[float] = field(default_factory=list)
    val_kl: list[float] = field(default_factory=list)
    val_total: list[float] = field(default_factory=list)
    tau: list[float] = field(default_factory=list)
    initial_train_total: float = math.nan
    best_epoch: int = -1

    def __len__(self) -> int:
        return len(self.train_total)

    def to_csv(self) -> str:
        lines = ["epoch,tau,train_ce,train_kl,train_total,val_ce,val_kl,val_total"]
        for e in range(len(self)):
            vals = [self.tau[e], self.train_ce[e], self.train_kl[e], self.train_total[e],
                    self.val_ce[e], self.val_kl[e], self.val_total[e]]
            lines.append(f"{e + 1}," + ",".join(repr(float(v)) for v in vals))
        return "\n".join(lines) + "\n"


def schema_hash(schema: Schema) -> str:
    """Digest of the encoded layout: column names, domains and label values."""
    doc = schema.to_dict()
    doc.pop("sensitive", None)
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


@dataclass
class VaeModel:
    encoder: list[DenseLayer]
    decoder: list[DenseLayer]
    classes: int
    latent: int
    temperature: float
    blocks: list[tuple[int, int]]
    schema_digest: str = ""

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.encoder[-1].shape[1] != self.classes * self.latent:
            raise ValueError("encoder head width must equal C x D")
        if self.decoder[0].shape[0] != self.classes * self.latent:
            raise ValueError("decoder input width must equal C x D")
        if list(self.decoder[-1].blocks) != list(self.blocks):
            raise ValueError("decoder output blocks must match the encoded layout")

    @classmethod
    def init(cls, schema: Schema, cfg: TrainConfig) -> "VaeModel":
        rng = np.random.default_rng([cfg.seed, 0])
        blocks = encoded_blocks(schema, with_label=True)
        width = sum(w for _, w in blocks)
        cd = cfg.classes * cfg.latent
        e1, e2 = cfg.encoder_hidden
        d1, d2 = cfg.decoder_hidden
        encoder = [
            DenseLayer.init(rng, width, e1),
            DenseLayer.init(rng, e1, e2),
            DenseLayer.init(rng, e2, cd, "identity"),
        ]
        decoder = [
            DenseLayer.init(rng, cd, d1),
            DenseLayer.init(rng, d1, d2),
            DenseLayer.init(rng, d2, width, "softmax", blocks),
        ]
        return cls(encoder, decoder, cfg.classes, cfg.latent, cfg.tau_initial, blocks,
                   schema_hash(schema))

    @property
    def latent_blocks(self) -> list[tuple[int, int]]:
        return uniform_blocks(self.classes, self.latent)

    @property
    def width(self) -> int:
        return sum(w for _, w in self.blocks)

    def params(self) -> dict[str, np.ndarray]:
        """Live views of every weight and bias, keyed ``encoder.0.W`` etc."""
        out = {}
        for part, layers in (("encoder", self.encoder), ("decoder", self.decoder)):
            for i, layer in enumerate(layers):
                out[f"{part}.{i}.W"] = layer.weights
                out[f"{part}.{i}.b"] = layer.bias
        return out

    def load_params(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in self.params().items():
            if values[name].shape != arr.shape:
                raise ValueError(f"checkpoint tensor {name} has shape {values[name].shape}")
            arr[...] = values[name]

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.width:
            raise SchemaError(f"expected encoded width {self.width}, got {x.shape}")
        return x


def encode(m: VaeModel, x) -> np.ndarray:
    """Latent logits, N x (C*D)."""
    if hasattr(x, "values"):
        x = x.values
    return forward(m.encoder, m._check_input(x)).out[-1]


def gumbel_noise(shape, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(shape)
    return -np.log(-np.log(u + GUMBEL_EPS) + GUMBEL_EPS)


def gumbel_softmax_sample(
    logits: np.ndarray,
    tau: float,
    seed: Optional[int] = None,
    classes: Optional[int] = None,
    noise: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Relaxed one-hot draw: softmax((logits + Gumbel noise) / tau) per latent block."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    logits = np.asarray(logits, dtype=np.float64)
    if classes is None:
        classes = logits.shape[1]
    if noise is None:
        if rng is None:
            rng = np.random.default_rng(seed)
        noise = gumbel_noise(logits.shape, rng)
    return blockwise_softmax((logits + noise) / tau, uniform_blocks(classes, logits.shape[1] // classes))


def decode(m: VaeModel, z: np.ndarray) -> np.ndarray:
    """Per-block output probabilities over attributes + label."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != m.classes * m.latent:
        raise SchemaError(f"latent width must be {m.classes * m.latent}, got {z.shape}")
    return forward(m.decoder, z).out[-1]


@dataclass
class LossParts:
    ce: float
    kl: float

    @property
    def total(self) -> float:
        return self.ce + self.kl


def loss_and_grads(
    m: VaeModel, x: np.ndarray, noise: np.ndarray, tau: Optional[float] = None, grads: bool = True
) -> tuple[LossParts, Optional[dict[str, np.ndarray]]]:
    """Loss for one batch with given Gumbel noise, and its exact gradient.

    CE is ``mean_rows(-sum x * log p)``; KL is the mean over rows and latent
    blocks of KL(q || uniform).  The decoder log-probabilities come straight
    from a log-softmax, so no clamping is involved.
    """
    x = m._check_input(x)
    tau = m.temperature if tau is None else tau
    n = x.shape[0]
    lat = m.latent_blocks
    c, d = m.classes, m.latent

    enc = forward(m.encoder, x)
    logits = enc.out[-1]
    logq = blockwise_log_softmax(logits, lat)
    q = np.exp(logq)
    kl = float((q * (logq + math.log(c))).sum() / (n * d))

    z = blockwise_softmax((logits + noise) / tau, lat)
    dec = forward(m.decoder, z)
    logp = blockwise_log_softmax(dec.pre[-1], m.blocks)
    ce = float(-(x * logp).sum() / n)
    parts = LossParts(ce, kl)
    if not (math.isfinite(ce) and math.isfinite(kl)):
        raise TrainingDiverged(f"non-finite loss (ce={ce}, kl={kl})")
    if not grads:
        return parts, None

    # softmax + CE per block: d/d(pre) = p - x
    g_out = (dec.out[-1] - x) / n
    dec_grads, g_z = backward(m.decoder, dec, g_out, grad_is_pre=True)
    g_logits = softmax_vjp(z, g_z, lat) / tau
    g_logits += softmax_vjp(q, (logq + math.log(c)) / (n * d), lat)
    enc_grads, _ = backward(m.encoder, enc, g_logits)

    out = {}
    for part, gs in (("encoder", enc_grads), ("decoder", dec_grads)):
        for i, (gw, gb) in enumerate(gs):
            out[f"{part}.{i}.W"] = gw
            out[f"{part}.{i}.b"] = gb
    return parts, out


def loss(m: VaeModel, x, seed: int, tau: Optional[float] = None) -> tuple[float, float, float]:
    """(CE, KL, total) with Gumbel noise drawn from ``seed``."""
    if hasattr(x, "values"):
        x = x.values
    noise = gumbel_noise((np.shape(x)[0], m.classes * m.latent), np.random.default_rng(seed))
    parts, _ = loss_and_grads(m, x, noise, tau, grads=False)
    return parts.ce, parts.kl, parts.total


def _evaluate(m: VaeModel, x: np.ndarray, tau: float, seed, chunk: int = 4096) -> LossParts:
    rng = np.random.default_rng(seed)
    ce = kl = 0.0
    for s in range(0, x.shape[0], chunk):
        xb = x[s : s + chunk]
        p, _ = loss_and_grads(m, xb, gumbel_noise((xb.shape[0], m.classes * m.latent), rng), tau, False)
        ce += p.ce * xb.shape[0]
        kl += p.kl * xb.shape[0]
    return LossParts(ce / x.shape[0], kl / x.shape[0])


def train(d: Dataset, cfg: TrainConfig, log=None) -> tuple[VaeModel, LossTrace]:
    """Mini-batch ADAM on the 70% split; keeps the best-validation checkpoint.

    Stops early after ``cfg.patience`` epochs without validation improvement.
    """
    parts = split(d, cfg.seed)
    x = one_hot_encode(d, with_label=True).values
    xt, xv = x[parts.train], x[parts.validation]
    if xt.shape[0] == 0:
        raise ValueError("training split is empty")
    if cfg.batch_size > xt.shape[0]:
        raise ValueError(f"batch size {cfg.batch_size} exceeds training split size {xt.shape[0]}")

    m = VaeModel.init(d.schema, cfg)
    trace = LossTrace()
    trace.initial_train_total = _evaluate(m, xt, cfg.tau(0), [cfg.seed, 3]).total
    if cfg.epochs == 0:
        return m, trace

    params = m.params()
    adam = AdamState(lr=cfg.learning_rate)
    rng = np.random.default_rng([cfg.seed, 1])
    best = (math.inf, None, -1, cfg.tau(0))
    for epoch in range(cfg.epochs):
        tau = cfg.tau(epoch)
        order = rng.permutation(xt.shape[0])
        ce = kl = 0.0
        for bi, s in enumerate(range(0, len(order), cfg.batch_size)):
            xb = xt[order[s : s + cfg.batch_size]]
            noise = gumbel_noise((xb.shape[0], m.classes * m.latent), rng)
            try:
                lp, g = loss_and_grads(m, xb, noise, tau)
                adam_step(params, g, adam)
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"epoch {epoch + 1}, batch {bi + 1}: {exc}") from exc
            ce += lp.ce * xb.shape[0]
            kl += lp.kl * xb.shape[0]
        tr = LossParts(ce / xt.shape[0], kl / xt.shape[0])
        val = _evaluate(m, xv, tau, [cfg.seed, 2]) if xv.shape[0] else tr
        trace.train_ce.append(tr.ce)
        trace.train_kl.append(tr.kl)
        trace.train_total.append(tr.total)
        trace.val_ce.append(val.ce)
        trace.val_kl.append(val.kl)
        trace.val_total.append(val.total)
        trace.tau.append(tau)
        if log is not None:
            log(f"epoch {epoch + 1}/{cfg.epochs} tau={tau:.3f} train={tr.total:.4f} val={val.total:.4f}")
        if val.total < best[0]:
            best = (val.total, {k: v.copy() for k, v in params.items()}, epoch, tau)
        elif epoch - best[2] >= cfg.patience:
            break
    m.load_params(best[1])
    m.temperature = best[3]
    trace.best_epoch = best[2] + 1
    return m, trace


def _sample_blocks(probs: np.ndarray, blocks, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per block by inverse CDF."""
    u = rng.random((probs.shape[0], len(blocks)))
    out = np.empty((probs.shape[0], len(blocks)), dtype=np.int64)
    for j, (off, w) in enumerate(blocks):
        cdf = np.cumsum(probs[:, off : off + w], axis=1)
        cdf[:, -1] = 1.0
        out[:, j] = (u[:, j : j + 1] >= cdf).sum(axis=1)
    return np.minimum(out, np.array([w - 1 for _, w in blocks]))


def synthesize(
    m: VaeModel,
    source: Dataset,
    n: Optional[int] = None,
    mode: str = "reconstruction",
    seed: int = 0,
    chunk: int = 4096,
) -> Dataset:
    """Draw a synthetic dataset over ``source``'s schema.

    ``reconstruction`` pushes the source rows (cycled to ``n``) through the
    encoder, a Gumbel-softmax draw and the decoder; ``prior`` decodes latents
    drawn uniformly per distribution.  Attributes and label are then sampled
    from the decoder's output probabilities.
    """
    if schema_hash(source.schema) != m.schema_digest:
        raise SchemaError("model was trained on a different schema")
    if mode not in ("reconstruction", "prior"):
        raise ValueError(f"unknown synthesis mode {mode!r}")
    n = len(source) if n is None else int(n)
    rng = np.random.default_rng(seed)
    x = one_hot_encode(source, with_label=True).values if mode == "reconstruction" else None
    cd = m.classes * m.latent
    rows = []
    for s in range(0, n, chunk):
        size = min(chunk, n - s)
        if mode == "reconstruction":
            xb = x[np.arange(s, s + size) % len(source)]
            z = gumbel_softmax_sample(encode(m, xb), m.temperature, classes=m.classes, rng=rng)
        else:
            pick = rng.integers(0, m.classes, size=(size, m.latent))
            z = np.zeros((size, cd))
            z[np.arange(size)[:, None], pick + np.arange(m.latent) * m.classes] = 1.0
        rows.append(_sample_blocks(decode(m, z), m.blocks, rng))
    idx = np.concatenate(rows) if rows else np.zeros((0, len(m.blocks)), dtype=np.int64)
    return Dataset(source.schema, idx[:, :-1], idx[:, -1])


# -- persistence ---------------------------------------------------------------

def _code_version() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def save_model(m: VaeModel, path: os.PathLike | str, cfg: Optional[TrainConfig] = None) -> Path:
    """Write ``path`` (binary tensors) and ``path``.header.yaml; returns the header path."""
    path = Path(path)
    write_checkpoint(m.params(), path)
    header = {
        "format": "synthbias-vae/1",
        "schema_hash": m.schema_digest,
        "classes": m.classes,
        "latent": m.latent,
        "temperature": float(m.temperature),
        "blocks": [list(b) for b in m.blocks],
        "encoder": [[l.shape[0], l.shape[1], l.activation] for l in m.encoder],
        "decoder": [[l.shape[0], l.shape[1], l.activation] for l in m.decoder],
        "config": cfg.to_dict() if cfg else None,
        "code_version": _code_version(),
    }
    hpath = path.with_name(path.name + ".header.yaml")
    with open(hpath, "w", encoding="utf-8") as fh:
        yaml.safe_dump(header, fh, sort_keys=False)
    return hpath


def load_model(path: os.PathLike | str) -> VaeModel:
    path = Path(path)
    with open(path.with_name(path.name + ".header.yaml"), encoding="utf-8") as fh:
        h = yaml.safe_load(fh)
    values = read_checkpoint(path)
    blocks = [tuple(b) for b in h["blocks"]]

    def build(part, spec):
        layers = []
        for i, (_, _, act) in enumerate(spec):
            layers.append(DenseLayer(values[f"{part}.{i}.W"], values[f"{part}.{i}.b"], act,
                                     blocks if act == "softmax" else None))
        return layers

    return VaeModel(build("encoder", h["encoder"]), build("decoder", h["decoder"]),
                    int(h["classes"]), int(h["latent"]), float(h["temperature"]), blocks,
                    h["schema_hash"])


def clone(m: VaeModel) -> VaeModel:
    return copy.deepcopy(m)
