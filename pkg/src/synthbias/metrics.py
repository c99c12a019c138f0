"""Dataset-level group and individual fairness statistics."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .schema import Dataset

METRIC_NAMES = (
    "stat_parity_diff",
    "disparate_impact",
    "consistency",
    "base_rate",
    "num_pos",
    "num_neg",
)


class MetricError(ValueError):
    """A metric is undefined on the given dataset."""


@dataclass(frozen=True)
class BiasReport:
    stat_parity_diff: float
    disparate_impact: float  # math.inf when the privileged group has no positives
    consistency: float
    base_rate: float
    num_pos: int
    num_neg: int
    k: int

    def as_dict(self) -> dict:
        return asdict(self)

    def values(self) -> list[float]:
        return [float(getattr(self, m)) for m in METRIC_NAMES]

    def to_text(self) -> str:
        """Flat ``key=value`` lines."""
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.as_dict().items())


def _fmt(v) -> str:
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return str(v)


def _group_rates(d: Dataset) -> tuple[float, float]:
    b, w = d.sensitive_mask()
    nb, nw = int(b.sum()), int(w.sum())
    if nb == 0:
        raise MetricError("unprivileged group is empty")
    if nw == 0:
        raise MetricError("privileged group is empty")
    return int(d.labels[b].sum()) / nb, int(d.labels[w].sum()) / nw


def statistical_parity_difference(d: Dataset) -> float:
    """Pr(y=1 | unprivileged) - Pr(y=1 | privileged)."""
    pb, pw = _group_rates(d)
    return pb - pw


def disparate_impact(d: Dataset) -> float:
    """Pr(y=1 | unprivileged) / Pr(y=1 | privileged); ``inf`` for x/0 with x > 0."""
    pb, pw = _group_rates(d)
    if pw == 0.0:
        if pb == 0.0:
            raise MetricError("disparate impact is 0/0: no positives in either group")
        return math.inf
    return pb / pw


def knn_indices(d: Dataset, k: int, chunk: int = 512) -> np.ndarray:
    """k nearest neighbours of every row in one-hot attribute space.

    Squared Euclidean distance between one-hot rows is twice the number of
    mismatching attributes, so distances are compared as exact integers.
    The row itself is excluded; ties go to the lower row index.
    """
    n = len(d)
    if n <= k:
        raise MetricError(f"consistency needs N > k (N={n}, k={k})")
    rows = d.rows
    out = np.empty((n, k), dtype=np.int64)
    idx = np.arange(n, dtype=np.int64)
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        mism = (rows[start:stop, None, :] != rows[None, :, :]).sum(axis=2).astype(np.int64)
        key = mism * n + idx[None, :]
        key[np.arange(stop - start), idx[start:stop]] = np.iinfo(np.int64).max
        part = np.argpartition(key, k - 1, axis=1)[:, :k]
        order = np.take_along_axis(key, part, axis=1).argsort(axis=1)
        out[start:stop] = np.take_along_axis(part, order, axis=1)
    return out


def consistency(d: Dataset, k: int = 5, form: str = "mean") -> float:
    """kNN label consistency, ``1 - mean_i |y_i - mean_{j in kNN(i)} y_j|``.

    ``form="sum"`` evaluates the variant that subtracts the neighbour label
    *sum* and divides by N*k instead; it is kept only for comparison, since
    perfectly agreeing neighbours score 1/k rather than 1.
    """
    if k < 1:
        raise MetricError("k must be positive")
    nbrs = knn_indices(d, k)
    y = d.labels.astype(np.float64)
    if form == "mean":
        dev = np.abs(y - y[nbrs].mean(axis=1))
        return float(1.0 - dev.sum() / len(d))
    if form == "sum":
        dev = np.abs(y - y[nbrs].sum(axis=1))
        return float(1.0 - dev.sum() / (len(d) * k))
    raise ValueError(f"unknown consistency form {form!r}")


def base_counts(d: Dataset) -> tuple[int, int, float]:
    num_pos = int(d.labels.sum())
    num_neg = len(d) - num_pos
    return num_pos, num_neg, (num_pos / len(d) if len(d) else 0.0)


def full_report(d: Dataset, k: int = 5) -> BiasReport:
    def run(name, fn, *args):
        try:
            return fn(*args)
        except MetricError as exc:
            raise MetricError(f"{name}: {exc}") from exc

    num_pos, num_neg, rate = base_counts(d)
    return BiasReport(
        stat_parity_diff=run("stat_parity_diff", statistical_parity_difference, d),
        disparate_impact=run("disparate_impact", disparate_impact, d),
        consistency=run("consistency", consistency, d, k),
        base_rate=rate,
        num_pos=num_pos,
        num_neg=num_neg,
        k=k,
    )
