"""Conditional subsampling that sets group base rates and bias on purpose."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import yaml

from .schema import Dataset

# cell order used by SkewSpec.target_counts and the flattened count table
CELLS = ("b_pos", "b_neg", "w_pos", "w_neg")

EXTREME_POS_FRACTION = 0.001


class SkewError(ValueError):
    pass


@dataclass(frozen=True)
class SkewSpec:
    name: str
    target_counts: tuple[int, int, int, int]
    seed: int = 0

    def __post_init__(self):
        counts = tuple(int(c) for c in self.target_counts)
        if len(counts) != 4 or min(counts) < 0:
            raise SkewError(f"{self.name}: need four non-negative cell counts")
        if counts[0] + counts[1] == 0 or counts[2] + counts[3] == 0:
            raise SkewError(f"{self.name}: each sensitive group needs at least one row")
        object.__setattr__(self, "target_counts", counts)

    @property
    def total(self) -> int:
        return sum(self.target_counts)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": int(self.seed),
            "counts": dict(zip(CELLS, self.target_counts)),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SkewSpec":
        counts = doc["counts"]
        if isinstance(counts, dict):
            counts = [counts[c] for c in CELLS]
        return cls(str(doc["name"]), tuple(counts), int(doc.get("seed", 0)))


def load_specs(path: os.PathLike | str) -> list[SkewSpec]:
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    items = doc["variations"] if isinstance(doc, dict) and "variations" in doc else doc
    if isinstance(items, dict):
        items = [items]
    return [SkewSpec.from_dict(x) for x in items]


def save_specs(specs: list[SkewSpec], path: os.PathLike | str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump({"variations": [s.to_dict() for s in specs]}, fh, sort_keys=False)


def conditional_counts(d: Dataset) -> np.ndarray:
    """2x2 table: rows (unprivileged, privileged), columns (y=1, y=0)."""
    b, w = d.sensitive_mask()
    pos = d.labels == 1
    return np.array(
        [
            [int((b & pos).sum()), int((b & ~pos).sum())],
            [int((w & pos).sum()), int((w & ~pos).sum())],
        ],
        dtype=np.int64,
    )


def _cell_members(d: Dataset) -> list[np.ndarray]:
    b, w = d.sensitive_mask()
    pos = d.labels == 1
    return [np.flatnonzero(m) for m in (b & pos, b & ~pos, w & pos, w & ~pos)]


def apply_skew(d: Dataset, spec: SkewSpec) -> Dataset:
    """Draw exactly ``spec.target_counts`` rows per (S, Y) cell without replacement.

    Each cell is shuffled with a generator seeded from ``spec.seed``; the
    selected rows keep their source order.
    """
    members = _cell_members(d)
    for cell, want, have in zip(CELLS, spec.target_counts, members):
        if want > len(have):
            raise SkewError(
                f"{spec.name}: cell {cell} needs {want} rows but only {len(have)} available"
            )
    rng = np.random.default_rng(spec.seed)
    chosen = [rng.permutation(have)[:want] for want, have in zip(spec.target_counts, members)]
    return d.take(np.sort(np.concatenate(chosen)))


def _rate_target(pos: int, neg: int, rate: float) -> int:
    """Largest positive count <= pos giving a rate <= ``rate`` alongside ``neg`` negatives."""
    if rate >= 1.0:
        return pos
    return min(pos, int(np.floor(neg * rate / (1.0 - rate) + 1e-9)))


def standard_specs(d: Dataset, seed: int) -> list[SkewSpec]:
    """Five variations: full, balanced, 2:1 conditional rate, two extreme-skew sizes."""
    (b1, b0), (w1, w0) = conditional_counts(d).tolist()
    if min(b1 + b0, w1 + w0) == 0:
        raise SkewError("both sensitive groups must be present in the source")
    rb = b1 / (b1 + b0)
    rw = w1 / (w1 + w0)

    specs = [SkewSpec("full", (b1, b0, w1, w0), seed)]

    m = min(b1, b0, w1, w0)
    if m == 0:
        raise SkewError("balanced variation infeasible: a (S, Y) cell is empty")
    specs.append(SkewSpec("balanced", (m, m, m, m), seed))

    # unprivileged positive rate at half the privileged one, by dropping positives
    if rb * 2 <= rw:
        mod = (b1, b0, _rate_target(w1, w0, 2 * rb), w0)
    else:
        mod = (_rate_target(b1, b0, rw / 2), b0, w1, w0)
    specs.append(SkewSpec("moderate", mod, seed))

    # extreme: unprivileged positives at most 0.1% of the unprivileged group;
    # the large variant is exactly twice the small one, cell by cell
    small_group = (b1 + b0) // 2
    while small_group > 0:
        sb1 = int(np.floor(small_group * EXTREME_POS_FRACTION))
        if 2 * (small_group - sb1) <= b0 and 2 * sb1 <= b1:
            break
        small_group -= 1
    if small_group == 0 or (w1 // 2 + w0 // 2) == 0:
        raise SkewError("source too small for the extreme-skew variations")
    small = (sb1, small_group - sb1, w1 // 2, w0 // 2)
    specs.append(SkewSpec("extreme_large", tuple(2 * c for c in small), seed))
    specs.append(SkewSpec("extreme_small", small, seed))
    return specs


SUITES = {"standard": standard_specs}


def standard_variation_suite(d: Dataset, seed: int) -> list[tuple[str, Dataset]]:
    return [(s.name, apply_skew(d, s)) for s in standard_specs(d, seed)]
