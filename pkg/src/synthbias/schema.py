"""Column schemas, categorical tables, one-hot encoding and train/val/test splits."""
from __future__ import annotations

import csv
import gzip
import io
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import yaml

MISSING = "?"


class SchemaError(ValueError):
    """Invalid schema or schema/data mismatch."""


class DataError(ValueError):
    """Input data cannot be turned into a valid Dataset."""


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str
    domain: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "domain", tuple(self.domain))
        if self.kind not in ("categorical", "ordinal"):
            raise SchemaError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if len(self.domain) < 2:
            raise SchemaError(f"column {self.name!r}: cardinality must be >= 2")
        if len(set(self.domain)) != len(self.domain):
            raise SchemaError(f"column {self.name!r}: duplicate category values")

    @property
    def cardinality(self) -> int:
        return len(self.domain)

    def index(self, value: str) -> int:
        try:
            return self.domain.index(value)
        except ValueError:
            raise DataError(f"column {self.name!r}: unknown category {value!r}") from None


@dataclass(frozen=True)
class LabelSpec:
    """Binary label column; ``negative`` encodes to 0, ``positive`` to 1."""

    name: str
    negative: str = "0"
    positive: str = "1"

    def __post_init__(self):
        if self.negative == self.positive:
            raise SchemaError("label values must differ")


@dataclass(frozen=True)
class SensitiveSpec:
    column: str
    unprivileged: str
    privileged: str


@dataclass(frozen=True)
class Schema:
    columns: tuple[ColumnSpec, ...]
    label: LabelSpec
    sensitive: Optional[SensitiveSpec] = None

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError("column names must be unique")
        if self.label.name in names:
            raise SchemaError(f"label {self.label.name!r} also listed as an attribute")
        if self.sensitive is not None:
            col = self.column(self.sensitive.column)
            pair = {self.sensitive.unprivileged, self.sensitive.privileged}
            if col.cardinality != 2 or pair != set(col.domain):
                raise SchemaError(
                    f"sensitive column {col.name!r} must be binary with domain "
                    f"{{unprivileged, privileged}}; got {list(col.domain)}"
                )

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def cardinalities(self) -> list[int]:
        return [c.cardinality for c in self.columns]

    def column(self, name: str) -> ColumnSpec:
        for c in self.columns:
            if c.name == name:
                return c
        raise SchemaError(f"no column named {name!r}")

    def position(self, name: str) -> int:
        return self.names.index(self.column(name).name)

    def with_sensitive(self, sensitive: Optional[SensitiveSpec]) -> "Schema":
        return Schema(self.columns, self.label, sensitive)

    def swapped(self) -> "Schema":
        """Same schema with the unprivileged/privileged roles exchanged."""
        s = self.require_sensitive()
        return self.with_sensitive(SensitiveSpec(s.column, s.privileged, s.unprivileged))

    def require_sensitive(self) -> SensitiveSpec:
        if self.sensitive is None:
            raise SchemaError("no sensitive attribute designated")
        return self.sensitive

    def to_dict(self) -> dict:
        out = {
            "columns": [
                {"name": c.name, "kind": c.kind, "domain": list(c.domain)}
                for c in self.columns
            ],
            "label": {
                "name": self.label.name,
                "negative": self.label.negative,
                "positive": self.label.positive,
            },
        }
        if self.sensitive is not None:
            out["sensitive"] = {
                "column": self.sensitive.column,
                "unprivileged": self.sensitive.unprivileged,
                "privileged": self.sensitive.privileged,
            }
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "Schema":
        try:
            columns = [
                ColumnSpec(c["name"], c.get("kind", "categorical"), [str(v) for v in c["domain"]])
                for c in doc["columns"]
            ]
            lab = doc["label"]
            label = LabelSpec(lab["name"], str(lab.get("negative", "0")), str(lab.get("positive", "1")))
            sens = doc.get("sensitive")
            sensitive = (
                SensitiveSpec(sens["column"], str(sens["unprivileged"]), str(sens["privileged"]))
                if sens
                else None
            )
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed schema document: {exc}") from exc
        return cls(columns, label, sensitive)


def load_schema(path: os.PathLike | str) -> Schema:
    with open(path, encoding="utf-8") as fh:
        return Schema.from_dict(yaml.safe_load(fh))


def save_schema(schema: Schema, path: os.PathLike | str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(schema.to_dict(), fh, sort_keys=False, allow_unicode=True)


@dataclass
class Dataset:
    """Category-index rows plus binary labels over a fixed schema.

    ``rows[i, j]`` indexes ``schema.columns[j].domain``; ``labels[i]`` is 0/1.
    """

    schema: Schema
    rows: np.ndarray
    labels: np.ndarray
    dropped: int = field(default=0, compare=False)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64).reshape(-1, len(self.schema.columns))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.rows.shape[0] != self.labels.shape[0]:
            raise DataError("rows and labels differ in length")
        if self.labels.size and not np.isin(self.labels, (0, 1)).all():
            raise DataError("labels must be 0 or 1")
        card = np.asarray(self.schema.cardinalities, dtype=np.int64)
        if self.rows.size and ((self.rows < 0).any() or (self.rows >= card).any()):
            raise DataError("category index outside its column domain")

    def __len__(self) -> int:
        return self.rows.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.schema == other.schema
            and np.array_equal(self.rows, other.rows)
            and np.array_equal(self.labels, other.labels)
        )

    @property
    def n(self) -> int:
        return len(self)

    def take(self, index: Sequence[int] | np.ndarray) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.schema, self.rows[index], self.labels[index])

    def sensitive_mask(self) -> tuple[np.ndarray, np.ndarray]:
        """Boolean masks (unprivileged, privileged) over rows."""
        s = self.schema.require_sensitive()
        col = self.schema.column(s.column)
        j = self.schema.position(s.column)
        b = self.rows[:, j] == col.index(s.unprivileged)
        return b, ~b

    def with_schema(self, schema: Schema) -> "Dataset":
        if schema.columns != self.schema.columns or schema.label != self.schema.label:
            raise SchemaError("replacement schema must share columns and label")
        return Dataset(schema, self.rows, self.labels)


def _open_text(path: Path):
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8", newline="")
    return open(path, encoding="utf-8", newline="")


def _binary_label(name: str, values: Iterable[str], positive: Optional[str]) -> LabelSpec:
    seen = sorted(set(values))
    if len(seen) > 2:
        raise DataError(f"label column {name!r} is not binary: {seen[:5]}")
    if positive is not None:
        others = [v for v in seen if v != positive]
        if len(others) > 1:
            raise DataError(f"label column {name!r} is not binary: {seen}")
        negative = others[0] if others else ("0" if positive != "0" else "1")
        return LabelSpec(name, negative, positive)
    if set(seen) <= {"0", "1"}:
        return LabelSpec(name, "0", "1")
    if len(seen) < 2:
        raise DataError(f"label column {name!r} has a single value; pass the positive value")
    # lexicographically larger value is the positive class
    return LabelSpec(name, seen[0], seen[1])


def parse_table(
    path: os.PathLike | str,
    schema: Optional[Schema] = None,
    *,
    label: Optional[str] = None,
    positive: Optional[str] = None,
    sensitive: Optional[SensitiveSpec] = None,
    kinds: Optional[dict[str, str]] = None,
    delimiter: str = ",",
    drop_missing: bool = True,
) -> Dataset:
    """Read a delimited text table with a header row into a Dataset.

    With a ``schema`` the header must name exactly the schema columns plus the
    label (in any order) and every value must be in its column domain.  Without
    one, domains are the sorted observed values, the last header column is the
    label unless ``label`` names another, and ``sensitive`` (if given) is
    attached.  Rows containing ``?`` are dropped when ``drop_missing``; the
    count is kept on ``Dataset.dropped``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such data file: {path}")
    with _open_text(path) as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError("missing header row") from None
        records = [[v.strip() for v in rec] for rec in reader if rec]
    if len(set(header)) != len(header):
        raise DataError("duplicate header names")
    for i, rec in enumerate(records):
        if len(rec) != len(header):
            raise DataError(f"line {i + 2}: expected {len(header)} fields, got {len(rec)}")
    dropped = 0
    if drop_missing:
        kept = [r for r in records if MISSING not in r]
        dropped = len(records) - len(kept)
        records = kept
    if not records:
        raise DataError("empty dataset")

    if schema is not None:
        expected = set(schema.names) | {schema.label.name}
        if set(header) != expected:
            raise SchemaError(
                f"header {header} does not match schema columns {schema.names} + label"
            )
        if sensitive is not None:
            schema = schema.with_sensitive(sensitive)
    else:
        label_name = label if label is not None else header[-1]
        if label_name not in header:
            raise DataError(f"label column {label_name!r} not in header")
        li = header.index(label_name)
        lab = _binary_label(label_name, (r[li] for r in records), positive)
        kinds = kinds or {}
        cols = []
        for j, name in enumerate(header):
            if name == label_name:
                continue
            dom = sorted({r[j] for r in records})
            if len(dom) < 2:
                raise DataError(f"column {name!r} is constant; cardinality must be >= 2")
            cols.append(ColumnSpec(name, kinds.get(name, "categorical"), dom))
        schema = Schema(cols, lab, sensitive)

    pos = [header.index(n) for n in schema.names]
    li = header.index(schema.label.name)
    lookup = [{v: k for k, v in enumerate(c.domain)} for c in schema.columns]
    rows = np.empty((len(records), len(pos)), dtype=np.int64)
    labels = np.empty(len(records), dtype=np.int64)
    lab = schema.label
    for i, rec in enumerate(records):
        for j, p in enumerate(pos):
            try:
                rows[i, j] = lookup[j][rec[p]]
            except KeyError:
                raise DataError(
                    f"line {i + 2}: unknown category {rec[p]!r} in column {schema.names[j]!r}"
                ) from None
        v = rec[li]
        if v == lab.positive:
            labels[i] = 1
        elif v == lab.negative:
            labels[i] = 0
        else:
            raise DataError(f"line {i + 2}: non-binary label value {v!r}")
    return Dataset(schema, rows, labels, dropped=dropped)


def write_table(d: Dataset, path: os.PathLike | str, delimiter: str = ",") -> None:
    """Write ``d`` back out as a delimited table (attributes then label)."""
    doms = [c.domain for c in d.schema.columns]
    lab = (d.schema.label.negative, d.schema.label.positive)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(d.schema.names + [d.schema.label.name])
        for row, y in zip(d.rows.tolist(), d.labels.tolist()):
            w.writerow([doms[j][v] for j, v in enumerate(row)] + [lab[y]])


def subsample(d: Dataset, n: int, seed: int) -> Dataset:
    """Seeded sample of ``n`` rows without replacement, kept in source order."""
    if n >= len(d):
        return d
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(d), size=n, replace=False))
    return d.take(idx)


@dataclass
class EncodedMatrix:
    values: np.ndarray
    blocks: list[tuple[int, int]]

    @property
    def width(self) -> int:
        return sum(w for _, w in self.blocks)


def block_layout(widths: Sequence[int]) -> list[tuple[int, int]]:
    out, off = [], 0
    for w in widths:
        out.append((off, int(w)))
        off += int(w)
    return out


def encoded_blocks(schema: Schema, with_label: bool = False) -> list[tuple[int, int]]:
    widths = list(schema.cardinalities) + ([2] if with_label else [])
    return block_layout(widths)


def one_hot_encode(d: Dataset, with_label: bool = False) -> EncodedMatrix:
    """One-hot encode each attribute; append a 2-wide label block if asked."""
    blocks = encoded_blocks(d.schema, with_label)
    width = sum(w for _, w in blocks)
    values = np.zeros((len(d), width), dtype=np.float64)
    r = np.arange(len(d))
    for j, (off, _) in enumerate(blocks[: len(d.schema.columns)]):
        values[r, off + d.rows[:, j]] = 1.0
    if with_label:
        off = blocks[-1][0]
        values[r, off + d.labels] = 1.0
    return EncodedMatrix(values, blocks)


def decode(
    values: np.ndarray | EncodedMatrix, schema: Schema, with_label: bool = False
) -> np.ndarray | tuple[np.ndarray, np.ndarray]:
    """Blockwise argmax back to category indices (ties go to the lowest index).

    Returns the index rows, or ``(rows, labels)`` when ``with_label``.
    """
    if isinstance(values, EncodedMatrix):
        values = values.values
    values = np.asarray(values, dtype=np.float64)
    blocks = encoded_blocks(schema, with_label)
    if values.ndim != 2 or values.shape[1] != sum(w for _, w in blocks):
        raise SchemaError(
            f"encoded width {values.shape[-1]} does not match schema width "
            f"{sum(w for _, w in blocks)}"
        )
    idx = np.stack([values[:, o : o + w].argmax(axis=1) for o, w in blocks], axis=1)
    if with_label:
        return idx[:, :-1], idx[:, -1]
    return idx


@dataclass
class SplitIndices:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    seed: int


def split(d: Dataset | int, seed: int) -> SplitIndices:
    """Seeded permutation cut into floor(70%) train, floor(10%) validation, rest test."""
    n = d if isinstance(d, int) else len(d)
    if n < 10:
        raise DataError(f"need at least 10 records to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    a = 7 * n // 10
    b = a + n // 10
    return SplitIndices(perm[:a], perm[a:b], perm[b:], seed)
