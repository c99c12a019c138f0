"""Paired real-vs-synthetic scoring, metric correlations and report files."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .metrics import METRIC_NAMES, BiasReport, full_report
from .schema import Dataset, SchemaError, one_hot_encode
from .tsne import tsne_embed


class EvalError(ValueError):
    pass


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise EvalError("pearson needs two vectors of equal length")
    if x.size < 3:
        raise EvalError("pearson needs at least 3 points")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = math.sqrt(float(dx @ dx))
    sy = math.sqrt(float(dy @ dy))
    if sx == 0.0 or sy == 0.0:
        raise EvalError("zero variance")
    r = float(dx @ dy) / (sx * sy)
    return max(-1.0, min(1.0, r))


def exact_match_rate(real: Dataset, synthetic: Dataset) -> float:
    """Share of synthetic rows (attributes + label) that also occur in ``real``."""
    if real.schema.columns != synthetic.schema.columns or real.schema.label != synthetic.schema.label:
        raise SchemaError("exact-match rate needs datasets over the same schema")
    if len(synthetic) == 0:
        return 0.0
    seen = {tuple(r) for r in np.column_stack([real.rows, real.labels]).tolist()}
    syn = np.column_stack([synthetic.rows, synthetic.labels]).tolist()
    return sum(tuple(r) in seen for r in syn) / len(syn)


def is_row_permutation(a: Dataset, b: Dataset) -> bool:
    if len(a) != len(b):
        return False
    ka = np.column_stack([a.rows, a.labels])
    kb = np.column_stack([b.rows, b.labels])
    return np.array_equal(ka[np.lexsort(ka.T[::-1])], kb[np.lexsort(kb.T[::-1])])


@dataclass
class VariationResult:
    name: str
    real: BiasReport
    synthetic: BiasReport
    exact_match_rate: float
    real_size: int
    synthetic_size: int
    row_permutation: bool = False


@dataclass
class PairedRun:
    variations: list[VariationResult]
    k: int

    def __post_init__(self):
        names = [v.name for v in self.variations]
        if len(set(names)) != len(names):
            raise EvalError("variation names must be unique")

    def vectors(self) -> dict[str, list[float]]:
        out = {}
        for src in ("real", "synthetic"):
            for m in METRIC_NAMES:
                out[f"{src}:{m}"] = [float(getattr(getattr(v, src), m)) for v in self.variations]
        return out


@dataclass
class CorrelationMatrix:
    """Pearson r between every pair of (source, metric) vectors across variations."""

    names: list[str]
    values: np.ndarray  # nan where undefined
    excluded: dict[str, int] = field(default_factory=dict)  # pairs dropped for infinities
    notes: dict[str, str] = field(default_factory=dict)

    def get(self, a: str, b: str) -> float:
        return float(self.values[self.names.index(a), self.names.index(b)])

    def real_vs_synthetic(self) -> dict[str, float]:
        return {m: self.get(f"real:{m}", f"synthetic:{m}") for m in METRIC_NAMES}


def correlation_matrix(run: PairedRun) -> CorrelationMatrix:
    vecs = run.vectors()
    names = list(vecs)
    n = len(names)
    vals = np.full((n, n), np.nan)
    excluded, notes = {}, {}
    for i in range(n):
        for j in range(i, n):
            a = np.asarray(vecs[names[i]])
            b = np.asarray(vecs[names[j]])
            keep = np.isfinite(a) & np.isfinite(b)
            dropped = int((~keep).sum())
            key = f"{names[i]}|{names[j]}"
            if dropped:
                excluded[key] = dropped
            try:
                r = pearson(a[keep], b[keep])
            except EvalError as exc:
                notes[key] = str(exc)
                continue
            vals[i, j] = vals[j, i] = r
    return CorrelationMatrix(names, vals, excluded, notes)


def run_experiment(
    variations: Sequence[tuple[str, Dataset]],
    synthesize: Callable[[str, Dataset], Dataset],
    k: int = 5,
) -> tuple[PairedRun, CorrelationMatrix]:
    """Score each (real, synthetic) pair and correlate the metrics across variations.

    ``synthesize(name, real)`` must return a synthetic dataset of the same size
    and schema as ``real``.
    """
    if len(variations) < 3:
        raise EvalError("need at least 3 variations to correlate")
    results = []
    for name, real in variations:
        syn = synthesize(name, real)
        if len(syn) != len(real):
            raise EvalError(f"{name}: synthetic size {len(syn)} != real size {len(real)}")
        results.append(
            VariationResult(
                name=name,
                real=full_report(real, k),
                synthetic=full_report(syn, k),
                exact_match_rate=exact_match_rate(real, syn),
                real_size=len(real),
                synthetic_size=len(syn),
                row_permutation=is_row_permutation(real, syn),
            )
        )
    run = PairedRun(results, k)
    return run, correlation_matrix(run)


def tsne_points(
    real: Dataset, synthetic: Dataset, max_per_source: int, seed: int, **kw
) -> list[tuple[float, ...]]:
    """Joint t-SNE of (subsampled) real and synthetic one-hot rows, tagged by source."""
    rng = np.random.default_rng(seed)
    parts = []
    for tag, d in (("real", real), ("synthetic", synthetic)):
        idx = np.arange(len(d))
        if len(d) > max_per_source:
            idx = np.sort(rng.choice(len(d), size=max_per_source, replace=False))
        parts.append((tag, one_hot_encode(d.take(idx), with_label=True).values))
    x = np.vstack([p[1] for p in parts])
    res = tsne_embed(x, seed=seed, **kw)
    tags = [t for t, p in parts for _ in range(p.shape[0])]
    return [tuple(map(float, pt)) + (tag,) for pt, tag in zip(res.embedding, tags)]


# -- report files -----------------------------------------------------------------


def _num(v: float):
    """JSON-safe number: inf -> "inf", nan -> None."""
    if isinstance(v, float):
        if math.isnan(v):
            return None
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
    return v


def _csv_num(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return ""
        return "inf" if math.isinf(v) else repr(v)
    return str(v)


def metrics_csv(run: PairedRun) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variation", "source", *METRIC_NAMES, "k", "size"])
    for v in run.variations:
        for src, rep, size in (("real", v.real, v.real_size), ("synthetic", v.synthetic, v.synthetic_size)):
            w.writerow([v.name, src, *(_csv_num(getattr(rep, m)) for m in METRIC_NAMES), rep.k, size])
    return buf.getvalue()


def correlation_csv(cm: CorrelationMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["", *cm.names])
    for i, name in enumerate(cm.names):
        w.writerow([name, *(_csv_num(float(x)) for x in cm.values[i])])
    return buf.getvalue()


def tsne_csv(points) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    dims = len(points[0]) - 1 if points else 2
    w.writerow([*"xyz"[:dims], "source"])
    for p in points:
        w.writerow([*(repr(c) for c in p[:-1]), p[-1]])
    return buf.getvalue()


def report_document(run: PairedRun, cm: CorrelationMatrix, config: dict) -> dict:
    return {
        "config": config,
        "k": run.k,
        "variations": [
            {
                "name": v.name,
                "real_size": v.real_size,
                "synthetic_size": v.synthetic_size,
                "exact_match_rate": v.exact_match_rate,
                "row_permutation": v.row_permutation,
                "real": {k: _num(x) for k, x in v.real.as_dict().items()},
                "synthetic": {k: _num(x) for k, x in v.synthetic.as_dict().items()},
            }
            for v in run.variations
        ],
        "real_vs_synthetic_r": {m: _num(r) for m, r in cm.real_vs_synthetic().items()},
        "correlation": {
            "names": cm.names,
            "matrix": [[_num(float(x)) for x in row] for row in cm.values],
            "excluded_non_finite": cm.excluded,
            "undefined": cm.notes,
        },
    }


def summary_text(run: PairedRun, cm: CorrelationMatrix) -> str:
    lines = ["Real vs synthetic bias-metric retention", ""]
    lines.append(f"variations: {len(run.variations)} (k = {run.k} for consistency)")
    if len(run.variations) < 10:
        lines.append(
            f"note: r is computed over only {len(run.variations)} points; treat it as indicative."
        )
    lines.append("")
    lines.append(f"{'metric':<18}{'r(real, synthetic)':>20}")
    for m, r in cm.real_vs_synthetic().items():
        lines.append(f"{m:<18}{('undefined' if math.isnan(r) else f'{r:+.4f}'):>20}")
    for key, cnt in sorted(cm.excluded.items()):
        a, b = key.split("|")
        if a.startswith("real:") and b == "synthetic:" + a[5:]:
            lines.append(f"  {a[5:]}: {cnt} variation(s) excluded for infinite values")
    lines.append("")
    lines.append(f"{'variation':<16}{'real n':>8}{'synth n':>9}{'exact match':>13}"
                 f"{'DI real':>10}{'DI synth':>10}{'SPD real':>10}{'SPD synth':>11}")
    for v in run.variations:
        lines.append(
            f"{v.name:<16}{v.real_size:>8}{v.synthetic_size:>9}{v.exact_match_rate:>13.4f}"
            f"{v.real.disparate_impact:>10.4f}{v.synthetic.disparate_impact:>10.4f}"
            f"{v.real.stat_parity_diff:>10.4f}{v.synthetic.stat_parity_diff:>11.4f}"
        )
        if v.row_permutation:
            lines.append(f"  warning: synthetic {v.name} is a row permutation of the real data")
    return "\n".join(lines) + "\n"


REPORT_FILES = ("report.json", "metrics.csv", "correlation.csv", "tsne.csv", "summary.txt")


def emit(
    run: PairedRun,
    cm: CorrelationMatrix,
    out_dir,
    config: Optional[dict] = None,
    tsne: Optional[list] = None,
) -> list[Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise EvalError(f"cannot create report directory {out}: {exc}") from exc
    files = {
        "report.json": json.dumps(report_document(run, cm, config or {}), indent=2, sort_keys=False) + "\n",
        "metrics.csv": metrics_csv(run),
        "correlation.csv": correlation_csv(cm),
        "summary.txt": summary_text(run, cm),
    }
    if tsne is not None:
        files["tsne.csv"] = tsne_csv(tsne)
    written = []
    for name, text in files.items():
        p = out / name
        try:
            p.write_text(text, encoding="utf-8")
        except OSError as exc:
            raise EvalError(f"cannot write {p}: {exc}") from exc
        written.append(p)
    return written
