"""Stage-by-stage pipeline over a run directory.

Every stage reads its inputs from files in the run directory and writes its
outputs back there, then appends one lineage event:

    data/source.csv, data/schema.yaml         ingest
    variations/specs.yaml, variations/*.csv   skew
    model/vae.bin (+ header), model/trace.csv train
    synthetic/*.csv                           synthesize
    report/{report.json,metrics.csv,...}      evaluate
    lineage.jsonl                             every stage
"""
from __future__ import annotations

import hashlib
import logging
import os
import time
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional

import yaml

from . import evaluate as ev
from .lineage import LineageLog
from .schema import (
    Dataset,
    SensitiveSpec,
    load_schema,
    parse_table,
    save_schema,
    subsample,
    write_table,
)
from .skew import SUITES, apply_skew, load_specs, save_specs
from .vae import TrainConfig, load_model, save_model, schema_hash, synthesize, train

log = logging.getLogger("synthbias")

OUT_ENV = "SYNTHBIAS_OUT"
BUILTIN = "builtin:"
STAGES = ("ingest", "skew", "train", "synthesize", "evaluate")


class ConfigError(ValueError):
    pass


def derive_seed(master: int, stage: str) -> int:
    """Sub-seed = first 8 bytes (little-endian) of SHA-256("<master>:<stage>")."""
    return int.from_bytes(hashlib.sha256(f"{master}:{stage}".encode()).digest()[:8], "little")


def resolve_path(value: str, base: Path) -> Path:
    if value.startswith(BUILTIN):
        return Path(str(resources.files("synthbias") / "data" / value[len(BUILTIN):]))
    p = Path(value)
    return p if p.is_absolute() else base / p


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunConfig:
    dataset: Path
    schema: Optional[Path]
    out: Path
    seed: int = 0
    suite: str = "standard"
    k: int = 5
    mode: str = "reconstruction"
    subset: Optional[int] = None
    delimiter: str = ","
    label: Optional[str] = None
    sensitive: Optional[SensitiveSpec] = None
    train: TrainConfig = field(default_factory=TrainConfig)
    tsne: dict = field(default_factory=lambda: {"max_per_source": 500, "perplexity": 30.0, "iters": 500})
    echo: dict = field(default_factory=dict)

    def stage_seed(self, stage: str) -> int:
        return derive_seed(self.seed, stage)


def load_config(
    path: Optional[str] = None,
    *,
    seed: Optional[int] = None,
    out: Optional[str] = None,
    suite: Optional[str] = None,
    k: Optional[int] = None,
    mode: Optional[str] = None,
) -> RunConfig:
    """Parse a YAML run config; command-line overrides win over file values."""
    doc: dict = {}
    base = Path.cwd()
    if path is not None:
        cfg_path = resolve_path(path, Path.cwd())
        if not cfg_path.exists():
            raise ConfigError(f"config file not found: {path}")
        base = cfg_path.parent
        try:
            doc = yaml.safe_load(cfg_path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    overrides = {"seed": seed, "out": out, "suite": suite, "k": k, "mode": mode}
    doc.update({key: v for key, v in overrides.items() if v is not None})

    if "dataset" not in doc:
        raise ConfigError("config needs a dataset path")
    dataset = resolve_path(str(doc["dataset"]), base)
    if not dataset.exists():
        raise ConfigError(f"dataset not found: {doc['dataset']}")
    schema = None
    if doc.get("schema"):
        schema = resolve_path(str(doc["schema"]), base)
        if not schema.exists():
            raise ConfigError(f"schema not found: {doc['schema']}")

    suite_name = str(doc.get("suite", "standard"))
    if suite_name not in SUITES:
        spec_path = resolve_path(suite_name, base)
        if not spec_path.exists():
            raise ConfigError(f"unknown suite {suite_name!r} (and no such spec file)")
        suite_name = str(spec_path)

    out_value = str(doc.get("out", "runs/default"))
    out_path = Path(out_value)
    if not out_path.is_absolute():
        out_path = Path(os.environ.get(OUT_ENV, Path.cwd())) / out_path

    sens = doc.get("sensitive")
    try:
        sensitive = (
            SensitiveSpec(str(sens["column"]), str(sens["unprivileged"]), str(sens["privileged"]))
            if sens
            else None
        )
        train_cfg = TrainConfig.from_dict(doc.get("train"))
        seed_value = int(doc.get("seed", 0))
        k_value = int(doc.get("k", 5))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    if not 0 <= seed_value < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    if k_value < 1:
        raise ConfigError("k must be positive")
    mode_value = str(doc.get("mode", "reconstruction"))
    if mode_value not in ("reconstruction", "prior"):
        raise ConfigError(f"unknown synthesis mode {mode_value!r}")
    tsne = {"max_per_source": 500, "perplexity": 30.0, "iters": 500}
    tsne.update(doc.get("tsne") or {})
    subset = doc.get("subset")

    cfg = RunConfig(
        dataset=dataset,
        schema=schema,
        out=out_path,
        seed=seed_value,
        suite=suite_name,
        k=k_value,
        mode=mode_value,
        subset=int(subset) if subset is not None else None,
        delimiter=str(doc.get("delimiter", ",")),
        label=doc.get("label"),
        sensitive=sensitive,
        train=train_cfg,
        tsne=tsne,
    )
    cfg.train = replace(train_cfg, seed=cfg.stage_seed("train"))
    # the echo deliberately omits the output directory so reports do not depend on it
    cfg.echo = {
        "dataset": str(doc["dataset"]),
        "dataset_sha256": file_digest(dataset),
        "schema": str(doc["schema"]) if doc.get("schema") else None,
        "subset": cfg.subset,
        "suite": str(doc.get("suite", "standard")),
        "k": cfg.k,
        "mode": cfg.mode,
        "master_seed": cfg.seed,
        "seeds": {s: cfg.stage_seed(s) for s in ("subset", "skew", "train", "tsne")},
        "synthesis_seed_rule": "derive_seed(master_seed, 'synthesize:<variation>')",
        "train": cfg.train.to_dict(),
        "tsne": tsne,
    }
    return cfg


class Pipeline:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = cfg.out
        self._log: Optional[LineageLog] = None

    # paths
    @property
    def source_csv(self) -> Path:
        return self.out / "data" / "source.csv"

    @property
    def schema_yaml(self) -> Path:
        return self.out / "data" / "schema.yaml"

    @property
    def specs_yaml(self) -> Path:
        return self.out / "variations" / "specs.yaml"

    @property
    def model_path(self) -> Path:
        return self.out / "model" / "vae.bin"

    @property
    def report_dir(self) -> Path:
        return self.out / "report"

    @property
    def lineage(self) -> LineageLog:
        if self._log is None:
            self.out.mkdir(parents=True, exist_ok=True)
            self._log = LineageLog(self.out / "lineage.jsonl")
        return self._log

    def _require(self, *paths: Path) -> None:
        for p in paths:
            if not p.exists():
                raise ConfigError(f"missing intermediate {p}; run the earlier stage first")

    def source(self) -> Dataset:
        self._require(self.source_csv, self.schema_yaml)
        return parse_table(self.source_csv, load_schema(self.schema_yaml))

    def variations(self) -> list[tuple[str, Dataset]]:
        self._require(self.specs_yaml)
        schema = load_schema(self.schema_yaml)
        return [
            (s.name, parse_table(self.out / "variations" / f"{s.name}.csv", schema))
            for s in load_specs(self.specs_yaml)
        ]

    # stages
    def ingest(self) -> Dataset:
        cfg = self.cfg
        schema = load_schema(cfg.schema) if cfg.schema else None
        d = parse_table(cfg.dataset, schema, label=cfg.label, sensitive=cfg.sensitive,
                        delimiter=cfg.delimiter)
        d.schema.require_sensitive()
        read, dropped = len(d), d.dropped
        if cfg.subset is not None:
            d = subsample(d, cfg.subset, cfg.stage_seed("subset"))
        (self.out / "data").mkdir(parents=True, exist_ok=True)
        write_table(d, self.source_csv)
        save_schema(d.schema, self.schema_yaml)
        self.lineage.append("ingest", {
            "dataset_sha256": file_digest(cfg.dataset),
            "rows_read": read,
            "rows_dropped_missing": dropped,
            "rows_kept": len(d),
            "schema_hash": schema_hash(d.schema),
            "output_sha256": file_digest(self.source_csv),
        })
        log.info("ingest: %d rows kept (%d dropped for missing values)", len(d), dropped)
        return d

    def skew(self) -> list[tuple[str, Dataset]]:
        d = self.source()
        seed = self.cfg.stage_seed("skew")
        if self.cfg.suite in SUITES:
            specs = SUITES[self.cfg.suite](d, seed)
        else:
            specs = load_specs(self.cfg.suite)
        (self.out / "variations").mkdir(parents=True, exist_ok=True)
        save_specs(specs, self.specs_yaml)
        out = []
        digests = {}
        for s in specs:
            v = apply_skew(d, s)
            path = self.out / "variations" / f"{s.name}.csv"
            write_table(v, path)
            digests[s.name] = file_digest(path)
            out.append((s.name, v))
            log.info("skew: %s -> %d rows %s", s.name, len(v), list(s.target_counts))
        self.lineage.append("skew", {
            "suite": self.cfg.echo.get("suite", self.cfg.suite),
            "specs": [s.to_dict() for s in specs],
            "outputs_sha256": digests,
        })
        return out

    def train(self):
        d = self.source()
        tcfg = self.cfg.train
        model, trace = train(d, tcfg, log=log.debug)
        (self.out / "model").mkdir(parents=True, exist_ok=True)
        save_model(model, self.model_path, tcfg)
        (self.out / "model" / "trace.csv").write_text(trace.to_csv(), encoding="utf-8")
        self.lineage.append("train", {
            "config": tcfg.to_dict(),
            "epochs_run": len(trace),
            "best_epoch": trace.best_epoch,
            "initial_train_total": trace.initial_train_total,
            "final_train_total": trace.train_total[-1] if len(trace) else None,
            "checkpoint_sha256": file_digest(self.model_path),
        })
        log.info("train: %d epochs, best epoch %d", len(trace), trace.best_epoch)
        return model, trace

    def synthesize(self) -> list[tuple[str, Dataset]]:
        self._require(self.model_path)
        model = load_model(self.model_path)
        (self.out / "synthetic").mkdir(parents=True, exist_ok=True)
        out, digests = [], {}
        for name, real in self.variations():
            syn = synthesize(model, real, len(real), self.cfg.mode, self.cfg.stage_seed(f"synthesize:{name}"))
            path = self.out / "synthetic" / f"{name}.csv"
            write_table(syn, path)
            digests[name] = file_digest(path)
            out.append((name, syn))
        self.lineage.append("synthesize", {"mode": self.cfg.mode, "outputs_sha256": digests})
        log.info("synthesize: %d synthetic datasets (%s mode)", len(out), self.cfg.mode)
        return out

    def evaluate(self):
        started = time.perf_counter()
        variations = self.variations()
        schema = load_schema(self.schema_yaml)
        synthetic = {}
        for name, _ in variations:
            path = self.out / "synthetic" / f"{name}.csv"
            self._require(path)
            synthetic[name] = parse_table(path, schema)
        run, cm = ev.run_experiment(variations, lambda name, real: synthetic[name], self.cfg.k)
        full_name = "full" if "full" in synthetic else variations[0][0]
        real_full = dict(variations)[full_name]
        t = dict(self.cfg.tsne)
        max_per = int(t.pop("max_per_source", 500))
        points = ev.tsne_points(real_full, synthetic[full_name], max_per, self.cfg.stage_seed("tsne"),
                                perplexity=float(t.get("perplexity", 30.0)), iters=int(t.get("iters", 500)))
        files = ev.emit(run, cm, self.report_dir, self.cfg.echo, points)
        self.lineage.append("evaluate", {
            "k": self.cfg.k,
            "real_vs_synthetic_r": {m: (None if r != r else r) for m, r in cm.real_vs_synthetic().items()},
            "reports_sha256": {p.name: file_digest(p) for p in files},
            "runtime_seconds": round(time.perf_counter() - started, 3),
        })
        log.info("evaluate: reports written to %s", self.report_dir)
        return run, cm

    def run(self, stage: Optional[str] = None):
        if stage is not None:
            if stage not in STAGES:
                raise ConfigError(f"unknown stage {stage!r}; choose from {', '.join(STAGES)}")
            return getattr(self, stage)()
        result = None
        for s in STAGES:
            result = getattr(self, s)()
        return result
