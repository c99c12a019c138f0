from __future__ import annotations

import sys
from importlib import resources
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from synthbias.schema import (  # noqa: E402
    ColumnSpec,
    Dataset,
    LabelSpec,
    Schema,
    SensitiveSpec,
    load_schema,
    parse_table,
    subsample,
)

DATA = Path(str(resources.files("synthbias") / "data"))

ACCEPTANCE_LINES: list[str] = []


def make_schema(cards, sensitive_col=0):
    cols = []
    for j, c in enumerate(cards):
        c = 2 if j == sensitive_col else c
        cols.append(ColumnSpec(f"a{j}", "categorical", [f"v{i}" for i in range(c)]))
    sens = SensitiveSpec(f"a{sensitive_col}", "v0", "v1") if sensitive_col is not None else None
    return Schema(cols, LabelSpec("y"), sens)


def random_dataset(rng, n, cards, sensitive_col=0, p_pos=0.4):
    schema = make_schema(cards, sensitive_col)
    rows = np.stack([rng.integers(0, c, n) for c in schema.cardinalities], axis=1)
    labels = (rng.random(n) < p_pos).astype(int)
    return Dataset(schema, rows, labels)


@pytest.fixture(scope="session")
def census_full() -> Dataset:
    return parse_table(DATA / "adult.csv.gz", load_schema(DATA / "adult_schema.yaml"))


@pytest.fixture(scope="session")
def census5k(census_full) -> Dataset:
    return subsample(census_full, 5000, 1234)


@pytest.fixture(scope="session")
def census200(census_full) -> Dataset:
    return subsample(census_full, 200, 99)


@pytest.fixture
def acceptance():
    """Record one pass/fail line for the terminal summary."""

    def record(number: int, passed: bool, detail: str) -> None:
        ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)


def small_vae_gradcheck(seed=0, records=20, samples=200):
    """Max relative gradient error of a C=4, D=3 model on ``records`` random rows.

    Returns ``(error, coordinates_checked)``.  Biases get a small random offset
    so relu units are not sitting exactly on their kink.
    """
    from synthbias.nn import gradient_check
    from synthbias.schema import one_hot_encode
    from synthbias.vae import TrainConfig, VaeModel, gumbel_noise, loss_and_grads

    rng = np.random.default_rng(seed)
    d = random_dataset(rng, records, [2, 3, 4, 3])
    cfg = TrainConfig(classes=4, latent=3, encoder_hidden=(16, 8), decoder_hidden=(8, 16), seed=seed)
    m = VaeModel.init(d.schema, cfg)
    for p in m.params().values():
        if p.ndim == 1:
            p[:] = rng.normal(scale=0.1, size=p.shape)
    x = one_hot_encode(d, with_label=True).values
    noise = gumbel_noise((records, 12), rng)
    _, grads = loss_and_grads(m, x, noise, tau=0.7)
    params = m.params()

    def loss(_):
        return loss_and_grads(m, x, noise, tau=0.7, grads=False)[0].total

    n = min(samples, sum(p.size for p in params.values()))
    return gradient_check(loss, params, grads, samples=samples, seed=seed), n
