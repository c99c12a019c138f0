import copy
import dataclasses
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import random_dataset
from synthbias.evaluate import (
    REPORT_FILES,
    EvalError,
    correlation_matrix,
    emit,
    exact_match_rate,
    is_row_permutation,
    pearson,
    run_experiment,
    summary_text,
    tsne_points,
)
from synthbias.metrics import METRIC_NAMES
from synthbias.schema import Dataset
from synthbias.skew import standard_variation_suite


class TestPearson:
    def test_perfect(self):
        assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0, abs=1e-15)
        assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0, abs=1e-15)

    def test_known_value(self):
        assert pearson([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-15)

    def test_too_short_and_flat(self):
        with pytest.raises(EvalError):
            pearson([1, 2], [1, 2])
        with pytest.raises(EvalError, match="variance"):
            pearson([1, 1, 1], [1, 2, 3])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=3, max_size=30))
    def test_matches_oracle(self, pts):
        xs, ys = zip(*pts)
        if np.ptp(xs) < 1e-3 or np.ptp(ys) < 1e-3:
            return
        assert pearson(xs, ys) == pytest.approx(oracles.pearson(xs, ys), abs=1e-9)
        assert pearson(xs, xs) == pytest.approx(1.0, abs=1e-12)


class TestExactMatch:
    def test_bounds(self):
        d = random_dataset(np.random.default_rng(0), 30, [2, 3, 4])
        assert exact_match_rate(d, d) == 1.0
        assert is_row_permutation(d, d.take(np.random.default_rng(1).permutation(30)))
        other = Dataset(d.schema, np.zeros((4, 3), dtype=int), [0, 0, 0, 0])
        assert 0.0 <= exact_match_rate(d, other) <= 1.0
        assert not is_row_permutation(d, other)

    def test_empty_synthetic(self):
        d = random_dataset(np.random.default_rng(0), 5, [2, 3])
        assert exact_match_rate(d, d.take(np.arange(0))) == 0.0


@pytest.fixture(scope="module")
def identity_run(census5k):
    suite = standard_variation_suite(census5k, 5)
    return run_experiment(suite, lambda name, real: real, k=5)


class TestExperiment:
    def test_identity_synthesizer_correlates_perfectly(self, identity_run):
        run, cm = identity_run
        assert len(run.variations) == 5
        assert all(v.row_permutation and v.exact_match_rate == 1.0 for v in run.variations)
        for m, r in cm.real_vs_synthetic().items():
            if not math.isnan(r):
                assert r == pytest.approx(1.0, abs=1e-12), m

    def test_matrix_shape_and_diagonal(self, identity_run):
        _, cm = identity_run
        assert cm.values.shape == (12, 12)
        assert cm.names == [f"{s}:{m}" for s in ("real", "synthetic") for m in METRIC_NAMES]
        np.testing.assert_allclose(cm.values, cm.values.T, equal_nan=True)
        diag = np.diag(cm.values)
        assert np.all((np.abs(diag[~np.isnan(diag)] - 1.0) < 1e-12))

    def test_infinite_values_are_excluded(self, identity_run):
        run = copy.deepcopy(identity_run[0])
        v = run.variations[1]
        v.real = dataclasses.replace(v.real, disparate_impact=math.inf)
        cm = correlation_matrix(run)
        assert cm.excluded["real:disparate_impact|synthetic:disparate_impact"] == 1

    def test_needs_three_variations(self, census200):
        with pytest.raises(EvalError):
            run_experiment([("a", census200), ("b", census200)], lambda n, r: r)

    def test_size_mismatch(self, census200):
        suite = [(str(i), census200) for i in range(3)]
        with pytest.raises(EvalError, match="size"):
            run_experiment(suite, lambda n, r: r.take(np.arange(10)))


def test_emit_writes_report_files(tmp_path, census5k, identity_run):
    suite = standard_variation_suite(census5k, 5)
    run, cm = identity_run
    pts = tsne_points(suite[0][1], suite[1][1], 40, seed=0, perplexity=5, iters=30)
    written = emit(run, cm, tmp_path / "rep", {"seed": 1}, pts)
    assert sorted(p.name for p in written) == sorted(REPORT_FILES)
    doc = json.loads((tmp_path / "rep" / "report.json").read_text())
    assert [v["name"] for v in doc["variations"]] == [n for n, _ in suite]
    assert doc["config"] == {"seed": 1}
    tsne = (tmp_path / "rep" / "tsne.csv").read_text().splitlines()
    assert tsne[0] == "x,y,source" and len(tsne) == 81
    summary = summary_text(run, cm)
    assert "exact match" in summary and "indicative" in summary
    metrics = (tmp_path / "rep" / "metrics.csv").read_text().splitlines()
    assert len(metrics) == 1 + 2 * len(suite)
