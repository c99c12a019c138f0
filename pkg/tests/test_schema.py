import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import DATA, make_schema, random_dataset
from synthbias.schema import (
    ColumnSpec,
    Dataset,
    DataError,
    LabelSpec,
    Schema,
    SchemaError,
    SensitiveSpec,
    decode,
    load_schema,
    one_hot_encode,
    parse_table,
    save_schema,
    split,
    write_table,
)


def write(tmp_path, text, name="t.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


class TestColumnSpec:
    def test_cardinality(self):
        assert ColumnSpec("c", "ordinal", ["lo", "mid", "hi"]).cardinality == 3

    def test_rejects_single_value(self):
        with pytest.raises(SchemaError):
            ColumnSpec("c", "categorical", ["x"])

    def test_rejects_duplicates(self):
        with pytest.raises(SchemaError):
            ColumnSpec("c", "categorical", ["x", "x"])

    def test_rejects_duplicate_names(self):
        c = ColumnSpec("c", "categorical", ["x", "y"])
        with pytest.raises(SchemaError):
            Schema([c, c], LabelSpec("y"))

    def test_sensitive_must_be_binary(self):
        c = ColumnSpec("c", "categorical", ["x", "y", "z"])
        with pytest.raises(SchemaError):
            Schema([c], LabelSpec("lab"), SensitiveSpec("c", "x", "y"))


class TestParse:
    def test_census_full_shape(self):
        # all 32561 records, "?" kept as its own category
        d = parse_table(DATA / "adult.csv.gz", label="income", drop_missing=False)
        assert (len(d), len(d.schema.columns)) == (32561, 7)
        assert set(np.unique(d.labels)) == {0, 1}
        assert d.schema.label.positive == ">50K"

    def test_census_drops_missing(self, census_full):
        assert len(census_full) == 30718
        assert census_full.dropped == 32561 - 30718

    def test_bank_shaped_table(self, tmp_path):
        rng = np.random.default_rng(5)
        n, a = 37069, 10
        cols = [f"f{j}" for j in range(a)]
        vals = rng.integers(0, 4, size=(n, a))
        ys = rng.integers(0, 2, size=n)
        lines = [",".join(cols + ["y"])]
        lines += [",".join([f"c{v}" for v in row] + [str(y)]) for row, y in zip(vals.tolist(), ys.tolist())]
        d = parse_table(write(tmp_path, "\n".join(lines) + "\n"))
        assert (len(d), len(d.schema.columns)) == (37069, 10)

    def test_empty_body(self, tmp_path):
        with pytest.raises(DataError, match="empty dataset"):
            parse_table(write(tmp_path, "a,b,y\n"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            parse_table(tmp_path / "nope.csv")

    def test_unknown_category_under_fixed_schema(self, tmp_path):
        schema = Schema([ColumnSpec("a", "categorical", ["p", "q"])], LabelSpec("y"))
        with pytest.raises(DataError, match="unknown category"):
            parse_table(write(tmp_path, "a,y\np,1\nr,0\n"), schema)

    def test_non_binary_label(self, tmp_path):
        with pytest.raises(DataError, match="not binary"):
            parse_table(write(tmp_path, "a,y\np,0\nq,1\np,2\n"))

    def test_header_must_match_schema(self, tmp_path):
        schema = Schema([ColumnSpec("a", "categorical", ["p", "q"])], LabelSpec("y"))
        with pytest.raises(SchemaError):
            parse_table(write(tmp_path, "b,y\np,1\n"), schema)

    def test_inferred_domains_sorted(self, tmp_path):
        d = parse_table(write(tmp_path, "a,y\nzeta,1\nalpha,0\nmid,1\n"))
        assert d.schema.columns[0].domain == ("alpha", "mid", "zeta")
        assert d.rows[:, 0].tolist() == [2, 0, 1]

    def test_missing_rows_dropped_and_counted(self, tmp_path):
        d = parse_table(write(tmp_path, "a,b,y\np,x,1\n?,x,0\nq,y,0\nq,?,1\n"))
        assert len(d) == 2 and d.dropped == 2

    def test_other_delimiter(self, tmp_path):
        d = parse_table(write(tmp_path, "a;y\np;1\nq;0\n"), delimiter=";")
        assert len(d) == 2

    def test_sensitive_requested_but_missing(self, tmp_path):
        d = parse_table(write(tmp_path, "a,y\np,1\nq,0\n"))
        with pytest.raises(SchemaError, match="sensitive"):
            d.sensitive_mask()

    def test_reparse_with_inferred_schema_is_identical(self, tmp_path):
        p = write(tmp_path, "a,b,y\np,x,1\nq,y,0\nq,x,0\np,z,1\n")
        first = parse_table(p, sensitive=SensitiveSpec("a", "p", "q"))
        schema_file = tmp_path / "s.yaml"
        save_schema(first.schema, schema_file)
        again = parse_table(p, load_schema(schema_file))
        assert again == first

    def test_write_then_read_round_trip(self, tmp_path, census200):
        p = tmp_path / "out.csv"
        write_table(census200, p)
        assert parse_table(p, census200.schema) == census200


class TestEncoding:
    def test_one_hot_example(self):
        schema = Schema(
            [ColumnSpec("a", "categorical", ["0", "1", "2"]), ColumnSpec("b", "categorical", ["0", "1"])],
            LabelSpec("y"),
        )
        d = Dataset(schema, [[1, 0]], [1])
        assert one_hot_encode(d).values.tolist() == [[0, 1, 0, 1, 0]]

    def test_label_block_appended(self):
        schema = Schema([ColumnSpec("a", "categorical", ["0", "1"])], LabelSpec("y"))
        e = one_hot_encode(Dataset(schema, [[1], [0]], [1, 0]), with_label=True)
        assert e.values.tolist() == [[0, 1, 0, 1], [1, 0, 1, 0]]
        assert e.blocks == [(0, 2), (2, 2)]

    def test_blocks_sum_to_one(self, census200):
        e = one_hot_encode(census200, with_label=True)
        for off, w in e.blocks:
            np.testing.assert_allclose(e.values[:, off : off + w].sum(axis=1), 1.0, atol=1e-9)

    def test_round_trip_50_rows(self):
        d = random_dataset(np.random.default_rng(3), 50, [3, 5, 2, 4])
        assert np.array_equal(decode(one_hot_encode(d), d.schema), d.rows)

    def test_decode_argmax_and_tie(self):
        schema = Schema([ColumnSpec("a", "categorical", ["0", "1", "2"]),
                         ColumnSpec("b", "categorical", ["0", "1"])], LabelSpec("y"))
        assert decode(np.array([[0.2, 0.5, 0.3, 0.5, 0.5]]), schema).tolist() == [[1, 0]]

    def test_decode_shape_mismatch(self):
        schema = make_schema([2, 3])
        with pytest.raises(SchemaError):
            decode(np.zeros((1, 4)), schema)

    @settings(max_examples=50, deadline=None)
    @given(
        cards=st.lists(st.integers(2, 6), min_size=1, max_size=5),
        n=st.integers(1, 40),
        seed=st.integers(0, 2**32 - 1),
    )
    def test_round_trip_property(self, cards, n, seed):
        d = random_dataset(np.random.default_rng(seed), n, cards)
        rows, labels = decode(one_hot_encode(d, with_label=True), d.schema, with_label=True)
        assert np.array_equal(rows, d.rows) and np.array_equal(labels, d.labels)


class TestSplit:
    def test_sizes_100(self):
        s = split(100, seed=1)
        assert (len(s.train), len(s.validation), len(s.test)) == (70, 10, 20)

    def test_sizes_census(self):
        s = split(32561, seed=7)
        assert (len(s.train), len(s.validation), len(s.test)) == (22792, 3256, 6513)

    def test_deterministic(self):
        a, b = split(500, 42), split(500, 42)
        assert all(np.array_equal(x, y) for x, y in
                   ((a.train, b.train), (a.validation, b.validation), (a.test, b.test)))

    def test_too_small(self):
        with pytest.raises(DataError):
            split(9, 0)

    @settings(max_examples=60, deadline=None)
    @given(n=st.integers(10, 3000), seed=st.integers(0, 2**64 - 1))
    def test_partition_property(self, n, seed):
        s = split(n, seed)
        allidx = np.concatenate([s.train, s.validation, s.test])
        assert sorted(allidx.tolist()) == list(range(n))
        assert abs(len(s.train) - 0.7 * n) < 1 and abs(len(s.validation) - 0.1 * n) < 1
        assert abs(len(s.test) - 0.2 * n) < 2
