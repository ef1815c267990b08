import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fanlasso.data import (
    CRIME_FEATURES, CRIME_LABEL, SUMMARY_HEADER, DataError, Normalization, load_csv, make_crime_like,
    read_results, split_dataset, split_sizes, summarize, summary_csv, write_crime_like, write_results,
)
from fanlasso.simulate import ExperimentResult, ResultRow


def _write(tmp_path, text, name="d.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_minmax_example(tmp_path):
    ds = load_csv(_write(tmp_path, "a,b,y\n0,5,1\n10,5,2\n"), "y")
    assert np.array_equal(ds.x[:, 0], [0.0, 1.0])
    assert np.array_equal(ds.x[:, 1], [0.0, 0.0])  # zero-range column
    assert np.array_equal(ds.y, [1.0, 2.0])
    assert ds.columns == ["a", "b"]


@given(st.integers(0, 10_000), st.sampled_from(["minmax", "zscore", "none"]))
def test_normalization_inverse_roundtrip(seed, mode):
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 50, (12, 4))
    norm = Normalization.fit(x, mode)
    assert np.max(np.abs(norm.invert(norm.apply(x)) - x)) <= 1e-12 * max(1.0, np.max(np.abs(x)))


def test_normalization_modes():
    x = np.array([[1.0, 2.0], [3.0, 2.0]])
    z = Normalization.fit(x, "zscore").apply(x)
    assert np.allclose(z[:, 0], [-1, 1]) and np.array_equal(z[:, 1], [0, 0])
    assert np.array_equal(Normalization.fit(x, "none").apply(x), x)
    mm = Normalization.fit(x, "minmax").apply(x)
    assert mm.min() >= 0 and mm.max() <= 1
    with pytest.raises(DataError):
        Normalization.fit(x, "rank")


def test_missing_rows_dropped_and_counted(tmp_path):
    ds = load_csv(_write(tmp_path, "a,y\n1,2\n?,3\n4,\n5,6\n"), "y")
    assert len(ds) == 2 and ds.dropped_rows == 2
    assert np.array_equal(ds.raw_x[:, 0], [1, 5])


def test_non_numeric_error_names_row_and_column(tmp_path):
    with pytest.raises(DataError, match=r":3: column 'b'"):
        load_csv(_write(tmp_path, "a,b,y\n1,2,3\n1,x,3\n"), "y")


def test_load_errors(tmp_path):
    with pytest.raises(DataError, match="not found"):
        load_csv(_write(tmp_path, "a,b\n1,2\n"), "y")
    with pytest.raises(DataError, match="empty"):
        load_csv(_write(tmp_path, ""), "y")
    with pytest.raises(DataError, match="cannot read"):
        load_csv(tmp_path / "missing.csv", "y")
    with pytest.raises(DataError, match="fields"):
        load_csv(_write(tmp_path, "a,y\n1,2,3\n"), "y")
    with pytest.raises(DataError, match="no complete rows"):
        load_csv(_write(tmp_path, "a,y\n?,1\n"), "y")


def test_unlabeled_load_and_drop_columns(tmp_path):
    ds = load_csv(_write(tmp_path, "id,a,b\n7,1,2\n8,3,4\n"), "y", drop_columns=("id",), require_label=False)
    assert ds.columns == ["a", "b"] and np.all(np.isnan(ds.y))


def test_split_sizes_examples():
    assert split_sizes(10, (0.8, 0.1, 0.1)) == (8, 1, 1)
    assert split_sizes(1994, (0.8, 0.1, 0.1)) == (1596, 199, 199)
    with pytest.raises(DataError):
        split_sizes(10, (0.5, 0.1, 0.1))


@given(st.integers(20, 500), st.integers(0, 1000))
def test_split_is_partition(n, seed):
    s = split_dataset(n, seed=seed)
    allidx = np.concatenate([s.train, s.valid, s.test, s.unlabeled])
    assert sorted(allidx.tolist()) == list(range(n))


def test_split_deterministic_and_seed_sensitive():
    a, b = split_dataset(100, seed=3), split_dataset(100, seed=3)
    assert a.to_dict() == b.to_dict()
    assert a.to_dict() != split_dataset(100, seed=4).to_dict()
    assert len(a.unlabeled) == 8 and len(a.train) == 72


def test_split_too_small():
    with pytest.raises(DataError):
        split_dataset(3)


def test_write_results_line_counts(tmp_path):
    write_results(ExperimentResult([]), tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text().count("\n") == 1
    rows = [ResultRow(i, "M", 1, 2, "rmse", 0.5, 0) for i in range(2)]
    write_results(ExperimentResult(rows), tmp_path / "r.csv")
    assert len((tmp_path / "r.csv").read_text().splitlines()) == 3
    assert read_results(tmp_path / "r.csv").rows == rows
    with pytest.raises(DataError):
        read_results(tmp_path / "nope.csv")


def test_summarize_ci():
    same = ExperimentResult([ResultRow(i, "M", 1, 2, "rmse", 0.3, 0) for i in range(3)])
    (row,) = summarize(same)
    assert row["count"] == 3 and row["ci_low"] == row["ci_high"] == pytest.approx(0.3)
    vals = [1.0, 2.0, 4.0]
    (row,) = summarize(ExperimentResult([ResultRow(i, "M", 1, 2, "rmse", v, 0) for i, v in enumerate(vals)]))
    se = math.sqrt(sum((v - 7 / 3) ** 2 for v in vals) / 2) / math.sqrt(3)
    assert row["se"] == pytest.approx(se) and row["ci_high"] - row["ci_low"] == pytest.approx(2 * 1.959964 * se)
    assert summary_csv([row]).splitlines()[0] == ",".join(SUMMARY_HEADER)


def test_crime_like_fixture(tmp_path):
    header, table = make_crime_like(50, 1)
    assert header[-1] == CRIME_LABEL and len(header) == len(CRIME_FEATURES) + 1 == 102
    assert np.all((table[:, -1] > 0) & (table[:, -1] < 1))
    write_crime_like(tmp_path / "c.csv", 30, 2, domain="target")
    ds = load_csv(tmp_path / "c.csv", CRIME_LABEL)
    assert ds.x.shape == (30, 101) and ds.x.min() >= 0 and ds.x.max() <= 1
    with pytest.raises(DataError):
        make_crime_like(5, 0, domain="other")
