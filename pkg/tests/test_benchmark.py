import json

import numpy as np
import pytest

from tndp.tasks import (
    BenchmarkFormatError,
    TabularBenchmark,
    generate_synthetic_benchmark,
    load_tabular_benchmark,
    write_tabular_benchmark,
)


def _write(path, text):
    path.write_text(text)
    return str(path)


def test_three_row_file(tmp_path):
    p = _write(tmp_path / "b.csv", "x1,x2,y\n0.1,0.2,0.5\n0.3,0.4,0.6\n0.5,0.6,0.7\n")
    b = load_tabular_benchmark(p)
    assert len(b) == 3 and b.d_x == 2 and b.name == "b"
    assert b.y.tolist() == [0.5, 0.6, 0.7]


def test_nan_outcome_names_line(tmp_path):
    p = _write(tmp_path / "b.csv", "x1,y\n0.1,0.5\n0.2,nan\n")
    with pytest.raises(BenchmarkFormatError, match=":3:"):
        load_tabular_benchmark(p)


def test_non_numeric_and_missing_column(tmp_path):
    with pytest.raises(BenchmarkFormatError, match=":2:"):
        load_tabular_benchmark(_write(tmp_path / "a.csv", "x1,y\nabc,0.5\n"))
    with pytest.raises(BenchmarkFormatError, match=":3:"):
        load_tabular_benchmark(_write(tmp_path / "c.csv", "x1,x2,y\n0.1,0.2,0.3\n0.4,0.5\n"))
    with pytest.raises(BenchmarkFormatError, match="header"):
        load_tabular_benchmark(_write(tmp_path / "d.csv", "a,b\n0.1,0.2\n"))


def test_duplicate_rows_rejected(tmp_path):
    p = _write(tmp_path / "b.csv", "x1,y\n0.1,0.5\n0.2,0.4\n0.1,0.9\n")
    with pytest.raises(BenchmarkFormatError, match=":4:.*line 2"):
        load_tabular_benchmark(p)


def test_empty_file(tmp_path):
    with pytest.raises(BenchmarkFormatError):
        load_tabular_benchmark(_write(tmp_path / "e.csv", ""))
    with pytest.raises(BenchmarkFormatError):
        load_tabular_benchmark(_write(tmp_path / "f.csv", "x1,y\n"))


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(50, 4))
    x[0, 0] = 1 / 3
    y = rng.normal(size=50) * 1e-7
    b = TabularBenchmark("t", x, y, [[0, 1, 2, 3, 4]])
    p = str(tmp_path / "t.csv")
    write_tabular_benchmark(b, p)
    r = load_tabular_benchmark(p)
    assert np.array_equal(r.x, x) and np.array_equal(r.y, y)
    assert r.initial_contexts == [[0, 1, 2, 3, 4]] and r.name == "t"


def test_sidecar_dimension_mismatch(tmp_path):
    p = _write(tmp_path / "b.csv", "x1,y\n0.1,0.5\n")
    (tmp_path / "b.meta.json").write_text(json.dumps({"name": "b", "d_x": 3, "initial_contexts": []}))
    with pytest.raises(BenchmarkFormatError):
        load_tabular_benchmark(p)


def test_context_index_out_of_range():
    with pytest.raises(BenchmarkFormatError):
        TabularBenchmark("t", np.zeros((2, 1)) + [[0], [1]], np.zeros(2), [[5]])


def test_synthetic_outcomes_in_unit_interval(tmp_path):
    b = generate_synthetic_benchmark(6, 500, np.random.default_rng(0), str(tmp_path / "s.csv"))
    assert np.all((b.y >= 0) & (b.y <= 1))
    assert np.all((b.x >= 0) & (b.x <= 1))


def test_synthetic_same_seed_same_file(tmp_path):
    generate_synthetic_benchmark(3, 100, np.random.default_rng(7), str(tmp_path / "a.csv"), name="s")
    generate_synthetic_benchmark(3, 100, np.random.default_rng(7), str(tmp_path / "b.csv"), name="s")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.meta.json").read_bytes() == (tmp_path / "b.meta.json").read_bytes()


def test_synthetic_line_count(tmp_path):
    generate_synthetic_benchmark(6, 500, np.random.default_rng(0), str(tmp_path / "s.csv"))
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert len(lines) == 501 and lines[0] == "x1,x2,x3,x4,x5,x6,y"
