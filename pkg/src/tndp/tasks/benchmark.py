"""Tabular benchmark files: a CSV of configurations with one outcome column plus a JSON sidecar.

The CSV has header ``x1,...,xd,y`` and one configuration per line; values
are written with 17 significant digits so a write/read round trip is exact.
The sidecar ``<stem>.meta.json`` holds ``name``, ``d_x`` and
``initial_contexts`` (lists of row indices, one per test split).
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from tndp.gp import SEKernelParams, sample_gp_function, sample_task_params


class BenchmarkFormatError(ValueError):
    pass


@dataclass
class TabularBenchmark:
    name: str
    x: np.ndarray
    y: np.ndarray
    initial_contexts: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.x.ndim != 2 or len(self.x) != len(self.y):
            raise BenchmarkFormatError("x must be (rows, d_x) and match y")
        if not np.all(np.isfinite(self.y)) or not np.all(np.isfinite(self.x)):
            raise BenchmarkFormatError("benchmark values must be finite")
        if len({tuple(r) for r in self.x.tolist()}) != len(self.x):
            raise BenchmarkFormatError("duplicate configuration rows")
        for ctx in self.initial_contexts:
            if any(i < 0 or i >= len(self.y) for i in ctx):
                raise BenchmarkFormatError(f"initial context index out of range: {ctx}")

    @property
    def d_x(self) -> int:
        return self.x.shape[1]

    def __len__(self):
        return len(self.y)


def meta_path(csv_path: str) -> str:
    stem = csv_path[:-4] if csv_path.endswith(".csv") else csv_path
    return stem + ".meta.json"


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_tabular_benchmark(bench: TabularBenchmark, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i + 1}" for i in range(bench.d_x)] + ["y"])
        for row, y in zip(bench.x, bench.y):
            w.writerow([_fmt(v) for v in row] + [_fmt(y)])
    with open(meta_path(path), "w", encoding="utf-8") as fh:
        json.dump({"name": bench.name, "d_x": bench.d_x,
                   "initial_contexts": [list(map(int, c)) for c in bench.initial_contexts]}, fh, indent=2)


def load_tabular_benchmark(path: str) -> TabularBenchmark:
    """Parse a benchmark CSV (and its sidecar, when present).

    Raises :class:`BenchmarkFormatError` naming the offending line for missing
    columns, non-numeric or non-finite entries and duplicate rows.
    """
    meta = {}
    mpath = meta_path(path)
    if os.path.exists(mpath):
        with open(mpath, encoding="utf-8") as fh:
            try:
                meta = json.load(fh)
            except json.JSONDecodeError as exc:
                raise BenchmarkFormatError(f"{mpath}: invalid JSON: {exc}") from exc
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise BenchmarkFormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        d = len(header) - 1
        expected = [f"x{i + 1}" for i in range(d)] + ["y"]
        if d < 1 or header != expected:
            raise BenchmarkFormatError(f"{path}:1: header must be {','.join(expected) if d >= 1 else 'x1,...,xd,y'}")
        if "d_x" in meta and meta["d_x"] != d:
            raise BenchmarkFormatError(f"{path}: sidecar d_x={meta['d_x']} but header has {d} inputs")
        rows, ys, seen = [], [], {}
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != d + 1:
                raise BenchmarkFormatError(f"{path}:{lineno}: expected {d + 1} columns, got {len(rec)}")
            try:
                vals = [float(c) for c in rec]
            except ValueError:
                raise BenchmarkFormatError(f"{path}:{lineno}: non-numeric entry") from None
            if not all(math.isfinite(v) for v in vals):
                raise BenchmarkFormatError(f"{path}:{lineno}: non-finite entry")
            key = tuple(vals[:d])
            if key in seen:
                raise BenchmarkFormatError(f"{path}:{lineno}: duplicate configuration (first at line {seen[key]})")
            seen[key] = lineno
            rows.append(vals[:d])
            ys.append(vals[d])
    if not rows:
        raise BenchmarkFormatError(f"{path}: no data rows")
    name = meta.get("name", os.path.splitext(os.path.basename(path))[0])
    return TabularBenchmark(name, np.array(rows), np.array(ys), meta.get("initial_contexts", []))


def synthetic_table(d_x: int, n_rows: int, rng: np.random.Generator, *, name: str = "synthetic",
                    params: Optional[SEKernelParams] = None, n_splits: int = 5, n_init: int = 5) -> TabularBenchmark:
    """Configurations uniform in [0,1]^d_x; outcomes are a logistic-squashed GP draw."""
    x = rng.uniform(0.0, 1.0, (n_rows, d_x))
    params = params or sample_task_params(rng)
    f = sample_gp_function(x, params, 0.0, rng)
    y = 1.0 / (1.0 + np.exp(-f))
    contexts = [sorted(rng.choice(n_rows, n_init, replace=False).tolist()) for _ in range(n_splits)]
    return TabularBenchmark(name, x, y, contexts)


def generate_synthetic_benchmark(d_x: int, n_rows: int, rng: np.random.Generator, out_path: str,
                                 name: Optional[str] = None) -> TabularBenchmark:
    bench = synthetic_table(d_x, n_rows, rng, name=name or os.path.splitext(os.path.basename(out_path))[0])
    write_tabular_benchmark(bench, out_path)
    return bench
