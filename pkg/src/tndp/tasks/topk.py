"""Top-k selection over a finite table of configurations.

The decision is k distinct configurations among those evaluated so far
(initial context plus queries); its utility is the sum of their true
outcomes. Table outcomes are exact, so once a row is evaluated the best
recommendation no longer depends on any model's belief about it: every
method is scored on the k best rows it has observed.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from tndp.core import CandidateSet, DecisionSpace, PredictionSet
from tndp.tasks.base import Episode
from tndp.tasks.benchmark import TabularBenchmark


class TopKEnv(Episode):
    finite = True
    center_outcomes = True
    decide_from_observations = True

    def __init__(self, bench: TabularBenchmark, initial: np.ndarray, *, k: int = 3, horizon: int = 50,
                 pred_size: int = 256, query_subsample: Optional[int] = None):
        if len(bench) < k + horizon + len(initial):
            raise ValueError(f"table has {len(bench)} rows, needs at least {k + horizon + len(initial)}")
        self.bench = bench
        self.d_x = bench.d_x
        self.k = k
        self.horizon = horizon
        self.initial = np.asarray(initial, dtype=int)
        self.pred_size = pred_size
        self.query_subsample = query_subsample
        self.gamma = np.zeros(0)
        self.ids = np.arange(len(bench))

    def initial_context(self):
        i = self.initial
        return CandidateSet(self.bench.x[i], None, self.bench.y[i], i.copy())

    def query_candidates(self, step, queried, rng):
        avail = np.array([i for i in self.ids if i not in queried], dtype=int)
        if self.query_subsample is not None and len(avail) > self.query_subsample:
            avail = np.sort(rng.choice(avail, self.query_subsample, replace=False))
        return CandidateSet(self.bench.x[avail], None, self.bench.y[avail], avail)

    def prediction_set(self, step, queried, rng):
        """Queried rows first, topped up with a fresh random subsample of the rest."""
        queried = np.asarray(list(queried), dtype=int)
        size = min(len(self.bench), max(self.pred_size, len(queried)))
        qset = set(queried.tolist())
        others = np.array([i for i in self.ids if i not in qset], dtype=int)
        extra = rng.choice(others, size - len(queried), replace=False) if size > len(queried) else others[:0]
        rows = np.concatenate([queried, extra]).astype(int)
        return PredictionSet(self.bench.x[rows], None, self.bench.y[rows], np.arange(len(queried)), rows)

    def decision_space(self, pred_set):
        return DecisionSpace.top_k(self.k)

    def true_utility(self, means, stds, pred_set):
        rows = pred_set.ids[pred_set.relevant]
        return float(np.sort(self.bench.y[rows])[-self.k:].sum())

    def oracle_utility(self) -> float:
        return float(np.sort(self.bench.y)[-self.k:].sum())


def make_topk_env(bench: TabularBenchmark, split_seed: int, *, k: int = 3, horizon: int = 50, n_init: int = 5,
                  pred_size: int = 256, query_subsample: Optional[int] = None) -> TopKEnv:
    """Initial context from the benchmark's predefined split when available, else seeded-uniform."""
    if bench.initial_contexts:
        initial = np.array(bench.initial_contexts[split_seed % len(bench.initial_contexts)], dtype=int)
    else:
        initial = np.random.default_rng(split_seed).choice(len(bench), n_init, replace=False)
    return TopKEnv(bench, initial, k=k, horizon=horizon, pred_size=pred_size, query_subsample=query_subsample)
