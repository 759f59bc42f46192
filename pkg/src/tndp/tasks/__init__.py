"""Benchmark task environments and the factories the trainer samples from."""
from __future__ import annotations

from typing import Callable

import numpy as np

from tndp.model import ModelConfig
from tndp.tasks.base import Episode
from tndp.tasks.benchmark import (
    BenchmarkFormatError,
    TabularBenchmark,
    generate_synthetic_benchmark,
    load_tabular_benchmark,
    synthetic_table,
    write_tabular_benchmark,
)
from tndp.tasks.decision_al import DecisionALEnv, make_decision_al_env
from tndp.tasks.topk import TopKEnv, make_topk_env
from tndp.tasks.toy import ToyEnv, make_toy_env

TASKS = ("toy", "decision_al", "topk")

__all__ = [
    "TASKS", "Episode", "ToyEnv", "DecisionALEnv", "TopKEnv", "TabularBenchmark", "BenchmarkFormatError",
    "make_toy_env", "make_decision_al_env", "make_topk_env", "load_tabular_benchmark",
    "write_tabular_benchmark", "generate_synthetic_benchmark", "synthetic_table",
    "training_env_factory", "model_config_for",
]


def training_env_factory(task: str, opts: dict) -> Callable[[np.random.Generator], Episode]:
    """Return ``rng -> Episode`` drawing a fresh simulated task per call."""
    if task == "toy":
        return lambda rng: make_toy_env(
            rng, horizon=opts["horizon"], n_init=opts["n_init"], n_query=opts["n_query"],
            n_pred=opts["n_pred"], noise_std=opts["noise_std"])
    if task == "decision_al":
        return lambda rng: make_decision_al_env(
            rng, opts["pool_size"], horizon=opts["horizon"], n_arms=opts["n_arms"],
            n_pred=opts["n_pred"], noise_std=opts["noise_std"], n_samples=opts["n_samples"])
    if task == "topk":
        def factory(rng):
            table = synthetic_table(opts["d_x"], opts["n_rows"], rng, n_splits=0)
            return make_topk_env(table, int(rng.integers(2**31)), k=opts["k"], horizon=opts["horizon"],
                                 n_init=opts["n_init"], pred_size=opts["train_pred_size"],
                                 query_subsample=opts["train_query_subsample"] or None)
        return factory
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


def model_config_for(task: str, opts: dict, model_opts: dict) -> ModelConfig:
    if task == "toy":
        extra = dict(d_x=1, n_decisions=None, gamma_dim=1)
    elif task == "decision_al":
        extra = dict(d_x=1, n_decisions=opts["n_arms"], gamma_dim=1)
    elif task == "topk":
        extra = dict(d_x=opts["d_x"], n_decisions=None, gamma_dim=0)
    else:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    return ModelConfig(max_steps=opts["horizon"], **extra, **model_opts)
