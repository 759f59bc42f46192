"""Paired-seed evaluation of TNDP and GP baselines, utility curves and acquisition timing.

Episode ``e`` of a run with seed ``s`` is built from ``default_rng([s, e, 2])``
no matter which method is evaluated, so all methods see identical
environments. Method-side randomness (random querying, MC draws) comes from
``default_rng([s, e, 1])``.
"""
from __future__ import annotations

import csv
import functools
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from tndp.config import ConfigError, RunConfig
from tndp.gp import (
    GPNumericalError,
    SEKernelParams,
    acquisition_score,
    fit_hyperparameters,
    fit_posterior,
    gp_posterior_predict,
)
from tndp.model import TNDP, load_weights
from tndp.tasks import make_decision_al_env, make_topk_env, make_toy_env, load_tabular_benchmark, synthetic_table
from tndp.tasks.base import Episode
from tndp.trainer import rollout

TNDP_METHODS = ("TNDP", "TNDP-RS")
GP_METHODS = ("GP-RS", "GP-US", "GP-DUS", "GP-UCB", "GP-EI", "GP-PI")
ALL_METHODS = TNDP_METHODS + GP_METHODS
CURVE_HEADER = ("method", "step", "mean", "stderr", "n")
TIMING_HEADER = ("method", "acq_time_mean_s", "acq_time_std_s", "total_time_mean_s", "total_time_std_s", "n")

DEFAULT_GP_PARAMS = SEKernelParams(0.6, 0.625)
DEFAULT_NOISE_VAR = 0.01


@dataclass
class EpisodeResult:
    episode: int
    group: str
    utilities: np.ndarray
    chosen_x: np.ndarray
    acquisition_times: list[float] = field(default_factory=list)
    target: Optional[np.ndarray] = None


@dataclass
class UtilityCurve:
    """Per-step mean true utility and standard error for steps 1..T."""

    method: str
    mean: np.ndarray
    stderr: np.ndarray
    n: int

    @property
    def steps(self) -> np.ndarray:
        return np.arange(1, len(self.mean) + 1)

    @classmethod
    def from_utilities(cls, method: str, utilities: np.ndarray, include_step0: bool = False) -> "UtilityCurve":
        u = np.asarray(utilities, dtype=float)
        if not include_step0:
            u = u[:, 1:]
        n = u.shape[0]
        se = u.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(u.shape[1])
        return cls(method, u.mean(axis=0), se, n)


def validate_methods(methods: Sequence[str], task: str) -> list[str]:
    out = []
    for m in methods:
        if m not in ALL_METHODS:
            raise ConfigError(f"unknown method {m!r}; expected a subset of {', '.join(ALL_METHODS)}")
        if m == "GP-DUS" and task != "decision_al":
            raise ConfigError("GP-DUS needs a discrete-arm decision task (decision_al)")
        if m not in out:
            out.append(m)
    if not out:
        raise ConfigError("no methods requested")
    return out


@functools.lru_cache(maxsize=16)
def _topk_table(seed: int, index: int, d_x: int, n_rows: int, paths: str):
    files = [p.strip() for p in paths.split(",") if p.strip()]
    if files:
        return load_tabular_benchmark(files[index])
    return synthetic_table(d_x, n_rows, np.random.default_rng([seed, 7, index]), name=f"synthetic{index}")


def n_episodes(cfg: RunConfig) -> int:
    if cfg.task == "topk":
        return n_tables(cfg) * cfg.eval["episodes"]
    return cfg.eval["episodes"]


def n_tables(cfg: RunConfig) -> int:
    files = [p for p in cfg.task_opts["benchmarks"].split(",") if p.strip()]
    return len(files) if files else cfg.eval["n_tables"]


def build_episode(cfg: RunConfig, index: int) -> tuple[str, Episode]:
    """Environment for evaluation episode ``index``; identical across methods."""
    t = cfg.task_opts
    # the trainer seeds epoch e with [seed, e]; the trailing 2 keeps test episodes off that stream
    rng = np.random.default_rng([cfg.seed, index, 2])
    if cfg.task == "toy":
        return "toy", make_toy_env(rng, horizon=t["horizon"], n_init=t["n_init"], n_query=t["n_query"],
                                   n_pred=t["n_pred"], noise_std=t["noise_std"])
    if cfg.task == "decision_al":
        return "decision_al", make_decision_al_env(
            rng, cfg.eval["pool_size"], horizon=t["horizon"], n_arms=t["n_arms"], n_pred=t["n_pred"],
            noise_std=t["noise_std"], n_samples=t["n_samples"])
    if cfg.task == "topk":
        splits = cfg.eval["episodes"]
        table = _topk_table(cfg.seed, index // splits, t["d_x"], t["n_rows"], t["benchmarks"])
        return table.name, make_topk_env(table, index % splits, k=t["k"], horizon=t["horizon"],
                                         n_init=t["n_init"], pred_size=t["eval_pred_size"])
    raise ConfigError(f"unknown task {cfg.task!r}")


def _fit(x, y, rng, center: bool):
    """Posterior with hyperparameters refit by maximum marginal likelihood."""
    offset = float(y.mean()) if center and len(y) else 0.0
    yc = y - offset
    if len(y) < 2:
        post = fit_posterior(x, yc, DEFAULT_GP_PARAMS, DEFAULT_NOISE_VAR)
        return post, offset
    d = x.shape[1]
    init = SEKernelParams(DEFAULT_GP_PARAMS.variance, (DEFAULT_GP_PARAMS.lengthscale,) * d if d > 1
                          else DEFAULT_GP_PARAMS.lengthscale)
    res = fit_hyperparameters(x, yc, init, DEFAULT_NOISE_VAR, ard=d > 1, restarts=3, rng=rng)
    return fit_posterior(x, yc, res.params, res.noise_var), offset


def _fit_all(env: Episode, cx, ct, cy, rng):
    if env.n_decisions:
        return [_fit(cx[ct == a], cy[ct == a], rng, False) for a in range(env.n_decisions)]
    return _fit(cx, cy, rng, env.center_outcomes)


def _predict(fitted, x, tags):
    if isinstance(fitted, list):
        mean = np.empty(len(x))
        var = np.empty(len(x))
        for a, (post, off) in enumerate(fitted):
            sel = tags == a
            if sel.any():
                m, v = gp_posterior_predict(post, x[sel])
                mean[sel], var[sel] = m + off, v
        return mean, np.sqrt(var)
    post, off = fitted
    m, v = gp_posterior_predict(post, x)
    return m + off, np.sqrt(v)


def gp_rollout(method: str, env: Episode, rng: np.random.Generator, horizon: Optional[int] = None):
    """One episode of a GP baseline; hyperparameters are refit at every step."""
    name = method[3:]
    T = horizon or env.horizon
    ctx = env.initial_context()
    cx, ct, cy = ctx.x.copy(), None if ctx.tags is None else ctx.tags.copy(), ctx.y.copy()
    queried = [int(i) for i in ctx.ids]
    utils = np.zeros(T + 1)
    chosen_x, times = [], []
    needs_fit = not (name == "RS" and env.decide_from_observations)
    for t in range(T + 1):
        t0 = time.perf_counter()
        pset = env.prediction_set(t, queried, rng)
        fitted = _fit_all(env, cx, ct, cy, rng) if needs_fit else None
        cands = env.query_candidates(t, set(queried), rng) if t < T else None
        if cands is not None:
            if name == "RS":
                j = int(rng.integers(len(cands)))
            else:
                if isinstance(fitted, list):  # per-arm fits are never centred
                    post, incumbent = [p for p, _ in fitted], float(cy.max()) if len(cy) else 0.0
                else:
                    post, incumbent = fitted[0], float(cy.max() - fitted[1]) if len(cy) else 0.0
                scores = acquisition_score(name, post, cands.x, incumbent=incumbent, rng=rng,
                                           candidate_tags=cands.tags)
                j = int(np.argmax(scores))
            times.append(time.perf_counter() - t0)
            chosen_x.append(cands.x[j])
        if env.decide_from_observations:
            means, stds = pset.y.astype(float), np.ones(len(pset))
        else:
            means, stds = _predict(fitted, pset.x, pset.tags)
        utils[t] = env.true_utility(means, stds, pset)
        if cands is not None:
            cx = np.concatenate([cx, cands.x[j:j + 1]])
            if ct is not None:
                ct = np.concatenate([ct, cands.tags[j:j + 1]])
            cy = np.concatenate([cy, cands.y[j:j + 1]])
            queried.append(int(cands.ids[j]))
    return utils, np.array(chosen_x).reshape(T, -1), times


def run_episode(method: str, env: Episode, rng: np.random.Generator, model: Optional[TNDP] = None,
                horizon: Optional[int] = None):
    """Returns ``(utilities[0..T], chosen designs, per-design acquisition times)``."""
    if method in TNDP_METHODS:
        if model is None:
            raise ConfigError(f"{method} needs a trained checkpoint (--checkpoint)")
        traj = rollout(model, [env], rng, mode="greedy" if method == "TNDP" else "random", horizon=horizon)
        xs = np.array([r.chosen_x[0] for r in traj.records if r.chosen_x is not None])
        return traj.utilities[0], xs, traj.acquisition_times
    return gp_rollout(method, env, rng, horizon)


def _episode_target(env: Episode) -> Optional[np.ndarray]:
    return np.atleast_1d(getattr(env, "x_star")) if hasattr(env, "x_star") else None


_WORKER_MODEL: dict = {}


def _eval_chunk(cfg: RunConfig, methods: list[str], checkpoint: Optional[str], indices: list[int]):
    torch.set_num_threads(1)
    model = None
    if checkpoint and any(m in TNDP_METHODS for m in methods):
        if checkpoint not in _WORKER_MODEL:
            _WORKER_MODEL[checkpoint] = load_weights(checkpoint).eval()
        model = _WORKER_MODEL[checkpoint]
    out = {m: [] for m in methods}
    for e in indices:
        group, env = build_episode(cfg, e)
        for m in methods:
            utils, xs, times = run_episode(m, env, np.random.default_rng([cfg.seed, e, 1]), model)
            out[m].append(EpisodeResult(e, group, utils, xs, times, _episode_target(env)))
    return out


def evaluate(cfg: RunConfig, methods: Sequence[str], checkpoint: Optional[str] = None,
             workers: int = 1, episodes: Optional[Sequence[int]] = None) -> dict[str, list[EpisodeResult]]:
    """Run every method on the same episodes; results are sorted by episode index."""
    methods = validate_methods(methods, cfg.task)
    if any(m in TNDP_METHODS for m in methods):
        if not checkpoint:
            raise ConfigError("TNDP methods need --checkpoint")
        model = load_weights(checkpoint)
        expected_steps = cfg.task_opts["horizon"]
        if model.config.max_steps < expected_steps:
            raise ConfigError(f"checkpoint supports {model.config.max_steps} steps, task needs {expected_steps}")
    indices = list(episodes) if episodes is not None else list(range(n_episodes(cfg)))
    if workers <= 1 or len(indices) < 2:
        results = _eval_chunk(cfg, methods, checkpoint, indices)
    else:
        chunks = [indices[i::workers] for i in range(workers)]
        results = {m: [] for m in methods}
        with ProcessPoolExecutor(workers) as pool:
            for part in pool.map(_eval_chunk, [cfg] * workers, [methods] * workers, [checkpoint] * workers,
                                 chunks):
                for m in methods:
                    results[m].extend(part[m])
    for m in methods:
        results[m].sort(key=lambda r: r.episode)
    return results


def utility_curves(results: dict[str, list[EpisodeResult]], group: Optional[str] = None,
                   include_step0: bool = False) -> list[UtilityCurve]:
    curves = []
    for m in sorted(results):
        rows = [r.utilities for r in results[m] if group is None or r.group == group]
        if rows:
            curves.append(UtilityCurve.from_utilities(m, np.stack(rows), include_step0))
    return curves


def write_curves_csv(curves: Sequence[UtilityCurve], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for c in sorted(curves, key=lambda c: c.method):
            for s, m, se in zip(c.steps, c.mean, c.stderr):
                w.writerow([c.method, int(s), repr(float(m)), repr(float(se)), c.n])


def read_curves_csv(path: str) -> list[UtilityCurve]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        if tuple(header) != CURVE_HEADER:
            raise ValueError(f"{path}: header must be {','.join(CURVE_HEADER)}")
        rows: dict[str, list] = {}
        for rec in reader:
            if rec:
                rows.setdefault(rec[0], []).append((int(rec[1]), float(rec[2]), float(rec[3]), int(rec[4])))
    if not rows:
        raise ValueError(f"{path}: no data rows")
    curves = []
    for m, rs in rows.items():
        rs.sort()
        if [r[0] for r in rs] != list(range(1, len(rs) + 1)):
            raise ValueError(f"{path}: steps for {m} must run contiguously from 1")
        curves.append(UtilityCurve(m, np.array([r[1] for r in rs]), np.array([r[2] for r in rs]), rs[0][3]))
    return curves


@dataclass
class TimingRow:
    method: str
    acq_mean: float
    acq_std: float
    total_mean: float
    total_std: float
    n: int


def timing_table(cfg: RunConfig, methods: Sequence[str], checkpoint: Optional[str] = None,
                 n_repeats: int = 10) -> list[TimingRow]:
    """Per-design and per-episode acquisition wall time over ``n_repeats`` fresh episodes."""
    methods = validate_methods(methods, cfg.task)
    model = load_weights(checkpoint).eval() if any(m in TNDP_METHODS for m in methods) and checkpoint else None
    rows = []
    for m in methods:
        per_design, totals = [], []
        for r in range(n_repeats):
            idx = 1_000_000 + r
            _, env = build_episode(cfg, idx)
            _, _, times = run_episode(m, env, np.random.default_rng([cfg.seed, idx, 1]), model)
            per_design.append(float(np.mean(times)))
            totals.append(float(np.sum(times)))
        rows.append(TimingRow(m, float(np.mean(per_design)), float(np.std(per_design, ddof=1)) if n_repeats > 1
                              else 0.0, float(np.mean(totals)),
                              float(np.std(totals, ddof=1)) if n_repeats > 1 else 0.0, n_repeats))
    return rows


def write_timing_csv(rows: Sequence[TimingRow], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TIMING_HEADER)
        for r in rows:
            w.writerow([r.method, repr(r.acq_mean), repr(r.acq_std), repr(r.total_mean), repr(r.total_std), r.n])


__all__ = [
    "ALL_METHODS", "TNDP_METHODS", "GP_METHODS", "EpisodeResult", "UtilityCurve", "TimingRow",
    "evaluate", "utility_curves", "write_curves_csv", "read_curves_csv", "timing_table", "write_timing_csv",
    "build_episode", "run_episode", "gp_rollout", "validate_methods", "GPNumericalError",
]
