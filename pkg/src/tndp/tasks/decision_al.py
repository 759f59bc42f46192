"""Decision-aware active learning: pick the best of N_d treatments for a target patient x*.

Each arm's outcome is an independent GP draw over standard-normal covariates;
every pool entry carries exactly one arm. The utility is 1 when the Bayes
decision at x* matches the arm with the largest noise-free outcome.
"""
from __future__ import annotations

import numpy as np

from tndp.core import CandidateSet, DecisionSpace, PredictionSet
from tndp.gp import SEKernelParams, sample_gp_function, sample_task_params
from tndp.tasks.base import Episode


class DecisionALEnv(Episode):
    finite = True
    d_x = 1

    def __init__(self, arm_params: list[SEKernelParams], pool: CandidateSet, x_star: float,
                 f_star: np.ndarray, pred: PredictionSet, noise_std: float, horizon: int,
                 draws: np.ndarray):
        self.arm_params = arm_params
        self.n_decisions = len(arm_params)
        self.pool = pool
        self.x_star = float(x_star)
        self.f_star = np.asarray(f_star, dtype=float)
        self.best_arm = int(np.argmax(self.f_star))
        self.pred = pred
        self.noise_std = noise_std
        self.horizon = horizon
        self.draws = draws
        self.gamma = np.array([self.x_star])

    def query_candidates(self, step, queried, rng):
        keep = np.array([i not in queried for i in self.pool.ids], dtype=bool)
        return CandidateSet(self.pool.x[keep], self.pool.tags[keep], self.pool.y[keep], self.pool.ids[keep])

    def prediction_set(self, step, queried, rng):
        return self.pred

    def decision_space(self, pred_set):
        return DecisionSpace.discrete_arm(self.n_decisions)

    def true_utility(self, means, stds, pred_set):
        arm, _ = self.decide(means, stds, pred_set)
        return float(arm == self.best_arm)


def make_decision_al_env(rng: np.random.Generator, pool_size: int = 100, *, horizon: int = 10,
                         n_arms: int = 4, n_pred: int = 16, noise_std: float = 0.1,
                         n_samples: int = 256) -> DecisionALEnv:
    if pool_size < n_arms:
        raise ValueError("pool must hold at least one design per arm")
    arm_params = [sample_task_params(rng) for _ in range(n_arms)]
    x_pool = rng.standard_normal(pool_size)
    # every arm appears at least once; the rest are assigned uniformly
    tags = rng.permutation(np.concatenate([np.arange(n_arms), rng.integers(0, n_arms, pool_size - n_arms)]))
    x_star = rng.standard_normal()
    n_extra = n_pred - n_arms
    x_extra = rng.standard_normal(n_extra)
    t_extra = rng.integers(0, n_arms, n_extra)
    pts = np.concatenate([x_pool, [x_star], x_extra])
    f = np.stack([sample_gp_function(pts, p, 0.0, rng) for p in arm_params])  # (arms, points)
    noise = noise_std * rng.standard_normal((n_arms, len(pts)))
    y = f + noise
    idx = np.arange(pool_size)
    pool = CandidateSet(x_pool[:, None], tags, y[tags, idx], idx)
    f_star = f[:, pool_size]
    xp = np.concatenate([np.full(n_arms, x_star), x_extra])[:, None]
    tp = np.concatenate([np.arange(n_arms), t_extra])
    yp = np.concatenate([y[:, pool_size], y[t_extra, pool_size + 1 + np.arange(n_extra)]])
    pred = PredictionSet(xp, tp, yp, np.arange(n_arms))
    draws = rng.standard_normal((n_samples, n_arms))
    return DecisionALEnv(arm_params, pool, x_star, f_star, pred, noise_std, horizon, draws)
