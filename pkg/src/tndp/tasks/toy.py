"""1-D regression at a target point: the decision is a predictive distribution at x*."""
from __future__ import annotations

from typing import Optional

import numpy as np

from tndp.core import CandidateSet, DecisionSpace, GaussianPrediction, PredictionSet
from tndp.gp import SEKernelParams, fit_posterior, gp_posterior_predict, sample_gp_function, sample_task_params
from tndp.tasks.base import Episode

DOMAIN = (-1.0, 1.0)


def expected_log_score(mu: float, sigma: float, true_mean: float, noise_std: float) -> float:
    """E_{y ~ N(true_mean, noise_std^2)} [log N(y | mu, sigma^2)]."""
    return float(-0.5 * np.log(2 * np.pi * sigma**2)
                 - (noise_std**2 + (true_mean - mu) ** 2) / (2 * sigma**2))


class ToyEnv(Episode):
    finite = False
    d_x = 1

    def __init__(self, params: SEKernelParams, x_star: float, f_star: float, noise_std: float,
                 init: CandidateSet, pred: PredictionSet, query_sets: list[CandidateSet], horizon: int):
        self.params = params
        self.x_star = float(x_star)
        self.f_star = float(f_star)
        self.noise_std = noise_std
        self.init = init
        self.pred = pred
        self.query_sets = query_sets
        self.horizon = horizon
        self.gamma = np.array([self.x_star])

    def initial_context(self) -> CandidateSet:
        return self.init

    def query_candidates(self, step, queried, rng):
        return self.query_sets[min(step, len(self.query_sets) - 1)]

    def prediction_set(self, step, queried, rng):
        return self.pred

    def decision_space(self, pred_set):
        return DecisionSpace.distribution_output()

    def true_utility(self, means, stds, pred_set):
        i = int(pred_set.relevant[0])
        return expected_log_score(float(means[i]), float(stds[i]), self.f_star, self.noise_std)

    def true_predictive(self) -> GaussianPrediction:
        return GaussianPrediction(self.f_star, self.noise_std)


def make_toy_env(rng: np.random.Generator, *, horizon: int = 1, n_init: int = 3, n_query: int = 100,
                 n_pred: int = 16, noise_std: float = 0.1, grid: Optional[np.ndarray] = None,
                 params: Optional[SEKernelParams] = None) -> ToyEnv:
    """Sample a GP function on [-1, 1], a test point x* and everything a rollout observes.

    Query sets are drawn fresh for every step (``n_query`` uniform points);
    passing ``grid`` replaces them with a fixed dense grid for deployment.
    """
    lo, hi = DOMAIN
    params = params or sample_task_params(rng)
    x_star = rng.uniform(lo, hi)
    x_init = rng.uniform(lo, hi, n_init)
    x_pred = np.concatenate([[x_star], rng.uniform(lo, hi, n_pred - 1)])
    if grid is not None:
        grid = np.asarray(grid, dtype=float)
        x_query = [grid]
    else:
        x_query = [rng.uniform(lo, hi, n_query) for _ in range(horizon)]
    pts = np.concatenate([x_init, x_pred] + x_query)
    f = sample_gp_function(pts, params, 0.0, rng)
    y = f + noise_std * rng.standard_normal(len(pts))
    n_i, n_p = n_init, n_pred
    init = CandidateSet(x_init[:, None], None, y[:n_i], -1 - np.arange(n_i))
    pred = PredictionSet(x_pred[:, None], None, y[n_i:n_i + n_p], np.array([0]))
    query_sets, off = [], n_i + n_p
    for xq in x_query:
        query_sets.append(CandidateSet(xq[:, None], None, y[off:off + len(xq)]))
        off += len(xq)
    return ToyEnv(params, x_star, f[n_i], noise_std, init, pred, query_sets, horizon)


def _target_log_score(x, y, env: ToyEnv, z: np.ndarray) -> float:
    """MC estimate of the best expected log score at x* given data (x, y) under the true GP.

    ``z`` are standard-normal draws shared by every call, so differences
    between designs carry no inner-sampling noise.
    """
    post = fit_posterior(x, y, env.params, env.noise_std**2)
    m, v = gp_posterior_predict(post, np.array([[env.x_star]]), include_noise=True)
    mu, sd = float(m[0]), float(np.sqrt(v[0]))
    ys = mu + sd * z
    return float(np.mean(-0.5 * np.log(2 * np.pi * sd**2) - (ys - mu) ** 2 / (2 * sd**2)))


def edug_brute_force(env: ToyEnv, candidates, rng: np.random.Generator, *, n_outer: int = 32,
                     n_inner: int = 32) -> np.ndarray:
    """Expected decision utility gain of each candidate design under the true GP.

    Outer MC over the candidate's outcome drawn from the current predictive,
    inner MC over the target outcome with one set of draws reused for every
    candidate; the gain is measured against the current best expected utility.
    """
    init = env.initial_context()
    x0, y0 = init.x, init.y
    cands = np.asarray(candidates, dtype=float).reshape(-1, 1)
    z = rng.standard_normal(n_inner)
    base = _target_log_score(x0, y0, env, z)
    post = fit_posterior(x0, y0, env.params, env.noise_std**2)
    mean, var = gp_posterior_predict(post, cands, include_noise=True)
    scores = np.empty(len(cands))
    for i, xc in enumerate(cands):
        ys = mean[i] + np.sqrt(var[i]) * rng.standard_normal(n_outer)
        x1 = np.concatenate([x0, xc[None, :]])
        gains = [_target_log_score(x1, np.append(y0, yj), env, z) for yj in ys]
        scores[i] = float(np.mean(gains)) - base
    return scores
