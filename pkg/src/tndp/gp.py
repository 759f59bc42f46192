"""Exact Gaussian-process machinery for task generation and the GP baselines.

Squared-exponential kernels (isotropic or ARD), jittered Cholesky sampling,
posterior prediction, type-II maximum likelihood and the acquisition scores
used by the non-amortized baselines.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize
from scipy.stats import norm

from tndp.core import arm_optimality_probabilities

logger = logging.getLogger(__name__)

JITTER_START = 1e-8
JITTER_MAX = 1e-2
MIN_NOISE_VAR = 1e-6
MIN_VARIANCE = 1e-6
_LOG_BOUNDS = {
    "variance": (np.log(MIN_VARIANCE), np.log(1e4)),
    "lengthscale": (np.log(1e-3), np.log(1e3)),
    "noise": (np.log(MIN_NOISE_VAR), np.log(1e1)),
}

ACQUISITIONS = ("RS", "US", "DUS", "UCB", "EI", "PI")


class GPNumericalError(RuntimeError):
    """Raised when a kernel matrix stays indefinite after maximal jitter."""


@dataclass(frozen=True)
class SEKernelParams:
    """Squared-exponential kernel parameters.

    ``lengthscale`` is a scalar for the isotropic kernel or one value per
    input dimension (automatic relevance determination).
    """

    variance: float
    lengthscale: Union[float, tuple[float, ...]]

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscale, dtype=float))
        if not self.variance > 0 or not np.all(ls > 0):
            raise ValueError(f"kernel parameters must be positive: {self}")
        if ls.size > 1:
            object.__setattr__(self, "lengthscale", tuple(float(v) for v in ls))
        else:
            object.__setattr__(self, "lengthscale", float(ls[0]))
        object.__setattr__(self, "variance", float(self.variance))

    @property
    def lengthscales(self) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.lengthscale, dtype=float))


def _as_points(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        return x.reshape(1, 1)
    if x.ndim == 1:
        return x[:, None]
    return x


def se_kernel(x, x2, params: SEKernelParams) -> float:
    """k(x, x') = v exp(-|x - x'|^2 / (2 l^2)), per-dimension l under ARD."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x.shape != x2.shape:
        raise ValueError(f"inputs differ in dimension: {x.shape} vs {x2.shape}")
    r2 = np.sum(((x - x2) / params.lengthscales) ** 2)
    return float(params.variance * np.exp(-0.5 * r2))


def se_kernel_matrix(x1, x2, params: SEKernelParams) -> np.ndarray:
    a = _as_points(x1) / params.lengthscales
    b = _as_points(x2) / params.lengthscales
    r2 = np.sum(a**2, 1)[:, None] + np.sum(b**2, 1)[None, :] - 2.0 * a @ b.T
    return params.variance * np.exp(-0.5 * np.maximum(r2, 0.0))


def jittered_cholesky(k: np.ndarray, scale: float) -> tuple[np.ndarray, float]:
    """Cholesky factor of ``k``, adding diagonal jitter from 1e-8*scale up to 1e-2*scale.

    Returns the lower factor and the jitter that was finally used (0 when the
    bare matrix factorised).
    """
    n = k.shape[0]
    if n == 0:
        return np.zeros((0, 0)), 0.0
    try:
        return np.linalg.cholesky(k), 0.0
    except np.linalg.LinAlgError:
        pass
    jitter = JITTER_START * scale
    while jitter <= JITTER_MAX * scale * (1 + 1e-9):
        try:
            return np.linalg.cholesky(k + jitter * np.eye(n)), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise GPNumericalError(f"Cholesky failed with jitter up to {JITTER_MAX * scale:g}")


def sample_gp_function(points, params: SEKernelParams, noise_var: float,
                       rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
    """Draw outcomes at ``points`` from N(0, K + noise_var I)."""
    x = _as_points(points)
    k = se_kernel_matrix(x, x, params) + noise_var * np.eye(len(x))
    chol, _ = jittered_cholesky(k, params.variance)
    if size is None:
        return chol @ rng.standard_normal(len(x))
    return (chol @ rng.standard_normal((len(x), size))).T


def sample_task_params(rng: np.random.Generator) -> SEKernelParams:
    """Task prior: lengthscale 0.25 + 0.75 U(0,1), variance 0.1 + U(0,1)."""
    u_ls, u_var = rng.uniform(0.0, 1.0, size=2)
    return task_params_from_uniforms(u_ls, u_var)


def task_params_from_uniforms(u_ls: float, u_var: float) -> SEKernelParams:
    return SEKernelParams(variance=0.1 + u_var, lengthscale=0.25 + 0.75 * u_ls)


@dataclass(frozen=True)
class GPPosterior:
    x: np.ndarray
    y: np.ndarray
    params: SEKernelParams
    noise_var: float
    chol: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    jitter: float = 0.0

    @property
    def n(self) -> int:
        return len(self.y)


def fit_posterior(x, y, params: SEKernelParams, noise_var: float) -> GPPosterior:
    """Condition a zero-mean GP on ``(x, y)`` and cache the Cholesky factor."""
    x = _as_points(x) if len(np.atleast_1d(y)) else np.zeros((0, params.lengthscales.size))
    y = np.asarray(y, dtype=float).reshape(-1)
    k = se_kernel_matrix(x, x, params) + noise_var * np.eye(len(y))
    chol, jitter = jittered_cholesky(k, params.variance)
    alpha = cho_solve((chol, True), y) if len(y) else np.zeros(0)
    return GPPosterior(x, y, params, float(noise_var), chol, alpha, jitter)


def gp_posterior_predict(post: GPPosterior, test_points, include_noise: bool = False):
    """Posterior means and variances of the latent function (plus noise if asked)."""
    xs = _as_points(test_points)
    prior_var = np.full(len(xs), post.params.variance)
    if post.n == 0:
        means = np.zeros(len(xs))
        var = prior_var
    else:
        ks = se_kernel_matrix(post.x, xs, post.params)
        means = ks.T @ post.alpha
        v = solve_triangular(post.chol, ks, lower=True)
        var = np.maximum(prior_var - np.sum(v**2, axis=0), 1e-12)
    if include_noise:
        var = var + post.noise_var
    return means, var


def _unpack(theta: np.ndarray, dim: int):
    variance = np.exp(theta[0])
    ls = np.exp(theta[1:1 + dim])
    noise = np.exp(theta[1 + dim])
    return variance, ls, noise


def log_marginal_likelihood(theta, x, y, *, with_grad: bool = True):
    """Log marginal likelihood and its gradient w.r.t. log hyperparameters.

    ``theta = [log v, log l_1, ..., log l_L, log noise_var]`` with L = 1
    (isotropic) or L = input dimension (ARD).
    """
    theta = np.asarray(theta, dtype=float)
    x = _as_points(x)
    y = np.asarray(y, dtype=float).reshape(-1)
    n, d = x.shape
    n_ls = len(theta) - 2
    variance, ls, noise = _unpack(theta, n_ls)
    scaled = x / ls
    diff2 = (scaled[:, None, :] - scaled[None, :, :]) ** 2
    kf = variance * np.exp(-0.5 * diff2.sum(-1))
    k = kf + noise * np.eye(n)
    try:
        chol = np.linalg.cholesky(k)
    except np.linalg.LinAlgError:
        if with_grad:
            return -np.inf, np.zeros_like(theta)
        return -np.inf
    alpha = cho_solve((chol, True), y)
    lml = -0.5 * y @ alpha - np.log(np.diag(chol)).sum() - 0.5 * n * np.log(2 * np.pi)
    if not with_grad:
        return float(lml)
    k_inv = cho_solve((chol, True), np.eye(n))
    inner = np.outer(alpha, alpha) - k_inv
    grad = np.empty_like(theta)
    grad[0] = 0.5 * np.sum(inner * kf)
    if n_ls == 1:
        grad[1] = 0.5 * np.sum(inner * kf * diff2.sum(-1))
    else:
        for j in range(n_ls):
            grad[1 + j] = 0.5 * np.sum(inner * kf * diff2[:, :, j])
    grad[-1] = 0.5 * noise * np.trace(inner)
    return float(lml), grad


@dataclass(frozen=True)
class FitResult:
    params: SEKernelParams
    noise_var: float
    log_likelihood: float
    initial_log_likelihood: float
    fallback: bool = False


def _bounds(n_ls: int):
    return [_LOG_BOUNDS["variance"]] + [_LOG_BOUNDS["lengthscale"]] * n_ls + [_LOG_BOUNDS["noise"]]


def fit_hyperparameters(x, y, init: SEKernelParams, noise_init: float, *, ard: bool = True,
                        restarts: int = 3, rng: Optional[np.random.Generator] = None) -> FitResult:
    """Maximise the log marginal likelihood with multi-start L-BFGS-B on log-parameters.

    The first start is ``init``; the remaining ``restarts - 1`` are log-normal
    perturbations of it. Noise variance is clamped at 1e-6. If the objective
    turns non-finite everywhere, the initial parameters are returned with
    ``fallback=True``.
    """
    x = _as_points(x)
    y = np.asarray(y, dtype=float).reshape(-1)
    if len(y) < 2:
        raise ValueError("fitting hyperparameters needs at least two observations")
    d = x.shape[1]
    n_ls = d if ard else 1
    ls0 = np.broadcast_to(init.lengthscales, (n_ls,)) if init.lengthscales.size in (1, n_ls) else None
    if ls0 is None:
        raise ValueError(f"initial lengthscales {init.lengthscale} do not match dimension {d}")
    bounds = _bounds(n_ls)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    theta0 = np.clip(np.concatenate([[np.log(init.variance)], np.log(ls0),
                                     [np.log(max(noise_init, MIN_NOISE_VAR))]]), lo, hi)
    init_ll = log_marginal_likelihood(theta0, x, y, with_grad=False)
    rng = rng if rng is not None else np.random.default_rng(0)

    def objective(theta):
        val, grad = log_marginal_likelihood(theta, x, y)
        if not np.isfinite(val):
            return 1e25, np.zeros_like(theta)
        return -val, -grad

    best_theta, best_val = theta0, init_ll
    starts = [theta0] + [np.clip(theta0 + rng.normal(0.0, 1.0, theta0.shape), lo, hi)
                         for _ in range(max(restarts, 1) - 1)]
    for start in starts:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = minimize(objective, start, jac=True, method="L-BFGS-B", bounds=bounds)
        val = -res.fun
        if np.isfinite(val) and res.fun < 1e25 and (not np.isfinite(best_val) or val > best_val):
            best_theta, best_val = res.x, val
    if not np.isfinite(best_val):
        logger.warning("non-finite marginal likelihood; keeping initial hyperparameters")
        return FitResult(init, max(noise_init, MIN_NOISE_VAR), init_ll, init_ll, fallback=True)
    variance, ls, noise = _unpack(best_theta, n_ls)
    params = SEKernelParams(variance, tuple(ls) if n_ls > 1 else float(ls[0]))
    return FitResult(params, float(noise), float(best_val), float(init_ll))


def expected_improvement(mean, std, incumbent):
    mean = np.asarray(mean, float)
    std = np.asarray(std, float)
    improvement = mean - incumbent
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(std > 0, improvement / std, 0.0)
        ei = improvement * norm.cdf(z) + std * norm.pdf(z)
    return np.where(std > 1e-12, ei, np.maximum(improvement, 0.0))


def probability_of_improvement(mean, std, incumbent, omega):
    mean = np.asarray(mean, float)
    std = np.asarray(std, float)
    gap = mean - incumbent - omega
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(std > 1e-12, gap / np.where(std > 1e-12, std, 1.0), np.sign(gap) * np.inf)
    return norm.cdf(z)


def upper_confidence_bound(mean, std, kappa):
    return np.asarray(mean, float) + kappa * np.asarray(std, float)


def decision_entropy(arm_posteriors: Sequence[GPPosterior], covariates, draws: np.ndarray) -> np.ndarray:
    """Entropy of the optimal-arm distribution at each covariate (shared draws)."""
    xs = _as_points(covariates)
    stats = [gp_posterior_predict(p, xs) for p in arm_posteriors]
    means = np.stack([m for m, _ in stats], axis=1)
    stds = np.sqrt(np.stack([v for _, v in stats], axis=1))
    out = np.empty(len(xs))
    for i in range(len(xs)):
        probs = arm_optimality_probabilities(means[i], stds[i], draws)
        nz = probs[probs > 0]
        out[i] = -np.sum(nz * np.log(nz))
    return out


def acquisition_score(name: str, posterior, candidates, *, incumbent: Optional[float] = None,
                      kappa: float = 2.0, omega: Optional[float] = None,
                      rng: Optional[np.random.Generator] = None, candidate_tags=None,
                      n_samples: int = 256) -> np.ndarray:
    """Score candidates for acquisition; the selected design is the argmax.

    ``posterior`` is a single :class:`GPPosterior`, or a sequence of per-arm
    posteriors together with ``candidate_tags`` (required for DUS, optional for
    US). RS returns i.i.d. uniform scores.
    """
    name = name.upper()
    if name.startswith("GP-"):
        name = name[3:]
    if name not in ACQUISITIONS:
        raise ValueError(f"unknown acquisition {name!r}; expected one of {ACQUISITIONS}")
    xs = _as_points(candidates)
    per_arm = not isinstance(posterior, GPPosterior)
    if name == "RS":
        if rng is None:
            raise ValueError("RS needs an rng")
        return rng.uniform(size=len(xs))
    if name == "DUS":
        if not per_arm or candidate_tags is None:
            raise ValueError("DUS needs per-arm posteriors over a discrete-arm decision space")
        if rng is None:
            raise ValueError("DUS needs an rng")
        draws = rng.standard_normal((n_samples, len(posterior)))
        return decision_entropy(posterior, xs, draws)
    if per_arm:
        if candidate_tags is None:
            raise ValueError("per-arm posteriors need candidate_tags")
        tags = np.asarray(candidate_tags, dtype=int)
        mean = np.empty(len(xs))
        var = np.empty(len(xs))
        for arm, post in enumerate(posterior):
            sel = tags == arm
            if sel.any():
                mean[sel], var[sel] = gp_posterior_predict(post, xs[sel], include_noise=(name == "US"))
    else:
        mean, var = gp_posterior_predict(posterior, xs, include_noise=(name == "US"))
    std = np.sqrt(var)
    if name == "US":
        return var
    if name == "UCB":
        return upper_confidence_bound(mean, std, kappa)
    if incumbent is None:
        raise ValueError(f"{name} needs the incumbent value")
    if name == "EI":
        return expected_improvement(mean, std, incumbent)
    if omega is None:
        y = posterior.y if not per_arm else np.concatenate([p.y for p in posterior])
        omega = 0.01 * (np.ptp(y) if len(y) else 0.0)
    return probability_of_improvement(mean, std, incumbent, omega)
