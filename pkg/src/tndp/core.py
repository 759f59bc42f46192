"""Shared data model: designs, histories, model inputs and expected utilities.

Beliefs are represented purely in predictive space: every decision is made
from a list of independent Gaussian predictions over the designs the decision
reads. No posterior over latent parameters is ever held.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np


class InvalidDesignError(ValueError):
    """A design does not match the dimension or decision range it is used with."""


class DecisionSpaceError(ValueError):
    """Predictions and decision space do not line up, or the space is empty."""


@dataclass(frozen=True)
class Design:
    coordinates: tuple[float, ...]
    decision_tag: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "coordinates", tuple(float(c) for c in self.coordinates))
        if self.decision_tag is not None and self.decision_tag < 0:
            raise InvalidDesignError(f"decision_tag must be non-negative, got {self.decision_tag}")

    @property
    def dim(self) -> int:
        return len(self.coordinates)


@dataclass(frozen=True)
class Outcome:
    value: float

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"outcome must be finite, got {self.value}")


@dataclass(frozen=True)
class ExperimentHistory:
    """Persistent, ordered record of (design, outcome) pairs."""

    pairs: tuple[tuple[Design, Outcome], ...] = ()
    dim: Optional[int] = None

    def __post_init__(self):
        dims = {d.dim for d, _ in self.pairs}
        if self.dim is not None:
            dims.add(self.dim)
        if len(dims) > 1:
            raise InvalidDesignError(f"history mixes design dimensions {sorted(dims)}")
        if self.dim is None and dims:
            object.__setattr__(self, "dim", dims.pop())

    @property
    def step(self) -> int:
        return len(self.pairs)

    def __len__(self):
        return len(self.pairs)

    def arrays(self) -> tuple[np.ndarray, Optional[np.ndarray], np.ndarray]:
        """Return ``(x, tags, y)`` arrays; tags is None when no design carries one."""
        d = self.dim or 0
        x = np.array([p[0].coordinates for p in self.pairs], dtype=float).reshape(-1, d)
        y = np.array([p[1].value for p in self.pairs], dtype=float)
        tags = [p[0].decision_tag for p in self.pairs]
        if self.pairs and all(t is not None for t in tags):
            return x, np.array(tags, dtype=int), y
        return x, None, y


def append_history(history: ExperimentHistory, design: Design, outcome: Outcome) -> ExperimentHistory:
    """Return a new history with ``(design, outcome)`` appended; ``history`` is untouched."""
    if history.dim is not None and design.dim != history.dim:
        raise InvalidDesignError(
            f"design has dimension {design.dim}, history expects {history.dim}"
        )
    if not isinstance(outcome, Outcome):
        outcome = Outcome(float(outcome))
    return ExperimentHistory(history.pairs + ((design, outcome),), dim=design.dim)


@dataclass(frozen=True)
class GlobalInfo:
    step: int
    task_context: tuple[float, ...] = ()

    def __post_init__(self):
        if self.step < 0:
            raise ValueError("step must be non-negative")
        object.__setattr__(self, "task_context", tuple(float(c) for c in self.task_context))


@dataclass(frozen=True)
class TNDPInput:
    """One model input: context set, prediction designs, query designs and global info."""

    context: ExperimentHistory
    prediction_designs: tuple[Design, ...]
    query_designs: tuple[Design, ...]
    global_info: GlobalInfo

    def __post_init__(self):
        object.__setattr__(self, "prediction_designs", tuple(self.prediction_designs))
        object.__setattr__(self, "query_designs", tuple(self.query_designs))
        if len(set(self.query_designs)) != len(self.query_designs):
            raise InvalidDesignError("query designs must be distinct")
        if self.global_info.step != self.context.step:
            raise ValueError(
                f"global step {self.global_info.step} does not match history step {self.context.step}"
            )
        dims = {d.dim for d in self.prediction_designs + self.query_designs}
        if self.context.dim is not None:
            dims.add(self.context.dim)
        if len(dims) > 1:
            raise InvalidDesignError(f"inputs mix design dimensions {sorted(dims)}")


@dataclass(frozen=True)
class GaussianPrediction:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError(f"std must be strictly positive, got {self.std}")


DISTRIBUTION_OUTPUT = "distribution-output"
DISCRETE_ARM = "discrete-arm"
TOP_K = "top-k-subset"


@dataclass(frozen=True)
class DecisionSpace:
    """The set of admissible decisions.

    ``n_decisions`` is used by the discrete-arm kind; ``k`` and
    ``candidates`` (indices into the prediction list) by top-k-subset.
    """

    kind: str
    n_decisions: Optional[int] = None
    k: Optional[int] = None
    candidates: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        if self.kind not in (DISTRIBUTION_OUTPUT, DISCRETE_ARM, TOP_K):
            raise DecisionSpaceError(f"unknown decision space kind {self.kind!r}")
        if self.kind == DISCRETE_ARM and not (self.n_decisions and self.n_decisions > 0):
            raise DecisionSpaceError("discrete-arm space needs n_decisions >= 1")
        if self.kind == TOP_K:
            if self.k is None or self.k < 1:
                raise DecisionSpaceError("top-k space needs k >= 1")
            if self.candidates is not None:
                object.__setattr__(self, "candidates", tuple(int(c) for c in self.candidates))
                if self.k > len(self.candidates):
                    raise DecisionSpaceError(
                        f"k={self.k} exceeds the {len(self.candidates)} candidates"
                    )

    @classmethod
    def distribution_output(cls) -> "DecisionSpace":
        return cls(DISTRIBUTION_OUTPUT)

    @classmethod
    def discrete_arm(cls, n_decisions: int) -> "DecisionSpace":
        return cls(DISCRETE_ARM, n_decisions=n_decisions)

    @classmethod
    def top_k(cls, k: int, candidates: Optional[Sequence[int]] = None) -> "DecisionSpace":
        return cls(TOP_K, k=k, candidates=None if candidates is None else tuple(candidates))

    def required_predictions(self, n_preds: int) -> int:
        if self.kind == DISTRIBUTION_OUTPUT:
            return 1
        if self.kind == DISCRETE_ARM:
            return self.n_decisions
        return n_preds


def _as_arrays(preds) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(preds, tuple) and len(preds) == 2 and isinstance(preds[0], np.ndarray):
        return np.asarray(preds[0], float), np.asarray(preds[1], float)
    means = np.array([p.mean for p in preds], dtype=float)
    stds = np.array([p.std for p in preds], dtype=float)
    return means, stds


def _check_alignment(means: np.ndarray, space: DecisionSpace) -> None:
    n = len(means)
    if space.kind == DISTRIBUTION_OUTPUT and n != 1:
        raise DecisionSpaceError(f"distribution-output decisions read 1 prediction, got {n}")
    if space.kind == DISCRETE_ARM and n != space.n_decisions:
        raise DecisionSpaceError(f"expected {space.n_decisions} arm predictions, got {n}")
    if space.kind == TOP_K:
        cands = space.candidates if space.candidates is not None else range(n)
        if n == 0 or any(c < 0 or c >= n for c in cands):
            raise DecisionSpaceError("top-k candidates fall outside the prediction list")
        if space.k > len(cands):
            raise DecisionSpaceError(f"k={space.k} exceeds the {len(cands)} candidates")


def gaussian_entropy_utility(std) -> np.ndarray:
    """Optimal expected log score of a Gaussian belief: ``-0.5 * log(2 pi e std^2)``."""
    std = np.asarray(std, dtype=float)
    return -0.5 * np.log(2.0 * np.pi * np.e * std**2)


def standard_normal_draws(n_samples: int, n_arms: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((n_samples, n_arms))


def arm_optimality_probabilities(means, stds, draws: np.ndarray) -> np.ndarray:
    """Monte Carlo P(arm j has the largest outcome), shared draws across arms."""
    samples = np.asarray(means)[None, :] + np.asarray(stds)[None, :] * draws
    winners = np.argmax(samples, axis=1)
    return np.bincount(winners, minlength=samples.shape[1]) / samples.shape[0]


def expected_utility(preds, space: DecisionSpace, decision, n_samples: int = 256,
                     rng: Optional[np.random.Generator] = None, draws: Optional[np.ndarray] = None) -> float:
    """Expected utility of ``decision`` under the independent Gaussian belief ``preds``.

    Decision encodings: a ``GaussianPrediction`` (or ``(mean, std)``) for
    distribution-output, an arm index for discrete-arm, an iterable of
    prediction indices for top-k-subset.
    """
    means, stds = _as_arrays(preds)
    _check_alignment(means, space)
    if space.kind == DISTRIBUTION_OUTPUT:
        if isinstance(decision, GaussianPrediction):
            mu_a, sd_a = decision.mean, decision.std
        else:
            mu_a, sd_a = decision
        mu, sd = means[0], stds[0]
        # E_{y ~ N(mu, sd^2)} log N(y | mu_a, sd_a^2)
        return float(-0.5 * np.log(2 * np.pi * sd_a**2) - (sd**2 + (mu - mu_a) ** 2) / (2 * sd_a**2))
    if space.kind == DISCRETE_ARM:
        if not 0 <= int(decision) < space.n_decisions:
            raise DecisionSpaceError(f"arm {decision} outside 0..{space.n_decisions - 1}")
        if draws is None:
            if rng is None:
                raise ValueError("discrete-arm expected utility needs rng or draws")
            draws = standard_normal_draws(n_samples, len(means), rng)
        return float(arm_optimality_probabilities(means, stds, draws)[int(decision)])
    chosen = [int(i) for i in decision]
    cands = set(space.candidates) if space.candidates is not None else set(range(len(means)))
    if len(set(chosen)) != space.k or not set(chosen) <= cands:
        raise DecisionSpaceError(f"top-k decision must be {space.k} distinct candidates")
    return float(means[chosen].sum())


def optimal_decision(preds, space: DecisionSpace, n_samples: int = 256,
                     rng: Optional[np.random.Generator] = None, draws: Optional[np.ndarray] = None):
    """Bayes-optimal decision and its expected utility under ``preds``.

    Ties resolve to the lowest index. For discrete-arm spaces the same draws
    are shared by every arm; pass ``draws`` to reuse them across calls.
    """
    means, stds = _as_arrays(preds)
    if len(means) == 0:
        raise DecisionSpaceError("empty decision space")
    _check_alignment(means, space)
    if space.kind == DISTRIBUTION_OUTPUT:
        return GaussianPrediction(float(means[0]), float(stds[0])), float(gaussian_entropy_utility(stds[0]))
    if space.kind == DISCRETE_ARM:
        if draws is None:
            if rng is None:
                raise ValueError("discrete-arm decisions need rng or draws")
            draws = standard_normal_draws(n_samples, len(means), rng)
        probs = arm_optimality_probabilities(means, stds, draws)
        arm = int(np.argmax(probs))
        return arm, float(probs[arm])
    cands = np.array(space.candidates if space.candidates is not None else range(len(means)), dtype=int)
    order = np.argsort(-means[cands], kind="stable")[: space.k]
    chosen = tuple(int(c) for c in cands[order])
    return chosen, float(means[list(chosen)].sum())


class TaskEnvironment(Protocol):
    """What the trainer and evaluation harness need from one task instance."""

    d_x: int
    n_decisions: Optional[int]
    horizon: int
    gamma: np.ndarray
    finite: bool

    def initial_context(self) -> "CandidateSet": ...

    def query_candidates(self, step: int, queried: set, rng: np.random.Generator) -> "CandidateSet": ...

    def prediction_set(self, step: int, queried: list, rng: np.random.Generator) -> "PredictionSet": ...

    def decision_value(self, means: np.ndarray, stds: np.ndarray, pred_set) -> float: ...

    def true_utility(self, means: np.ndarray, stds: np.ndarray, pred_set) -> float: ...


@dataclass
class CandidateSet:
    """Candidate designs with their (pre-sampled) outcomes; ids index the env's pool."""

    x: np.ndarray
    tags: Optional[np.ndarray]
    y: np.ndarray
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.ids is None:
            self.ids = np.arange(len(self.x))

    def __len__(self):
        return len(self.x)


@dataclass
class PredictionSet:
    """Prediction designs, their training targets, and which entries a decision reads."""

    x: np.ndarray
    tags: Optional[np.ndarray]
    y: np.ndarray
    relevant: np.ndarray
    ids: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.x)
