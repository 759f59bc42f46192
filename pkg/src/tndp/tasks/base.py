from __future__ import annotations

from typing import Optional

import numpy as np

from tndp.core import CandidateSet, DecisionSpace, PredictionSet, optimal_decision


class Episode:
    """One sampled task instance with its ground truth.

    Subclasses fill in the design space, the pre-sampled outcomes and the
    decision/utility rules. An episode is never mutated by a rollout; the
    rollout owns the history and the set of queried ids.
    """

    d_x: int = 1
    n_decisions: Optional[int] = None
    horizon: int = 1
    gamma: np.ndarray = np.zeros(0)
    finite: bool = True
    draws: Optional[np.ndarray] = None
    # GP baselines: subtract the observed mean before fitting; decide from
    # observed outcomes instead of the posterior (finite tables with exact values)
    center_outcomes: bool = False
    decide_from_observations: bool = False

    def initial_context(self) -> CandidateSet:
        return CandidateSet(np.zeros((0, self.d_x)), self._tags(0), np.zeros(0), np.zeros(0, dtype=int))

    def query_candidates(self, step: int, queried: set, rng: np.random.Generator) -> CandidateSet:
        raise NotImplementedError

    def prediction_set(self, step: int, queried: list, rng: np.random.Generator) -> PredictionSet:
        raise NotImplementedError

    def decision_space(self, pred_set: PredictionSet) -> DecisionSpace:
        raise NotImplementedError

    def decide(self, means, stds, pred_set: PredictionSet):
        rel = pred_set.relevant
        return optimal_decision((np.asarray(means)[rel], np.asarray(stds)[rel]),
                                self.decision_space(pred_set), draws=self.draws)

    def decision_value(self, means, stds, pred_set: PredictionSet) -> float:
        """Maximum expected utility under the predictive belief."""
        return self.decide(means, stds, pred_set)[1]

    def true_utility(self, means, stds, pred_set: PredictionSet) -> float:
        """Ground-truth utility of the Bayes decision taken from the belief."""
        raise NotImplementedError

    def _tags(self, n: int):
        return np.zeros(n, dtype=int) if self.n_decisions else None
