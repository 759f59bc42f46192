import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from tndp.core import (
    DecisionSpace,
    DecisionSpaceError,
    Design,
    ExperimentHistory,
    GaussianPrediction,
    GlobalInfo,
    InvalidDesignError,
    Outcome,
    TNDPInput,
    append_history,
    arm_optimality_probabilities,
    expected_utility,
    gaussian_entropy_utility,
    optimal_decision,
)


def _hist(n, d=1):
    h = ExperimentHistory()
    for i in range(n):
        h = append_history(h, Design([float(i)] * d), Outcome(float(i)))
    return h


def test_append_to_empty_history():
    h = append_history(ExperimentHistory(), Design([0.5]), Outcome(1.0))
    assert h.step == 1 and len(h) == 1


def test_append_preserves_prefix_and_input():
    h3 = _hist(3)
    before = h3.pairs
    h4 = append_history(h3, Design([9.0]), Outcome(2.0))
    assert h4.step == 4
    assert h4.pairs[:3] == before
    assert h3.step == 3 and h3.pairs == before


def test_append_wrong_dimension_raises():
    with pytest.raises(InvalidDesignError):
        append_history(_hist(2, d=1), Design([0.0, 1.0]), Outcome(0.0))


def test_outcome_must_be_finite():
    with pytest.raises(ValueError):
        Outcome(float("nan"))
    with pytest.raises(ValueError):
        Outcome(float("inf"))


def test_negative_decision_tag_rejected():
    with pytest.raises(InvalidDesignError):
        Design([0.0], decision_tag=-1)


def test_gaussian_prediction_std_positive():
    with pytest.raises(ValueError):
        GaussianPrediction(0.0, 0.0)


def test_model_input_rejects_duplicate_queries_and_step_mismatch():
    h = _hist(2)
    with pytest.raises(InvalidDesignError):
        TNDPInput(h, (Design([0.1]),), (Design([0.2]), Design([0.2])), GlobalInfo(2))
    with pytest.raises(ValueError):
        TNDPInput(h, (Design([0.1]),), (Design([0.2]),), GlobalInfo(1))


def test_history_arrays():
    h = append_history(append_history(ExperimentHistory(), Design([1.0], 2), Outcome(3.0)),
                       Design([2.0], 0), Outcome(4.0))
    x, tags, y = h.arrays()
    assert x.shape == (2, 1) and tags.tolist() == [2, 0] and y.tolist() == [3.0, 4.0]


def test_topk_expected_utility_is_mean_of_choice():
    preds = [GaussianPrediction(0.3, 1.0), GaussianPrediction(0.7, 0.2)]
    assert expected_utility(preds, DecisionSpace.top_k(1), (1,)) == pytest.approx(0.7)


def test_symmetric_arms_half():
    preds = [GaussianPrediction(0.0, 1.0), GaussianPrediction(0.0, 1.0)]
    n = 20000
    v = expected_utility(preds, DecisionSpace.discrete_arm(2), 0, n_samples=n, rng=np.random.default_rng(0))
    assert abs(v - 0.5) < 3 * math.sqrt(0.25 / n)


def test_separated_arms_against_numerical_integration():
    # oracle: P(y1 > y2) by integrating the density of y1 times the cdf of y2
    m1, m2, s = 1.0, -1.0, 0.1
    oracle, _ = integrate.quad(lambda y: stats.norm.pdf(y, m1, s) * stats.norm.cdf(y, m2, s), -5, 5, epsabs=1e-13)
    preds = [GaussianPrediction(m1, s), GaussianPrediction(m2, s)]
    v = expected_utility(preds, DecisionSpace.discrete_arm(2), 0, rng=np.random.default_rng(1))
    assert v == pytest.approx(oracle, abs=1e-6)
    assert v == pytest.approx(1.0, abs=1e-6)


def test_misaligned_predictions_raise():
    preds = [GaussianPrediction(0.0, 1.0)] * 3
    with pytest.raises(DecisionSpaceError):
        expected_utility(preds, DecisionSpace.discrete_arm(2), 0, rng=np.random.default_rng(0))


def test_optimal_arm_equal_stds():
    preds = [GaussianPrediction(m, 0.05) for m in (0.1, 0.9, 0.4, 0.2)]
    arm, _ = optimal_decision(preds, DecisionSpace.discrete_arm(4), rng=np.random.default_rng(0))
    assert arm == 1  # second arm


def test_optimal_topk_five_means():
    preds = [GaussianPrediction(m, 1.0) for m in (5, 1, 4, 2, 3)]
    choice, value = optimal_decision(preds, DecisionSpace.top_k(3))
    assert set(choice) == {0, 2, 4} and value == 12


def test_distribution_output_matches_grid_search():
    # oracle: maximise E_{y~N(mu, s^2)}[log N(y | m_a, s_a^2)] over a grid of Gaussians
    mu, s = 0.3, 0.7
    (pred, value) = optimal_decision([GaussianPrediction(mu, s)], DecisionSpace.distribution_output())
    assert pred.mean == mu and pred.std == s
    grid_m = np.linspace(-1, 1.6, 131)
    grid_s = np.linspace(0.2, 1.5, 131)
    M, S = np.meshgrid(grid_m, grid_s)
    score = -0.5 * np.log(2 * np.pi * S**2) - (s**2 + (mu - M) ** 2) / (2 * S**2)
    assert value == pytest.approx(score.max(), abs=1e-3)
    assert value >= score.max() - 1e-12
    assert value == pytest.approx(-0.5 * math.log(2 * math.pi * math.e * s**2), abs=1e-12)


def test_empty_decision_space_raises():
    with pytest.raises(DecisionSpaceError):
        optimal_decision([], DecisionSpace.top_k(1))


def test_topk_requires_enough_candidates():
    with pytest.raises(DecisionSpaceError):
        optimal_decision([GaussianPrediction(0, 1)], DecisionSpace.top_k(2))


def test_ties_go_to_lowest_index():
    preds = [GaussianPrediction(1.0, 1.0)] * 4
    choice, _ = optimal_decision(preds, DecisionSpace.top_k(2))
    assert choice == (0, 1)
    arm, _ = optimal_decision(preds, DecisionSpace.discrete_arm(4), draws=np.zeros((8, 4)))
    assert arm == 0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=8), st.data())
def test_topk_equals_brute_force(means, data):
    n = len(means)
    k = data.draw(st.integers(1, n))
    preds = [GaussianPrediction(m, 1.0) for m in means]
    _, value = optimal_decision(preds, DecisionSpace.top_k(k))
    best = max(sum(means[i] for i in c) for c in itertools.combinations(range(n), k))
    assert value == pytest.approx(best, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-3, 3), st.floats(0.05, 2.0)), min_size=2, max_size=6),
       st.integers(0, 2**31 - 1))
def test_arm_probabilities_sum_to_one(arms, seed):
    means = np.array([a[0] for a in arms])
    stds = np.array([a[1] for a in arms])
    draws = np.random.default_rng(seed).standard_normal((256, len(arms)))
    p = arm_optimality_probabilities(means, stds, draws)
    assert abs(p.sum() - 1.0) <= 3 / math.sqrt(256)
    assert np.all(p >= 0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-3, 3), st.floats(0.05, 2.0)), min_size=2, max_size=6), st.data())
def test_expected_utility_permutation_invariant(arms, data):
    n = len(arms)
    perm = data.draw(st.permutations(range(n)))
    means = np.array([a[0] for a in arms])
    stds = np.array([a[1] for a in arms])
    draws = np.random.default_rng(0).standard_normal((256, n))
    arm = data.draw(st.integers(0, n - 1))
    space = DecisionSpace.discrete_arm(n)
    v = expected_utility((means, stds), space, arm, draws=draws)
    inv = int(np.argsort(perm)[arm])
    v_perm = expected_utility((means[list(perm)], stds[list(perm)]), space, inv, draws=draws[:, list(perm)])
    assert v == pytest.approx(v_perm, abs=1e-12)
    k = data.draw(st.integers(1, n))
    chosen = tuple(range(k))
    top = DecisionSpace.top_k(k)
    permuted = tuple(int(np.argsort(perm)[i]) for i in chosen)
    assert expected_utility((means, stds), top, chosen) == pytest.approx(
        expected_utility((means[list(perm)], stds[list(perm)]), top, permuted), abs=1e-12)


def test_entropy_utility_closed_form():
    assert gaussian_entropy_utility(1.0) == pytest.approx(-0.5 * math.log(2 * math.pi * math.e))
