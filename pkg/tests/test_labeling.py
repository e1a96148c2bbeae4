import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from stateadapt.errors import InputError
from stateadapt.labeling import (Budget, LabelLog, UtilityEstimate, ensemble_interval,
                                 estimate_utilities, run_labeling_round, select_for_labeling,
                                 utility_classification, utility_regression)
from stateadapt.state_math import StateSet


class FixedOracle:
    """Labels every sample with its first feature; charges ``surcharge`` extra."""

    def __init__(self, surcharge=0.0, fail_ids=()):
        self.surcharge = surcharge
        self.fail_ids = set(fail_ids)
        self.calls = 0

    def label(self, sample):
        self.calls += 1
        if sample.sample_id in self.fail_ids:
            raise RuntimeError("oracle down")
        return float(sample.features[0]), sample.labeling_cost + self.surcharge


class IntervalModel:
    def __init__(self, widths):
        self.widths = np.asarray(widths, dtype=float)

    def predict_interval(self, X):
        w = self.widths[np.asarray(X[:, 1], dtype=int)]
        return np.zeros(len(X)), w


def test_utility_hand_values():
    assert utility_classification([0.5, 0.5]) == 1.0
    assert utility_classification([1.0, 0.0]) == 0.0
    assert utility_classification([0.7, 0.2, 0.1]) == pytest.approx(0.5)
    assert utility_regression((1.0, 3.5)) == 2.5
    lo, hi = ensemble_interval([[1.0, 5.0], [3.0, 2.0], [2.0, 4.0]])
    assert lo.tolist() == [1.0, 2.0] and hi.tolist() == [3.0, 5.0]
    for bad in ([0.5], [0.6, 0.6], [1.2, -0.2]):
        with pytest.raises(InputError):
            utility_classification(bad)
    with pytest.raises(InputError):
        utility_regression((2.0, 1.0))


def test_estimate_utilities_dispatch():
    class Clf:
        is_classifier = True

        def class_probs(self, X):
            return np.array([[0.9, 0.1], [0.5, 0.5]])

    np.testing.assert_allclose(estimate_utilities(Clf(), np.zeros((2, 1))), [0.2, 1.0])
    X = np.array([[0, 0], [0, 1]])
    np.testing.assert_allclose(estimate_utilities(IntervalModel([1.5, 0.5]), X), [1.5, 0.5])


def test_utility_estimate_validation():
    for u, c in ((-1, 1), (np.nan, 1), (1, 0), (1, -2)):
        with pytest.raises(InputError):
            UtilityEstimate(0, u, c)


def test_budget_arithmetic():
    b = Budget(10.0)
    b.debit(0.1)
    b.debit(0.2)
    assert b.total_spent == math.fsum([0.1, 0.2])
    assert b.remaining == pytest.approx(9.7)
    with pytest.raises(InputError):
        b.debit(100)
    with pytest.raises(InputError):
        b.debit(-1)
    with pytest.raises(InputError):
        Budget(-1)


@given(st.lists(st.tuples(st.floats(0, 5), st.floats(0.1, 10)), min_size=1, max_size=40),
       st.floats(0, 60), st.integers(0, 10**6), st.sampled_from(["cost_aware", "random",
                                                                  "top_utility"]))
def test_selection_respects_budget(items, B, seed, selector):
    cands = [UtilityEstimate(i, u, c) for i, (u, c) in enumerate(items)]
    chosen, budget = select_for_labeling(cands, Budget(B), seed, selector)
    assert len(set(chosen)) == len(chosen)
    spent = math.fsum(items[i][1] for i in chosen)
    assert spent <= B + 1e-9
    assert budget.total_spent == pytest.approx(spent)
    # every skipped candidate was unaffordable when the walk passed it
    skipped = [c for i, (u, c) in enumerate(items) if i not in chosen
               and (selector != "cost_aware" or u > 0)]
    assert all(c > budget.remaining - 1e-9 for c in skipped)


def test_cost_aware_first_draw_is_proportional_to_ratio():
    # exponential race: P(first = i) = r_i / sum r
    cands = [UtilityEstimate(0, 1.0, 1.0), UtilityEstimate(1, 2.0, 1.0),
             UtilityEstimate(2, 3.0, 2.0), UtilityEstimate(3, 4.0, 1.0)]
    ratios = np.array([c.ratio for c in cands])
    counts = np.zeros(4)
    trials = 4000
    for s in range(trials):
        chosen, _ = select_for_labeling(cands, Budget(2.0), seed=s)
        counts[chosen[0]] += 1
    expected = trials * ratios / ratios.sum()
    assert stats.chisquare(counts, expected).pvalue > 1e-3


def test_zero_utility_never_drawn_by_cost_aware():
    cands = [UtilityEstimate(0, 0.0, 1.0), UtilityEstimate(1, 1.0, 1.0)]
    for s in range(20):
        chosen, _ = select_for_labeling(cands, Budget(5.0), seed=s)
        assert chosen == [1]


def test_top_utility_order_and_unknown_selector():
    cands = [UtilityEstimate(i, u, 1.0) for i, u in enumerate([0.3, 0.9, 0.1, 0.5])]
    chosen, _ = select_for_labeling(cands, Budget(2.0), selector="top_utility")
    assert chosen == [1, 3]
    with pytest.raises(InputError):
        select_for_labeling(cands, Budget(2.0), selector="best")
    assert select_for_labeling([], Budget(2.0))[0] == []


def test_selection_is_deterministic_per_seed():
    rng = np.random.default_rng(0)
    cands = [UtilityEstimate(i, float(u), float(c))
             for i, (u, c) in enumerate(zip(rng.random(50), rng.uniform(0.5, 3, 50)))]
    a, _ = select_for_labeling(cands, Budget(20), seed=11)
    b, _ = select_for_labeling(cands, Budget(20), seed=11)
    assert a == b


def make_pool(n=20):
    X = np.column_stack([np.arange(n, dtype=float), np.arange(n) % 2])
    return StateSet(X, costs=np.linspace(1, 3, n), ids=np.arange(n) + 1000)


def test_labeling_round_writes_labels_and_log():
    pool = make_pool()
    pool.labels[0] = 5.0  # already labeled rows are never offered
    log = LabelLog()
    res = run_labeling_round(pool, IntervalModel([1.0, 2.0]), Budget(10.0), FixedOracle(),
                             seed=1, round_index=3, label_log=log)
    assert 0 not in res.positions
    assert res.cost <= 10.0
    assert res.budget.total_spent == pytest.approx(res.cost)
    for p in res.positions:
        assert pool.labels[p] == pool.X[p, 0]
    assert [r[0] for r in log.rows] == [1000 + p for p in res.positions]
    assert all(r[3] == 3 for r in log.rows)
    text = log.to_csv().splitlines()
    assert text[0] == "sample_id,label,cost_paid,round"
    assert len(text) == 1 + len(res.positions)


def test_labeling_round_charges_paid_cost_and_skips_failures():
    pool = make_pool()
    oracle = FixedOracle(surcharge=0.5, fail_ids={1000 + i for i in range(0, 20, 2)})
    res = run_labeling_round(pool, IntervalModel([1.0, 1.0]), Budget(12.0), oracle, seed=2)
    assert all(pool.ids[p] % 2 == 1 for p in res.positions)
    for p, c in zip(res.positions, res.costs):
        assert pool.costs[p] == c
    assert res.cost <= 12.0
    # failed samples were not charged and stay unlabeled
    assert np.isnan(pool.labels[0])


def test_labeling_round_empty_cases():
    pool = make_pool()
    res = run_labeling_round(pool, IntervalModel([1, 1]), Budget(0.0), FixedOracle())
    assert res.positions == []
    pool.labels[:] = 1.0
    res = run_labeling_round(pool, IntervalModel([1, 1]), Budget(5.0), FixedOracle())
    assert res.positions == []
