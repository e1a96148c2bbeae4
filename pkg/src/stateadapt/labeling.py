"""Cost-aware choice of which inputs to label.

Utility is the model's own uncertainty on an input. Candidates are drawn
without replacement with probability proportional to utility / cost, and a
drawn candidate is labeled only if it still fits the budget.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import List, Protocol, Sequence, Tuple

import numpy as np

from .errors import InputError
from .state_math import StateSample, StateSet

log = logging.getLogger(__name__)

SELECTORS = ("cost_aware", "random", "top_utility")


@dataclass
class UtilityEstimate:
    index: int
    utility: float
    cost: float

    def __post_init__(self):
        if not np.isfinite(self.utility) or self.utility < 0:
            raise InputError(f"utility must be finite and >= 0, got {self.utility}")
        if not self.cost > 0:
            raise InputError(f"cost must be positive, got {self.cost}")

    @property
    def ratio(self):
        return self.utility / self.cost


@dataclass
class Budget:
    """Labeling allowance. ``remaining`` is recomputed from the exact spend list."""

    initial: float
    spent: List[float] = field(default_factory=list)

    def __post_init__(self):
        if self.initial < 0:
            raise InputError("budget must be nonnegative")

    @property
    def remaining(self):
        return max(self.initial - math.fsum(self.spent), 0.0)

    @property
    def total_spent(self):
        return math.fsum(self.spent)

    def can_afford(self, cost):
        return cost <= self.remaining

    def debit(self, cost):
        if cost < 0 or cost > self.remaining:
            raise InputError(f"cannot debit {cost} from {self.remaining}")
        self.spent.append(float(cost))


class LabelingOracle(Protocol):
    def label(self, sample: StateSample) -> Tuple[float, float]:
        """Return ``(label, cost actually incurred)``."""


def utility_classification(class_probs) -> float:
    """``1 - (p_top1 - p_top2)``: 0 when fully confident, 1 on a top-2 tie."""
    p = np.asarray(class_probs, dtype=float).ravel()
    if p.size < 2:
        raise InputError("need at least two class probabilities")
    if abs(p.sum() - 1.0) > 1e-6 or np.any(p < 0):
        raise InputError("class probabilities must be nonnegative and sum to 1")
    top2 = np.partition(p, -2)[-2:]
    return float(1.0 - (top2[1] - top2[0]))


def utility_regression(interval) -> float:
    lo, hi = interval
    if hi < lo:
        raise InputError(f"interval upper end {hi} below lower end {lo}")
    return float(hi - lo)


def ensemble_interval(member_predictions):
    """Per-sample ``(min, max)`` over ensemble members.

    ``member_predictions`` has shape (n_members, n_samples).
    """
    P = np.atleast_2d(np.asarray(member_predictions, dtype=float))
    return P.min(axis=0), P.max(axis=0)


def estimate_utilities(model, X) -> np.ndarray:
    """Utility of each row of ``X`` under ``model``.

    Classifiers expose ``class_probs(X)``; regressors expose
    ``predict_interval(X) -> (lo, hi)``. A model offering both decides
    through an ``is_classifier`` attribute.
    """
    if getattr(model, "is_classifier", hasattr(model, "class_probs")):
        P = model.class_probs(X)
        top2 = np.sort(P, axis=1)[:, -2:]
        return 1.0 - (top2[:, 1] - top2[:, 0])
    lo, hi = model.predict_interval(X)
    return np.maximum(np.asarray(hi) - np.asarray(lo), 0.0)


def _race_order(weights, rng):
    # exponential race: argsort of -ln(u)/w is weighted sampling without replacement
    w = np.asarray(weights, dtype=float)
    u = rng.random(len(w))
    # rank by log(-ln u) - log w, which cannot overflow for tiny w
    pos = w > 0
    keys = np.full(len(w), np.inf)
    with np.errstate(divide="ignore"):
        keys[pos] = np.log(-np.log(u[pos])) - np.log(w[pos])
    order = np.argsort(keys, kind="stable")
    return order[pos[order]]


def select_for_labeling(candidates: Sequence[UtilityEstimate], budget: Budget, seed=0,
                        selector="cost_aware"):
    """Choose candidates to label under ``budget``.

    Parameters
    ----------
    candidates : sequence of UtilityEstimate
    budget : Budget
        Debited in place for every chosen candidate.
    selector : {"cost_aware", "random", "top_utility"}
        ``cost_aware`` draws proportionally to utility / cost. ``random``
        draws uniformly and ``top_utility`` walks candidates by decreasing
        utility; both exist as baselines.

    Returns
    -------
    chosen : list of int
        ``UtilityEstimate.index`` values in draw order.
    budget : Budget
    """
    if selector not in SELECTORS:
        raise InputError(f"unknown selector {selector!r}")
    if not candidates or budget.remaining <= 0:
        return [], budget
    rng = np.random.default_rng(seed)
    if selector == "cost_aware":
        order = _race_order([c.ratio for c in candidates], rng)
    elif selector == "random":
        order = rng.permutation(len(candidates))
    else:
        order = np.argsort([-c.utility for c in candidates], kind="stable")
    cheapest = min(c.cost for c in candidates)
    chosen = []
    for pos in order:
        c = candidates[pos]
        if budget.can_afford(c.cost):
            budget.debit(c.cost)
            chosen.append(c.index)
        if budget.remaining < cheapest:
            break
    return chosen, budget


@dataclass
class LabelingRound:
    positions: List[int]
    labels: List[float]
    costs: List[float]
    budget: Budget

    @property
    def cost(self):
        return math.fsum(self.costs)


class LabelLog:
    """Append-only record of acquired labels, one row per label."""

    header = ("sample_id", "label", "cost_paid", "round")

    def __init__(self):
        self.rows = []

    def append(self, sample_id, label, cost, round_index):
        self.rows.append((int(sample_id), float(label), float(cost), int(round_index)))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header)
        for sid, lab, cost, r in self.rows:
            w.writerow([sid, repr(lab), repr(cost), r])
        return buf.getvalue()


def run_labeling_round(pool: StateSet, model, budget: Budget, oracle: LabelingOracle,
                       seed=0, selector="cost_aware", declared_costs=None,
                       round_index=0, label_log: LabelLog = None,
                       utilities=None) -> LabelingRound:
    """Select, label and record samples from the unlabeled part of ``pool``.

    Labels and paid costs are written into ``pool`` in place. Utilities are
    computed once at round start. ``declared_costs`` (defaults to
    ``pool.costs``) are the costs the selector plans with; the budget is
    debited with what the oracle reports. Oracle failures are logged and
    skipped without charge.
    """
    unl = np.flatnonzero(~pool.labeled_mask)
    if len(unl) == 0 or budget.remaining <= 0:
        return LabelingRound([], [], [], budget)
    declared = pool.costs if declared_costs is None else np.asarray(declared_costs)
    if utilities is None:
        utilities = estimate_utilities(model, pool.X[unl]) if selector != "random" \
            else np.ones(len(unl))
    cands = [UtilityEstimate(int(i), float(u), float(declared[i]))
             for i, u in zip(unl, utilities)]
    # plan against a scratch budget, then charge the real one with paid costs
    plan, _ = select_for_labeling(cands, Budget(budget.remaining), seed, selector)
    positions, labels, costs = [], [], []
    for i in plan:
        try:
            value, paid = oracle.label(pool[i])
        except Exception as exc:  # noqa: BLE001 - any oracle failure skips the sample
            log.warning("oracle failed on sample %s: %s", pool.ids[i], exc)
            continue
        if not budget.can_afford(paid):
            continue
        budget.debit(paid)
        pool.labels[i] = value
        pool.costs[i] = paid
        positions.append(int(i))
        labels.append(float(value))
        costs.append(float(paid))
        if label_log is not None:
            label_log.append(pool.ids[i], value, paid, round_index)
    return LabelingRound(positions, labels, costs, budget)
