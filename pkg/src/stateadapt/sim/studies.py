"""Small controlled studies behind the acceptance checks and demos.

``source_selection_study``
    Does distribution distance predict how useful a source model is?
``noise_inflation_study``
    How much does clamped privacy noise inflate measured discrepancy?
``privacy_accuracy_study``
    Does store-side noise hurt end-to-end adaptation?
``planted_repository``
    Well separated repositories for checking clustered matching.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, List, Sequence

import numpy as np
from scipy.stats import pearsonr

from ..state_math import KernelSpec, StateSet, median_bandwidth, mmd, subsample
from ..store import NoiseSpec, add_privacy_noise
from .environments import EnvironmentSpec, gen_environment
from .learners import EnsembleLearner, LearnerConfig
from .strategies import SuiteConfig, run_suite


@dataclass
class SelectionBatch:
    seed: int
    mmd: np.ndarray
    l2: np.ndarray
    gain: np.ndarray

    @property
    def r_mmd(self):
        return float(pearsonr(-self.mmd, self.gain)[0])

    @property
    def r_l2(self):
        return float(pearsonr(-self.l2, self.gain)[0])


def source_selection_study(seed, n_sources=20, n_labeled=400, sample_size=377, dim=5,
                           informative=3) -> SelectionBatch:
    """Score a family of shifted sources against one target.

    Each source gets a model fit on ``n_labeled`` of its own noisy labels.
    The gain of a source is that model's score on the target test set minus
    the score of an untrained model, i.e. what reusing it buys before any
    target labels arrive. Sources differ in informative mean, nuisance
    mean, spread and tail weight, so mean distance alone is a poor guide.
    """
    rng = np.random.default_rng([seed, 4])
    lc = LearnerConfig(dim=dim)
    k = informative
    tgt = gen_environment(EnvironmentSpec(seed=seed * 100, dim=dim, informative=k,
                                          nuisance_scale=0.4, tail_weight=0.1,
                                          pool_size=1000, test_size=1000))
    cold = EnsembleLearner(lc, seed).score(tgt.test_X, tgt.test_y)
    t_sub = subsample(tgt.pool, sample_size, 0)
    rows = []
    for i in range(n_sources):
        off = np.zeros(dim)
        d = rng.normal(size=k)
        off[:k] = d / np.linalg.norm(d) * rng.uniform(0, 1.5)
        if dim > k:
            e = rng.normal(size=dim - k)
            off[k:] = e / np.linalg.norm(e) * rng.uniform(0, 1.0)
        scale = float(np.exp(rng.uniform(np.log(0.4), np.log(1.6))))
        tail = float(rng.uniform(0, 0.4))
        src = gen_environment(EnvironmentSpec(seed=seed * 100 + i + 1, dim=dim, informative=k,
                                              mean_offset=tuple(off), scale=scale,
                                              nuisance_scale=0.4, tail_weight=tail,
                                              pool_size=1000, test_size=10))
        model = EnsembleLearner(lc, seed + i)
        y = src.pool_labels[:n_labeled] + 0.2 * np.random.default_rng(i).normal(size=n_labeled)
        model.fit_closed_form(src.pool.X[:n_labeled], y)
        gain = model.score(tgt.test_X, tgt.test_y) - cold
        d_mmd = mmd(subsample(src.pool, sample_size, 0), t_sub)
        d_l2 = np.linalg.norm(src.pool.X.mean(0) - tgt.pool.X.mean(0))
        rows.append((d_mmd, d_l2, gain))
    a = np.array(rows)
    return SelectionBatch(seed, a[:, 0], a[:, 1], a[:, 2])


@dataclass
class InflationFit:
    sigma: float
    clamps: np.ndarray
    inflation: np.ndarray
    coef: float
    r2: float


def noise_inflation_study(sigma, clamps=(0.1, 0.2, 0.3, 0.4, 0.5), n=500, trials=10,
                          dim=2) -> InflationFit:
    """Mean rise in MMD(noised S, T) over MMD(S, T), fit as ``coef * clamp^2``.

    S and T are drawn from the same standard normal, so any rise comes from
    the noise alone. The kernel bandwidth is fixed from the clean pair.
    """
    clamps = np.asarray(clamps, dtype=float)
    infl = np.zeros(len(clamps))
    for j, c in enumerate(clamps):
        vals = []
        for tr in range(trials):
            rng = np.random.default_rng([tr, 9])
            S = rng.normal(size=(n, dim))
            T = rng.normal(size=(n, dim))
            kern = KernelSpec(median_bandwidth(S, T))
            Sn = add_privacy_noise(StateSet(S), NoiseSpec(sigma, c), seed=tr).X
            vals.append(mmd(Sn, T, kern) - mmd(S, T, kern))
        infl[j] = np.mean(vals)
    x = clamps ** 2
    coef = float(x @ infl / (x @ x))  # least squares through the origin
    resid = infl - coef * x
    r2 = float(1.0 - np.sum(resid ** 2) / np.sum((infl - infl.mean()) ** 2))
    return InflationFit(float(sigma), clamps, infl, coef, r2)


def privacy_accuracy_study(sigmas: Sequence[float] = (0.0, 0.5, 1.0), clamp=1.0, seed=7,
                           max_rounds=4, cfg: SuiteConfig = None) -> Dict[float, float]:
    """Mean final accuracy of ``ema_full`` over the drift suite per noise level.

    Runs a fixed number of rounds (no early stop) so accuracies compare like
    for like.
    """
    base = cfg or SuiteConfig()
    out = {}
    for s in sigmas:
        c = replace(base, target_accuracy=None, max_rounds=max_rounds,
                    noise_sigma=float(s), noise_clamp=clamp)
        rows = run_suite("ema_full", c, seed)
        out[float(s)] = float(np.mean([r["final_accuracy"] for r in rows]))
    return out


def planted_repository(M, K, dim=2, n=60, spread=40.0, width=0.5, seed=0):
    """``M`` sample sets in ``K`` tight, far apart groups, plus a target.

    Within a group, member ``j`` sits at a small distinct offset from the
    group center, so the exhaustive argmin is unique. Returns
    ``(sets, target)``.
    """
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-spread, spread, size=(K, dim))
    sets: List[np.ndarray] = []
    for i in range(M):
        g = i % K
        mu = centers[g] + rng.normal(0, 1.0, size=dim)
        sets.append(mu + width * rng.normal(size=(n, dim)))
    g = int(rng.integers(K))
    target = centers[g] + rng.normal(0, 1.0, size=dim) + width * rng.normal(size=(n, dim))
    return sets, target
