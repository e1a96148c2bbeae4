"""Adaptation loop: warm start, then per round decide between labeling and
plain training, size the labeling budget, and register the result.

Benefit/cost arithmetic works on *positive* uncertainty reductions:

* continued training earns ``r_cont = U_{t-1} - U_t`` at cost ``C_t``;
* labeling earns ``r_cont + delta_u_label`` at cost ``C*_t + B_t`` with
  ``C*_t = C_t * (1 + delta_n / n_t)``.

Labeling is triggered when its ratio strictly exceeds that of training.

The model handle is duck-typed. It must provide ``clone()``,
``train_step(X, y, epochs, ids=None, incremental=False) -> cost``, ``score(X, y)``,
``predict(X)``,
``to_bytes()``, ``distill(X, y) -> cost`` and either ``predict_interval``
or ``class_probs``.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .config import build, parse_kv
from .errors import InputError, NotFoundError
from .labeling import (Budget, LabelLog, estimate_utilities, run_labeling_round,
                       SELECTORS)
from .state_math import DEFAULT_DELTA, StateSet, dkw_sample_size, subsample
from .store import StateEntry, StateStore
from .transformer import fit_regime_aware, map_to_source_regime

log = logging.getLogger(__name__)

WARM_STARTS = ("match", "latest", "none")


@dataclass
class AdaptationConfig:
    proxy_fraction: float = 0.01
    initial_budget: float = 100.0
    aimd_increment: Optional[float] = None  # default 10% of initial_budget
    target_accuracy: Optional[float] = None
    max_rounds: int = 50
    epochs_per_round: int = 5
    seed: int = 0
    selector: str = "cost_aware"
    trigger: str = "benefit"  # "benefit" | "always"
    budget_rule: str = "aimd"  # "aimd" | "fixed"
    warm_start: str = "match"
    use_transform: bool = True
    regimes: int = 4
    latent_dims: Optional[int] = None
    mu: float = 1.0
    neighbors: int = 5
    sample_epsilon: float = 0.05
    sample_delta: float = DEFAULT_DELTA
    eval_pool_size: Optional[int] = None  # None: the whole pool
    register: bool = True

    def __post_init__(self):
        if not 0 < self.proxy_fraction < 1:
            raise InputError("proxy_fraction must lie in (0, 1)")
        if self.initial_budget < 0:
            raise InputError("initial_budget must be >= 0")
        if self.aimd_increment is None:
            self.aimd_increment = 0.1 * self.initial_budget
        if self.initial_budget > 0 and not self.aimd_increment > 0:
            raise InputError("aimd_increment must be positive")
        if self.selector not in SELECTORS:
            raise InputError(f"selector must be one of {SELECTORS}")
        if self.trigger not in ("benefit", "always"):
            raise InputError("trigger must be 'benefit' or 'always'")
        if self.budget_rule not in ("aimd", "fixed"):
            raise InputError("budget_rule must be 'aimd' or 'fixed'")
        if self.warm_start not in WARM_STARTS:
            raise InputError(f"warm_start must be one of {WARM_STARTS}")
        if self.max_rounds < 1 or self.epochs_per_round < 1:
            raise InputError("max_rounds and epochs_per_round must be >= 1")

    @classmethod
    def from_text(cls, text, required=()):
        return build(cls, parse_kv(text), required=required)

    @property
    def transform_sample_size(self):
        return dkw_sample_size(self.sample_epsilon, self.sample_delta)


@dataclass
class BenefitEstimate:
    delta_u_label: float = 0.0
    delta_n: float = 0.0
    positions: List[int] = field(default_factory=list)
    label_cost: float = 0.0
    probe_cost: float = 0.0


@dataclass
class RoundStats:
    t: int
    U_t: float
    C_t: float
    B_t: float
    n_t: int
    labeled_this_round: int = 0
    cost_labeled: float = 0.0
    triggered: bool = False
    ratio_cont: float = 0.0
    ratio_label: float = 0.0
    r_cont: float = 0.0
    delta_u_label: float = 0.0
    delta_n: float = 0.0
    c_cont: float = 0.0
    c_star: float = 0.0
    proxy_labeled: int = 0
    proxy_cost: float = 0.0
    probe_cost: float = 0.0
    U_prev: float = 0.0
    realized_ratio: float = 0.0
    accuracy: float = float("nan")


LOG_COLUMNS = [f.name for f in RoundStats.__dataclass_fields__.values()]


def round_log_csv(rounds: List[RoundStats]) -> str:
    """Round log; the first ten columns are the fixed public schema."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in rounds:
        row = asdict(r)
        w.writerow([_cell(row[c]) for c in LOG_COLUMNS])
    return buf.getvalue()


def _cell(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    return v


def parse_round_log(text: str) -> List[RoundStats]:
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    types = {f.name: f.type for f in RoundStats.__dataclass_fields__.values()}
    for row in rows:
        kw = {}
        for k, v in row.items():
            t = types[k]
            if t in (int, "int"):
                kw[k] = int(v)
            elif t in (bool, "bool"):
                kw[k] = bool(int(v))
            else:
                kw[k] = float(v)
        out.append(RoundStats(**kw))
    return out


def projected_cost(C_t, n_t, delta_n):
    """Training cost after adding ``delta_n`` samples to ``n_t``.

    ``n_t == 0`` has no meaningful ratio; the cost is taken to double.
    """
    if n_t <= 0:
        return C_t * 2.0
    return C_t * (1.0 + delta_n / n_t)


def decision_ratios(r_cont, C_t, benefit: BenefitEstimate, B_t, n_t):
    c_star = projected_cost(C_t, n_t, benefit.delta_n)
    ratio_cont = r_cont / C_t if C_t > 0 else 0.0
    denom = c_star + B_t
    ratio_label = (r_cont + benefit.delta_u_label) / denom if denom > 0 else 0.0
    return ratio_cont, ratio_label, c_star


def should_label(r_cont, C_t, benefit: BenefitEstimate, B_t, n_t) -> bool:
    """Whether labeling's projected benefit per cost beats continued training.

    ``r_cont`` is the last observed reduction ``U_{t-1} - U_t``. A stalled or
    regressing model (``r_cont <= 0``) labels whenever any benefit is
    projected.
    """
    if r_cont <= 0:
        return benefit.delta_u_label > 0
    ratio_cont, ratio_label, _ = decision_ratios(r_cont, C_t, benefit, B_t, n_t)
    return ratio_label > ratio_cont


def update_budget_aimd(B_prev, ratio_prev, ratio_now, alpha, floor=0.0):
    """Add ``alpha`` when the realized ratio dropped, otherwise halve."""
    if B_prev <= 0:
        raise InputError("B_prev must be positive")
    nxt = B_prev + alpha if ratio_now < ratio_prev else B_prev / 2.0
    return max(nxt, floor)


@dataclass
class AdaptationRequest:
    """One environment to adapt.

    ``pool`` holds the environment's inputs (NaN labels for unlabeled rows)
    with declared per-sample labeling costs. ``new_model(seed)`` builds a
    fresh learner, ``load_model(blob, seed)`` rebuilds a stored one.
    """

    pool: StateSet
    new_model: Callable
    load_model: Callable
    config: AdaptationConfig
    env_id: str = "env"
    org_tag: str = "public"
    eval_X: Optional[np.ndarray] = None
    eval_y: Optional[np.ndarray] = None
    now: float = 0.0


@dataclass
class AdaptationResult:
    model: object
    pool: StateSet
    rounds: List[RoundStats]
    label_log: LabelLog
    match: object = None
    source_env_id: Optional[str] = None
    transform_cost: float = 0.0
    warm_accuracy: float = float("nan")
    reached_target: bool = False
    registered_id: Optional[str] = None

    @property
    def training_cost(self):
        return math.fsum(r.C_t for r in self.rounds)

    @property
    def labeling_cost(self):
        return math.fsum(r.cost_labeled + r.proxy_cost for r in self.rounds)

    @property
    def overhead_cost(self):
        return math.fsum(r.probe_cost for r in self.rounds) + self.transform_cost

    @property
    def total_cost(self):
        return self.training_cost + self.labeling_cost + self.overhead_cost

    @property
    def final_accuracy(self):
        return self.rounds[-1].accuracy if self.rounds else float("nan")

    @property
    def epochs(self):
        return len(self.rounds) * self.config_epochs

    config_epochs: int = 1


def _uncertainty(model, X):
    return float(np.sum(estimate_utilities(model, X)))


def _labeled(pool):
    m = pool.labeled_mask
    return pool.X[m], pool.labels[m], pool.ids[m]


def warm_start(req: AdaptationRequest, store: Optional[StateStore], seed):
    """Build the round-0 model. Returns ``(model, match, source_id, cost)``.

    With the transform on, the matched source model labels the target pool
    through the pre-image map and a fresh model is distilled from those
    pseudo-labels; otherwise the source model is reused as is.
    """
    cfg = req.config
    if store is None or cfg.warm_start == "none":
        return req.new_model(seed), None, None, 0.0
    try:
        visible = store.lookup_visible(req.org_tag)
        if not visible:
            raise NotFoundError("empty repository")
        m = cfg.transform_sample_size
        target_sub = subsample(req.pool, m, seed)
        match = None
        if cfg.warm_start == "latest":
            entry = visible[-1]
        else:
            match = store.match(target_sub, req.org_tag, seed=seed, epsilon=cfg.sample_epsilon)
            entry = store.get(match.source_env_id)
        store.touch(entry.env_id, req.now)
    except (NotFoundError, OSError) as exc:
        if not isinstance(exc, NotFoundError):
            log.warning("store unavailable (%s); cold start", exc)
        return req.new_model(seed), None, None, 0.0
    source_model = req.load_model(entry.model_blob, seed)
    if not cfg.use_transform:
        return source_model, match, entry.env_id, 0.0
    src_sub = subsample(entry.samples, m, seed)
    regime = fit_regime_aware(src_sub, target_sub, R=cfg.regimes, latent_dims=cfg.latent_dims,
                              mu=cfg.mu, seed=seed)
    # the transform is fit on the subsample but extends to every target input
    mapped = map_to_source_regime(regime, req.pool.X, k=cfg.neighbors)
    pseudo = source_model.predict(mapped)
    model = req.new_model(seed)
    cost = model.distill(req.pool.X, pseudo)
    return model, match, entry.env_id, cost


def estimate_benefit(model, pool: StateSet, proxy: np.ndarray, p, B_t, oracle, seed,
                     selector="cost_aware", round_index=0, label_log=None,
                     epochs=1, min_budget=0.0) -> BenefitEstimate:
    """Label part of the proxy with budget ``p * B_t`` and probe the effect.

    A clone of ``model`` takes one incremental training step (``epochs``
    epochs) on the newly labeled proxy samples, i.e. it learns them on top of
    what it already knows. The drop in summed proxy uncertainty, scaled by
    ``1/p``, is the projected benefit of a full labeling round. Newly labeled samples stay labeled in
    ``pool``. ``min_budget`` floors the proxy budget so that a small ``B_t``
    still buys at least one probe label.
    """
    if len(proxy) == 0 or p * B_t <= 0:
        return BenefitEstimate()
    sub = pool.take(proxy)
    res = run_labeling_round(sub, model, Budget(max(p * B_t, min_budget)), oracle, seed=seed, selector=selector,
                             round_index=round_index, label_log=label_log)
    for pos in res.positions:
        pool.labels[proxy[pos]] = sub.labels[pos]
        pool.costs[proxy[pos]] = sub.costs[pos]
    if not res.positions:
        return BenefitEstimate()
    Xp = sub.X
    before = _uncertainty(model, Xp)
    probe = model.clone()
    probe_cost = probe.train_step(sub.X[res.positions], sub.labels[res.positions], epochs,
                                  ids=sub.ids[res.positions], incremental=True)
    after = _uncertainty(probe, Xp)
    return BenefitEstimate(delta_u_label=max(before - after, 0.0) / p,
                           delta_n=len(res.positions) / p,
                           positions=[int(proxy[i]) for i in res.positions],
                           label_cost=res.cost, probe_cost=probe_cost)


def adapt(req: AdaptationRequest, store: Optional[StateStore], oracle) -> AdaptationResult:
    """Run the full adaptation loop for one request.

    Round 0 always labels with the initial budget (no trigger can be
    evaluated before a training round has completed). Afterwards each round
    estimates the labeling benefit on the fixed proxy, labels when
    :func:`should_label` says so, trains ``epochs_per_round`` epochs and
    updates the budget. The loop stops at ``target_accuracy`` (evaluated on
    ``eval_X, eval_y``) or after ``max_rounds``.
    """
    cfg = req.config
    seed = cfg.seed
    rng = np.random.default_rng(seed)
    pool = req.pool.with_features(req.pool.X)
    declared = pool.costs.copy()

    model, match, source_id, transform_cost = warm_start(req, store, seed)
    result = AdaptationResult(model=model, pool=pool, rounds=[], label_log=LabelLog(),
                              match=match, source_env_id=source_id,
                              transform_cost=transform_cost, config_epochs=cfg.epochs_per_round)
    has_eval = req.eval_X is not None
    if has_eval:
        result.warm_accuracy = float(model.score(req.eval_X, req.eval_y))

    unl = np.flatnonzero(~pool.labeled_mask)
    n_proxy = int(round(cfg.proxy_fraction * len(unl)))
    proxy = np.sort(rng.choice(unl, n_proxy, replace=False)) if n_proxy > 0 else np.zeros(0, int)
    main_mask = np.ones(len(pool), dtype=bool)
    main_mask[proxy] = False
    main_idx = np.flatnonzero(main_mask)
    if cfg.eval_pool_size is None or cfg.eval_pool_size >= len(pool):
        eval_idx = np.arange(len(pool))
    else:
        eval_idx = np.sort(rng.choice(len(pool), cfg.eval_pool_size, replace=False))
    X_unc = pool.X[eval_idx]

    labeling_on = cfg.initial_budget > 0
    floor = float(np.median(declared)) if labeling_on else 0.0
    B = cfg.initial_budget
    U_prev = _uncertainty(model, X_unc)
    r_last, ratio_prev = 0.0, None

    for t in range(cfg.max_rounds):
        round_seed = seed * 1_000_003 + t
        n_t = int(pool.labeled_mask.sum())
        stats = RoundStats(t=t, U_t=0.0, C_t=0.0, B_t=B, n_t=n_t, U_prev=U_prev)

        triggered = False
        if labeling_on and t == 0:
            triggered = True
        elif labeling_on:
            if cfg.trigger == "always":
                triggered = True
            else:
                ben = estimate_benefit(model, pool, proxy, cfg.proxy_fraction, B, oracle,
                                       round_seed, cfg.selector, t, result.label_log,
                                       epochs=cfg.epochs_per_round, min_budget=floor)
                c_cont = n_t * cfg.epochs_per_round
                stats.c_cont = float(c_cont)
                stats.r_cont = r_last
                stats.delta_u_label, stats.delta_n = ben.delta_u_label, ben.delta_n
                stats.proxy_labeled, stats.proxy_cost = len(ben.positions), ben.label_cost
                stats.probe_cost = ben.probe_cost
                stats.ratio_cont, stats.ratio_label, stats.c_star = decision_ratios(
                    r_last, c_cont, ben, B, n_t)
                triggered = should_label(r_last, c_cont, ben, B, n_t)
        stats.triggered = triggered

        if triggered:
            view = pool.take(main_idx)
            res = run_labeling_round(view, model, Budget(B), oracle, seed=round_seed,
                                     selector=cfg.selector, round_index=t,
                                     label_log=result.label_log)
            for pos in res.positions:
                pool.labels[main_idx[pos]] = view.labels[pos]
                pool.costs[main_idx[pos]] = view.costs[pos]
            stats.labeled_this_round = len(res.positions)
            stats.cost_labeled = res.cost

        X_l, y_l, id_l = _labeled(pool)
        stats.C_t = (float(model.train_step(X_l, y_l, cfg.epochs_per_round, ids=id_l))
                     if len(y_l) else 0.0)
        U_t = _uncertainty(model, X_unc)
        stats.U_t = U_t
        r_last = U_prev - U_t
        spent = stats.cost_labeled + stats.proxy_cost
        denom = stats.C_t + spent
        stats.realized_ratio = r_last / denom if denom > 0 else 0.0
        if has_eval:
            stats.accuracy = float(model.score(req.eval_X, req.eval_y))
        result.rounds.append(stats)

        if labeling_on and cfg.budget_rule == "aimd" and ratio_prev is not None:
            B = update_budget_aimd(B, ratio_prev, stats.realized_ratio,
                                   cfg.aimd_increment, floor)
        ratio_prev = stats.realized_ratio
        U_prev = U_t
        if (cfg.target_accuracy is not None and has_eval
                and stats.accuracy >= cfg.target_accuracy):
            result.reached_target = True
            break

    result.model = model
    if store is not None and cfg.register:
        try:
            entry = StateEntry(env_id=req.env_id, model_blob=model.to_bytes(),
                               samples=subsample(pool, store.policy.sample_limit, seed),
                               accuracy=result.final_accuracy if has_eval else 0.0,
                               org_tag=req.org_tag)
            result.registered_id = store.register(entry, now=req.now)
        except OSError as exc:
            log.warning("could not register %s: %s", req.env_id, exc)
    return result


def replay_decision(row: RoundStats) -> bool:
    """Recompute the trigger decision of a logged round from its own fields."""
    ben = BenefitEstimate(delta_u_label=row.delta_u_label, delta_n=row.delta_n)
    return should_label(row.r_cont, row.c_cont, ben, row.B_t, row.n_t)
