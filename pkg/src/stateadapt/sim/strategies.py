"""Strategy matrix, drift suite and benchmark reports.

A benchmark cell is one (strategy, seed) pair. The cell seeds a repository
by adapting the base deployments from scratch, then walks the drift suite in
order, adapting to each environment and registering the result so that
later environments can reuse earlier ones.
"""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..config import build, parse_kv
from ..errors import InputError
from ..orchestrator import (AdaptationConfig, AdaptationRequest, AdaptationResult, adapt,
                            round_log_csv)
from ..store import NoiseSpec, StateEntry, StorePolicy, StateStore
from .environments import Environment, EnvironmentSpec, gen_environment, shifted
from .learners import EnsembleLearner, LearnerConfig

STRATEGIES = ("ema_full", "ema_no_st", "ema_no_la", "cost_agnostic_la",
              "continuous_learning", "cold_start", "oracle_all_data")

# AdaptationConfig overrides per strategy; oracle_all_data is handled apart
_PLANS = {
    "ema_full": dict(warm_start="match", use_transform=True, selector="cost_aware",
                     trigger="benefit", budget_rule="aimd"),
    "ema_no_st": dict(warm_start="latest", use_transform=False, selector="cost_aware",
                      trigger="benefit", budget_rule="aimd"),
    "ema_no_la": dict(warm_start="match", use_transform=True, selector="random",
                      trigger="benefit", budget_rule="aimd"),
    "cost_agnostic_la": dict(warm_start="match", use_transform=True, selector="top_utility",
                             trigger="benefit", budget_rule="aimd"),
    "continuous_learning": dict(warm_start="latest", use_transform=False, selector="random",
                                trigger="always", budget_rule="fixed"),
    "cold_start": dict(warm_start="none", use_transform=False, selector="random",
                       trigger="always", budget_rule="fixed"),
}

FAMILIES = {
    # nuisance shift, informative mean shift, added tail weight, label drift
    "near": (0.3, 0.1, 0.0, 0.0),
    "medium": (1.2, 0.3, 0.1, 0.03),
    "far": (2.5, 0.5, 0.2, 0.06),
}

REPORT_COLUMNS = ("seed", "strategy", "step", "env_id", "family", "source_env_id", "rounds",
                  "epochs_to_target", "reached", "labels", "total_training_cost",
                  "total_labeling_cost", "overhead_cost", "total_cost", "warm_accuracy",
                  "final_accuracy")


@dataclass
class SuiteConfig:
    """Everything a benchmark run depends on; loadable from key=value text."""

    seed: int = 7
    seeds: int = 1
    n_bases: int = 4
    per_family: int = 4
    dim: int = 5
    informative: int = 3
    pool_size: int = 3000
    test_size: int = 1000
    nuisance_scale: float = 0.4
    base_radius: float = 3.0
    tail_weight: float = 0.1
    cost_base: float = 5.0
    cost_beta: float = 1.0
    cost_power: float = 3.0
    cost_axes: str = "nuisance"
    target_accuracy: Optional[float] = 0.8  # None: run max_rounds
    max_rounds: int = 30
    epochs_per_round: int = 5
    initial_budget: float = 1000.0
    aimd_fraction: float = 0.3
    proxy_fraction: float = 0.05
    regimes: int = 2
    sample_epsilon: float = 0.07
    store_capacity: int = 64
    noise_sigma: float = 0.0
    noise_clamp: float = 1.0
    strategies: str = ",".join(STRATEGIES)
    workers: int = 1

    def __post_init__(self):
        unknown = set(self.strategy_list) - set(STRATEGIES)
        if unknown:
            raise InputError(f"unknown strategies {sorted(unknown)}")
        if self.n_bases < 1 or self.per_family < 1 or self.seeds < 1:
            raise InputError("n_bases, per_family and seeds must be >= 1")

    @property
    def strategy_list(self):
        return [s.strip() for s in self.strategies.split(",") if s.strip()]

    @classmethod
    def from_text(cls, text, required=()):
        return build(cls, parse_kv(text), required=required)

    def learner_config(self):
        return LearnerConfig(dim=self.dim)

    def adaptation_config(self, strategy, seed):
        if strategy not in _PLANS:
            raise InputError(f"unknown strategy {strategy!r}")
        return AdaptationConfig(proxy_fraction=self.proxy_fraction,
                                initial_budget=self.initial_budget,
                                aimd_increment=self.aimd_fraction * self.initial_budget,
                                target_accuracy=self.target_accuracy,
                                max_rounds=self.max_rounds,
                                epochs_per_round=self.epochs_per_round, seed=seed,
                                regimes=self.regimes, sample_epsilon=self.sample_epsilon,
                                **_PLANS[strategy])

    def store_policy(self, seed):
        noise = (NoiseSpec(self.noise_sigma, self.noise_clamp) if self.noise_sigma > 0 else None)
        return StorePolicy(capacity=self.store_capacity, noise=noise, seed=seed)


# -- environments ---------------------------------------------------------------

def base_specs(cfg: SuiteConfig, seed) -> List[EnvironmentSpec]:
    """The deployments a repository is seeded with.

    Bases sit on a circle in the nuisance block, so each has its own
    telemetry baseline.
    """
    rng = np.random.default_rng([seed, 101])
    out = []
    k = cfg.informative
    for b in range(cfg.n_bases):
        theta = 2 * np.pi * b / cfg.n_bases
        nuis = np.zeros(cfg.dim - k)
        if len(nuis):
            nuis[0] = cfg.base_radius * math.cos(theta)
        if len(nuis) > 1:
            nuis[1] = cfg.base_radius * math.sin(theta)
        inf = rng.normal(0.0, 0.3, size=k)
        off = tuple(float(v) for v in np.concatenate([inf, nuis]))
        out.append(EnvironmentSpec(seed=seed * 1000 + b, dim=cfg.dim, informative=k,
                                   mean_offset=off, nuisance_scale=cfg.nuisance_scale,
                                   tail_weight=cfg.tail_weight,
                                   cost_base=cfg.cost_base, cost_beta=cfg.cost_beta,
                                   cost_power=cfg.cost_power, cost_axes=cfg.cost_axes, pool_size=cfg.pool_size,
                                   test_size=cfg.test_size, name=f"s{seed}-base{b}"))
    return out


def drift_suite(cfg: SuiteConfig, seed) -> List[EnvironmentSpec]:
    """Near, medium and far shifts of the bases, family by family.

    Consecutive environments derive from different bases, so the most
    recent model is rarely the right one to start from.
    """
    bases = base_specs(cfg, seed)
    rng = np.random.default_rng([seed, 202])
    out = []
    k = cfg.informative
    idx = 100
    for family, (nuis, mean, tail, drift) in FAMILIES.items():
        for j in range(cfg.per_family):
            b = bases[j % len(bases)]
            direction = rng.normal(size=cfg.dim - k)
            direction /= max(np.linalg.norm(direction), 1e-12)
            mdir = rng.normal(size=k)
            mdir /= max(np.linalg.norm(mdir), 1e-12)
            out.append(shifted(b, seed * 1000 + idx, mean_shift=mean * mdir,
                               nuisance_shift=nuis * direction,
                               tail_weight=min(b.tail_weight + tail, 0.9),
                               label_drift=drift, name=f"s{seed}-{family}{j}"))
            idx += 1
    return out


def family_of(env_id):
    tag = env_id.split("-", 1)[-1]
    return tag.rstrip("0123456789")


# -- learners -------------------------------------------------------------------

@dataclass
class LearnerFactory:
    config: LearnerConfig

    def new(self, seed):
        return EnsembleLearner(self.config, seed)

    def load(self, blob, seed):
        return EnsembleLearner.from_bytes(blob, seed=seed)


# -- single strategy run --------------------------------------------------------

@dataclass
class StrategyOutcome:
    row: Dict
    result: Optional[AdaptationResult] = None


def _row(seed, strategy, step, env: Environment, res: AdaptationResult, cfg: AdaptationConfig):
    rounds = len(res.rounds)
    return dict(seed=seed, strategy=strategy, step=step, env_id=env.env_id,
                family=family_of(env.env_id), source_env_id=res.source_env_id or "",
                rounds=rounds, epochs_to_target=rounds * cfg.epochs_per_round,
                reached=int(res.reached_target), labels=len(res.label_log.rows),
                total_training_cost=res.training_cost, total_labeling_cost=res.labeling_cost,
                overhead_cost=res.overhead_cost, total_cost=res.total_cost,
                warm_accuracy=res.warm_accuracy, final_accuracy=res.final_accuracy)


def run_oracle_all_data(env: Environment, learner: LearnerFactory, seed, step=0,
                        target_accuracy=None):
    """Label the whole pool and fit it exactly; an upper bound on accuracy."""
    pool = env.pool.with_features(env.pool.X)
    costs = []
    for i in range(len(pool)):
        y, c = env.oracle.label(pool[i])
        pool.labels[i] = y
        costs.append(c)
    model = learner.new(seed)
    train = model.fit_closed_form(pool.X, pool.labels, ids=pool.ids)
    acc = model.score(env.test_X, env.test_y)
    reached = target_accuracy is None or acc >= target_accuracy
    row = dict(seed=seed, strategy="oracle_all_data", step=step, env_id=env.env_id,
               family=family_of(env.env_id), source_env_id="", rounds=1, epochs_to_target=1,
               reached=int(reached), labels=len(pool), total_training_cost=train,
               total_labeling_cost=math.fsum(costs), overhead_cost=0.0,
               total_cost=train + math.fsum(costs), warm_accuracy=float("nan"),
               final_accuracy=acc)
    return StrategyOutcome(row, None), model


def run_strategy(strategy, env: Environment, store: Optional[StateStore], cfg: SuiteConfig,
                 seed=0, step=0, now=0.0) -> StrategyOutcome:
    """Adapt to ``env`` with one strategy and report costs and accuracy.

    The adapted model is registered into ``store`` (when given), except for
    the all-data oracle.
    """
    if strategy not in STRATEGIES:
        raise InputError(f"unknown strategy {strategy!r}")
    learner = LearnerFactory(cfg.learner_config())
    if strategy == "oracle_all_data":
        out, _ = run_oracle_all_data(env, learner, seed, step, cfg.target_accuracy)
        return out
    acfg = cfg.adaptation_config(strategy, seed * 7919 + step)
    if strategy == "cold_start":
        store_used = None
    else:
        store_used = store
    req = AdaptationRequest(pool=env.pool, new_model=learner.new, load_model=learner.load,
                            config=acfg, env_id=env.env_id, eval_X=env.test_X,
                            eval_y=env.test_y, now=now)
    res = adapt(req, store_used, env.oracle)
    if strategy == "cold_start" and store is not None:
        store.register(StateEntry(env_id=env.env_id, model_blob=res.model.to_bytes(),
                                  samples=res.pool, accuracy=res.final_accuracy), now=now)
    return StrategyOutcome(_row(seed, strategy, step, env, res, acfg), res)


def seed_store(cfg: SuiteConfig, seed, root=None) -> StateStore:
    """Repository holding cold-start adaptations of every base deployment."""
    store = StateStore(cfg.store_policy(seed), root=root)
    for b, spec in enumerate(base_specs(cfg, seed)):
        env = gen_environment(spec)
        if spec.name in store:
            continue
        run_strategy("cold_start", env, store, cfg, seed=seed, step=-1 - b, now=float(b))
    return store


def run_suite(strategy, cfg: SuiteConfig, seed, root=None, logs=None) -> List[Dict]:
    """One benchmark cell: seed a repository, then walk the drift suite.

    When ``logs`` is a dict it receives ``{env_id: round log CSV}``.
    """
    store = seed_store(cfg, seed, root=root)
    rows = []
    t0 = float(cfg.n_bases)
    for step, spec in enumerate(drift_suite(cfg, seed)):
        env = gen_environment(spec)
        out = run_strategy(strategy, env, store, cfg, seed=seed, step=step, now=t0 + step)
        rows.append(out.row)
        if logs is not None and out.result is not None:
            logs[env.env_id] = round_log_csv(out.result.rounds)
    return rows


def _cell(args):
    strategy, cfg, seed, root, want_logs = args
    logs = {} if want_logs else None
    rows = run_suite(strategy, cfg, seed, root, logs)
    return rows, logs


# -- reports ----------------------------------------------------------------------

@dataclass
class BenchmarkReport:
    rows: List[Dict] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in REPORT_COLUMNS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        rows = []
        for r in csv.DictReader(io.StringIO(text)):
            row = {}
            for c in REPORT_COLUMNS:
                v = r[c]
                if c in ("seed", "step", "rounds", "epochs_to_target", "reached", "labels"):
                    row[c] = int(v)
                elif c in ("strategy", "env_id", "family", "source_env_id"):
                    row[c] = v
                else:
                    row[c] = float(v)
            rows.append(row)
        return cls(rows)

    def totals(self) -> Dict[tuple, Dict[str, float]]:
        """``{(seed, strategy): {...}}`` summed over environments."""
        out = {}
        for r in self.rows:
            key = (r["seed"], r["strategy"])
            acc = out.setdefault(key, dict(total_cost=[], total_training_cost=[],
                                           total_labeling_cost=[], overhead_cost=[],
                                           epochs=[], reached=0, n=0, final_accuracy=[]))
            for c in ("total_cost", "total_training_cost", "total_labeling_cost",
                      "overhead_cost", "final_accuracy"):
                acc[c].append(r[c])
            acc["epochs"].append(r["epochs_to_target"])
            acc["reached"] += r["reached"]
            acc["n"] += 1
        return {k: dict(total_cost=math.fsum(v["total_cost"]),
                        total_training_cost=math.fsum(v["total_training_cost"]),
                        total_labeling_cost=math.fsum(v["total_labeling_cost"]),
                        overhead_cost=math.fsum(v["overhead_cost"]),
                        epochs=int(sum(v["epochs"])), reached=v["reached"], n=v["n"],
                        mean_accuracy=float(np.mean(v["final_accuracy"])))
                for k, v in out.items()}

    def summary(self) -> str:
        lines = ["seed strategy total_cost epochs reached/n mean_final_accuracy"]
        for (seed, strat), t in sorted(self.totals().items()):
            lines.append(f"{seed} {strat} {t['total_cost']:.1f} {t['epochs']} "
                         f"{t['reached']}/{t['n']} {t['mean_accuracy']:.4f}")
        return "\n".join(lines)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def run_bench(cfg: SuiteConfig, seeds: Optional[Sequence[int]] = None, workers=None,
              store_root=None, logs=None) -> BenchmarkReport:
    """Run every configured strategy over the drift suite for each seed.

    Cells are independent and may run in parallel; the report is ordered by
    (seed, strategy, step) regardless of scheduling. With ``store_root`` the
    ``ema_full`` repositories are persisted under ``store_root/seed-<s>``.
    A ``logs`` dict receives ``{(seed, strategy, env_id): round log CSV}``.
    """
    if seeds is None:
        seeds = [cfg.seed + i for i in range(cfg.seeds)]
    workers = cfg.workers if workers is None else workers
    cells = []
    for s in seeds:
        for strat in cfg.strategy_list:
            root = None
            if store_root is not None and strat == "ema_full":
                root = os.path.join(store_root, f"seed-{s}")
            cells.append((strat, cfg, s, root, logs is not None))
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_cell, cells))
    else:
        results = [_cell(c) for c in cells]
    order = {s: i for i, s in enumerate(STRATEGIES)}
    rows = []
    for cell, (rs, cell_logs) in zip(cells, results):
        rows.extend(rs)
        if logs is not None:
            for env_id, text in cell_logs.items():
                logs[(cell[2], cell[0], env_id)] = text
    rows.sort(key=lambda r: (r["seed"], order[r["strategy"]], r["step"]))
    return BenchmarkReport(rows)


# -- drift sequence ----------------------------------------------------------------

@dataclass
class DriftStep:
    step: int
    env_id: str
    matched: str
    ema_accuracy: float
    cold_accuracy: float
    oracle_accuracy: float
    ema_epochs: int
    cold_epochs: int
    ema_cost: float
    cold_cost: float


def run_drift_sequence(specs: Sequence[EnvironmentSpec], cfg: SuiteConfig, seed=0,
                       store: Optional[StateStore] = None) -> List[DriftStep]:
    """Adapt to ``specs`` in order with EMA, cold start and the all-data oracle.

    EMA shares one growing repository across the sequence. The per-step
    accuracy columns are final accuracies after each arrival's adaptation.
    """
    if len(specs) < 1:
        raise InputError("need at least one environment")
    store = store if store is not None else StateStore(cfg.store_policy(seed))
    learner = LearnerFactory(cfg.learner_config())
    out = []
    for step, spec in enumerate(specs):
        env = gen_environment(spec)
        ema = run_strategy("ema_full", env, store, cfg, seed=seed, step=step, now=float(step))
        cold = run_strategy("cold_start", env, None, cfg, seed=seed, step=step)
        orc, _ = run_oracle_all_data(env, learner, seed, step)
        out.append(DriftStep(step, env.env_id, ema.row["source_env_id"],
                             ema.row["final_accuracy"], cold.row["final_accuracy"],
                             orc.row["final_accuracy"], ema.row["epochs_to_target"],
                             cold.row["epochs_to_target"], ema.row["total_cost"],
                             cold.row["total_cost"]))
    return out
