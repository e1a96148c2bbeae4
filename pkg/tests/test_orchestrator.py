import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from stateadapt.errors import ConfigError, InputError
from stateadapt.orchestrator import (AdaptationConfig, AdaptationRequest, BenefitEstimate, adapt,
                                     decision_ratios, estimate_benefit, parse_round_log,
                                     projected_cost, replay_decision, round_log_csv, should_label,
                                     update_budget_aimd)
from stateadapt.sim.environments import EnvironmentSpec, gen_environment
from stateadapt.sim.learners import EnsembleLearner, LearnerConfig
from stateadapt.state_math import StateSet
from stateadapt.store import StateStore, StorePolicy

LC = LearnerConfig(dim=3)


def small_env(seed=0, **kw):
    spec = dict(seed=seed, dim=3, informative=2, pool_size=400, test_size=300, cost_base=2.0,
                cost_power=2.0)
    spec.update(kw)
    return gen_environment(EnvironmentSpec(**spec))


def request(env, **cfg):
    base = dict(initial_budget=60.0, aimd_increment=10.0, proxy_fraction=0.05, max_rounds=8,
                epochs_per_round=2, regimes=1, sample_epsilon=0.2, seed=3)
    base.update(cfg)
    return AdaptationRequest(pool=env.pool, new_model=lambda s: EnsembleLearner(LC, s),
                             load_model=lambda b, s: EnsembleLearner.from_bytes(b, seed=s),
                             config=AdaptationConfig(**base), env_id=env.env_id,
                             eval_X=env.test_X, eval_y=env.test_y)


def test_projected_cost_hand_values():
    assert projected_cost(100.0, 50, 25) == 150.0
    assert projected_cost(100.0, 200, 0) == 100.0
    assert projected_cost(30.0, 0, 10) == 60.0


def test_decision_ratios_hand_values():
    ben = BenefitEstimate(delta_u_label=6.0, delta_n=10.0)
    rc, rl, cs = decision_ratios(2.0, 20.0, ben, 10.0, 20)
    assert cs == 30.0
    assert rc == 0.1
    assert rl == pytest.approx(8.0 / 40.0)
    assert should_label(2.0, 20.0, ben, 10.0, 20)


def test_should_label_is_strict():
    # labeling ratio (1 + 1) / (10 + 10) = 0.1 equals continuing 1 / 10
    ben = BenefitEstimate(delta_u_label=1.0, delta_n=0.0)
    rc, rl, _ = decision_ratios(1.0, 10.0, ben, 10.0, 5)
    assert rc == rl == 0.1
    assert not should_label(1.0, 10.0, ben, 10.0, 5)


def test_should_label_when_training_stalls():
    assert should_label(0.0, 10.0, BenefitEstimate(delta_u_label=1e-9), 5.0, 3)
    assert not should_label(-1.0, 10.0, BenefitEstimate(), 5.0, 3)


def test_aimd_hand_values():
    assert update_budget_aimd(100.0, 0.5, 0.4, 10.0) == 110.0
    assert update_budget_aimd(100.0, 0.4, 0.5, 10.0) == 50.0
    assert update_budget_aimd(100.0, 0.4, 0.4, 10.0) == 50.0
    assert update_budget_aimd(10.0, 0.4, 0.5, 10.0, floor=8.0) == 8.0
    with pytest.raises(InputError):
        update_budget_aimd(0.0, 0.1, 0.2, 1.0)


@given(st.floats(1, 1e4), st.lists(st.floats(-1, 1), min_size=2, max_size=30), st.floats(0.1, 50))
def test_aimd_sequence_is_additive_or_halving(B0, ratios, alpha):
    B = B0
    for prev, now in zip(ratios, ratios[1:]):
        nxt = update_budget_aimd(B, prev, now, alpha)
        assert nxt == (B + alpha if now < prev else B / 2)
        B = nxt
    assert B > 0


def test_estimate_benefit_scales_by_proxy_fraction():
    env = small_env(1)
    model = EnsembleLearner(LC, 0)
    pool = env.pool.with_features(env.pool.X)
    proxy = np.arange(10)
    cheapest = np.sort(pool.costs[proxy])[:2].sum()
    # budget p * B exactly buys the two cheapest proxy samples with cost-agnostic picking
    ben = estimate_benefit(model, pool, proxy, 0.01, cheapest / 0.01 + 1e-9, env.oracle, 0,
                           selector="top_utility")
    assert len(ben.positions) >= 1
    assert ben.delta_n == len(ben.positions) / 0.01
    pool2 = env.pool.with_features(env.pool.X)
    order = np.argsort(pool2.costs[proxy])[:2]
    two = proxy[order]
    ben2 = estimate_benefit(model, pool2, two, 0.01, pool2.costs[two].sum() / 0.01,
                            env.oracle, 0)
    assert len(ben2.positions) == 2
    assert ben2.delta_n == 200.0
    assert ben2.delta_u_label >= 0.0
    assert ben2.probe_cost == 2.0
    assert pool2.labeled_mask[two].all()  # proxy labels stay labeled


def test_estimate_benefit_min_budget_buys_a_label():
    env = small_env(2)
    pool = env.pool.with_features(env.pool.X)
    proxy = np.arange(20)
    assert estimate_benefit(EnsembleLearner(LC, 0), pool, proxy, 0.01, 1.0, env.oracle, 0
                            ).positions == []
    ben = estimate_benefit(EnsembleLearner(LC, 0), pool, proxy, 0.01, 1.0, env.oracle, 0,
                           min_budget=float(np.max(pool.costs)))
    assert len(ben.positions) >= 1


def check_log_invariants(rounds, cfg, floor):
    for r in rounds:
        if r.t > 0 and cfg.trigger == "benefit":
            # projected cost of a labeling round, exactly
            assert r.c_star == projected_cost(r.c_cont, r.n_t, r.delta_n)
            assert replay_decision(r) == r.triggered
    budgets = [r.B_t for r in rounds]
    if cfg.budget_rule == "fixed":
        assert len(set(budgets)) == 1
        return
    assert budgets[0] == cfg.initial_budget
    if len(budgets) > 1:
        assert budgets[1] == budgets[0]
    for t in range(2, len(rounds)):
        want = update_budget_aimd(budgets[t - 1], rounds[t - 2].realized_ratio,
                                  rounds[t - 1].realized_ratio, cfg.aimd_increment, floor)
        assert budgets[t] == want


@pytest.mark.parametrize("selector,trigger,rule", [("cost_aware", "benefit", "aimd"),
                                                    ("random", "always", "fixed"),
                                                    ("top_utility", "benefit", "aimd")])
def test_adapt_logs_are_replayable(selector, trigger, rule):
    env = small_env(4)
    req = request(env, selector=selector, trigger=trigger, budget_rule=rule)
    res = adapt(req, None, env.oracle)
    rounds = res.rounds
    assert 1 <= len(rounds) <= req.config.max_rounds
    check_log_invariants(rounds, req.config, float(np.median(env.pool.costs)))
    # logs survive a CSV round trip exactly
    back = parse_round_log(round_log_csv(rounds))
    assert back == rounds
    check_log_invariants(back, req.config, float(np.median(env.pool.costs)))
    # costs add up
    assert res.total_cost == pytest.approx(res.training_cost + res.labeling_cost
                                           + res.overhead_cost)
    assert res.labeling_cost == pytest.approx(math.fsum(r[2] for r in res.label_log.rows))
    assert rounds[0].triggered


def test_uncertainty_mostly_decreases():
    env = small_env(5, noise=0.05)
    req = request(env, max_rounds=12, initial_budget=80.0, trigger="always", budget_rule="fixed")
    res = adapt(req, None, env.oracle)
    U = [res.rounds[0].U_prev] + [r.U_t for r in res.rounds]
    drops = sum(b <= a for a, b in zip(U, U[1:]))
    assert drops >= 0.9 * (len(U) - 1)


def test_adapt_reaches_target_and_stops():
    env = small_env(6)
    req = request(env, target_accuracy=0.3, max_rounds=20)
    res = adapt(req, None, env.oracle)
    assert res.reached_target
    assert res.final_accuracy >= 0.3
    assert len(res.rounds) < 20


def test_adapt_is_deterministic():
    env = small_env(7)
    a = adapt(request(env), None, env.oracle)
    b = adapt(request(env), None, env.oracle)
    assert round_log_csv(a.rounds) == round_log_csv(b.rounds)
    assert a.label_log.to_csv() == b.label_log.to_csv()
    assert a.model.to_bytes() == b.model.to_bytes()


def test_zero_budget_never_labels():
    env = small_env(8)
    res = adapt(request(env, initial_budget=0.0, max_rounds=3), None, env.oracle)
    assert all(r.labeled_this_round == 0 and not r.triggered for r in res.rounds)
    assert res.labeling_cost == 0.0 and res.training_cost == 0.0


def test_warm_start_from_store_and_registration():
    src = small_env(9)
    tgt = small_env(10, mean_offset=(0.3, 0.0, 0.5))
    store = StateStore(StorePolicy(capacity=8))
    first = adapt(request(src, max_rounds=6), store, src.oracle)
    assert first.registered_id == src.env_id and first.source_env_id is None
    res = adapt(request(tgt, max_rounds=2), store, tgt.oracle)
    assert res.source_env_id == src.env_id
    assert res.transform_cost == len(tgt.pool)  # distillation over the whole pool
    assert tgt.env_id in store
    latest = adapt(request(small_env(11), warm_start="latest", use_transform=False,
                           max_rounds=1), store, small_env(11).oracle)
    assert latest.source_env_id == tgt.env_id
    assert latest.transform_cost == 0.0


def test_empty_store_falls_back_to_cold_start():
    env = small_env(12)
    res = adapt(request(env, max_rounds=1, register=False), StateStore(), env.oracle)
    assert res.source_env_id is None and res.registered_id is None


def test_config_validation_and_text():
    with pytest.raises(InputError):
        AdaptationConfig(proxy_fraction=0.0)
    with pytest.raises(InputError):
        AdaptationConfig(selector="greedy")
    with pytest.raises(InputError):
        AdaptationConfig(max_rounds=0)
    assert AdaptationConfig(initial_budget=50.0).aimd_increment == 5.0
    cfg = AdaptationConfig.from_text("initial_budget = 10\nuse_transform = no\n# c\n"
                                     "target_accuracy = none\n")
    assert cfg.initial_budget == 10.0 and cfg.use_transform is False
    assert cfg.target_accuracy is None
    with pytest.raises(ConfigError) as info:
        AdaptationConfig.from_text("max_rounds = x\n")
    assert info.value.key == "max_rounds" and info.value.line == 1
    with pytest.raises(ConfigError) as info:
        AdaptationConfig.from_text("", required=("seed",))
    assert info.value.key == "seed"
    with pytest.raises(ConfigError):
        AdaptationConfig.from_text("bogus = 1\n")
