"""One adaptation, round by round.

A fresh model adapts to a synthetic environment whose rare inputs are
expensive to label. Each round the orchestrator probes a small proxy set to
guess what a full labeling round would buy, compares that with simply
training longer, and resizes the labeling budget from what it observed.
"""

from stateadapt.orchestrator import AdaptationConfig, AdaptationRequest, adapt
from stateadapt.sim.environments import EnvironmentSpec, gen_environment
from stateadapt.sim.learners import EnsembleLearner, LearnerConfig

spec = EnvironmentSpec(seed=3, dim=5, informative=3, nuisance_scale=0.4, cost_base=5.0,
                       cost_power=3.0, cost_axes="nuisance", pool_size=2000, test_size=500)
env = gen_environment(spec)
lc = LearnerConfig(dim=5)
cfg = AdaptationConfig(initial_budget=1000.0, aimd_increment=300.0, proxy_fraction=0.05,
                       max_rounds=12, epochs_per_round=5, target_accuracy=0.8, seed=1)
req = AdaptationRequest(pool=env.pool, new_model=lambda s: EnsembleLearner(lc, s),
                        load_model=lambda b, s: EnsembleLearner.from_bytes(b, seed=s),
                        config=cfg, env_id=env.env_id, eval_X=env.test_X, eval_y=env.test_y)
res = adapt(req, None, env.oracle)

print(" t  label?  budget  labeled  label$   train$  uncertainty  R^2")
for r in res.rounds:
    print(f"{r.t:2d}  {'yes' if r.triggered else ' no':>6}  {r.B_t:6.0f}  {r.labeled_this_round:7d}"
          f"  {r.cost_labeled:6.0f}  {r.C_t:7.0f}  {r.U_t:11.1f}  {r.accuracy:.3f}")
print(f"total cost {res.total_cost:.0f} (training {res.training_cost:.0f}, "
      f"labeling {res.labeling_cost:.0f}, probes {res.overhead_cost:.0f}); "
      f"target reached: {res.reached_target}")
