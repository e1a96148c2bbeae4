"""A deployment that keeps moving.

Environments arrive one after another. Reuse keeps a growing repository,
matches each arrival to the closest prior state and warm starts from it;
cold start begins from nothing every time; the all-data model shows the
ceiling.
"""

from dataclasses import replace

from stateadapt.sim.strategies import SuiteConfig, base_specs, drift_suite, run_drift_sequence

cfg = SuiteConfig(pool_size=1500, test_size=500, max_rounds=15)
bases = base_specs(cfg, 7)
# two deployments visited in turn, then drifted versions of them
seq = [replace(bases[0], name="A1"), replace(bases[1], name="B1"),
       replace(bases[0], seed=bases[0].seed + 50, name="A2"),
       replace(bases[1], seed=bases[1].seed + 50, name="B2")]
seq += [s for s in drift_suite(cfg, 7) if s.name.endswith(("near0", "far1"))]

print("step env        reused from   reuse R^2  cold R^2  all-data  reuse/cold epochs  reuse/cold cost")
for s in run_drift_sequence(seq, cfg, seed=7):
    print(f"{s.step:4d} {s.env_id:<11} {s.matched or '-':<13} {s.ema_accuracy:9.3f} "
          f"{s.cold_accuracy:9.3f} {s.oracle_accuracy:9.3f} {s.ema_epochs:8d}/{s.cold_epochs:<8d}"
          f" {s.ema_cost:8.0f}/{s.cold_cost:.0f}")
