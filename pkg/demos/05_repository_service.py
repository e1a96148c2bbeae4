"""Sharing adapted models over the network.

A repository service runs in the background. One agent registers a model
together with samples of its environment; another sends samples of its
own, gets back the closest stored model plus a fitted transform, and
projects further inputs locally with that transform.
"""

import numpy as np

from stateadapt import transformer
from stateadapt.service import ServiceClient, ServiceConfig, serve
from stateadapt.sim.learners import EnsembleLearner, LearnerConfig
from stateadapt.store import NoiseSpec, StateStore, StorePolicy

rng = np.random.default_rng(5)
store = StateStore(StorePolicy(noise=NoiseSpec(sigma=0.3, clamp=0.5)))

with serve(store, ServiceConfig(tokens={"s3cret": "lab-a"})) as handle:
    host, port = handle.address
    print(f"service on {host}:{port}")

    with ServiceClient(host, port, "producer", token="s3cret") as prod:
        print("producer org:", prod.create_agent())
        for name, shift in (("campus", 0.0), ("backbone", 4.0)):
            X = rng.normal(size=(600, 3)) + shift
            model = EnsembleLearner(LearnerConfig(dim=3), 0)
            model.fit_closed_form(X, np.sin(X[:, 0]))
            print("registered", prod.register(name, model.to_bytes(), X, accuracy=0.9))

    with ServiceClient(host, port, "consumer", token="s3cret") as cons:
        cons.create_agent()
        mine = rng.normal(size=(300, 3)) + [0.4, 0.0, 0.0]
        r = cons.transform_state(mine, seed=1)
        print(f"matched {r['env_id']} v{r['version']} at MMD {r['mmd']:.3f} "
              f"after {r['comparisons']} comparisons")
        local = transformer.apply_regime_aware(r["transform"], mine)
        print("local projection equals server projection:", np.array_equal(local, r["projected"]))
        reused = EnsembleLearner.from_bytes(r["model_blob"])
        print("reused model predicts", np.round(reused.predict(mine[:3]), 3))
        print("health (entries, bytes):", cons.health())
