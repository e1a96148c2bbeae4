"""Measuring and removing a distribution shift.

Two 2-D Gaussian clouds sit three standard deviations apart. MMD measures
the gap, a DKW-sized subsample estimates it cheaply, and a fitted kernel
transform pulls the two clouds together in a shared latent space.
"""

import numpy as np

from stateadapt import transformer
from stateadapt.state_math import StateSet, dkw_sample_size, mmd, subsample, sup_cdf_deviation

rng = np.random.default_rng(0)
source = rng.normal(size=(20000, 2))
target = rng.normal(size=(20000, 2)) + [3.0, 0.0]

# how many points are enough to stand in for a whole pool
for eps in (0.05, 0.02):
    m = dkw_sample_size(eps, 0.95)
    sub = subsample(StateSet(target), m, seed=1)
    print(f"eps={eps}: m={m}, observed CDF gap {sup_cdf_deviation(sub, target):.4f}")

m = dkw_sample_size(0.05, 0.95)
S = subsample(StateSet(source), m, seed=2).X
T = subsample(StateSet(target), m, seed=3).X
print(f"MMD on 3000 rows    {mmd(source[:3000], target[:3000]):.4f}")
print(f"MMD on {m} samples {mmd(S, T):.4f}")

model = transformer.fit_transform(S, T)
print(f"MMD after transform {transformer.aligned_mmd(model, S, T):.4f} "
      f"({model.latent_dims} latent dims)")

# a source-side model can now be evaluated on target inputs: each target
# point is carried back to its nearest source points in the latent space
back = transformer.map_to_source(model, T[:5])
print("target rows mapped into source space:")
for t, s in zip(T[:5], back):
    print(f"  {np.round(t, 2)} -> {np.round(s, 2)}")
