"""Which prior environment is worth reusing?

Twenty source environments differ from a target in mean, spread, nuisance
offsets and tail weight. Each gets a model trained on its own labels. How
well does a distance predict how much that model helps on the target?
"""

import numpy as np

from stateadapt.sim.studies import source_selection_study

for seed in range(3):
    b = source_selection_study(seed)
    order = np.argsort(b.mmd)
    print(f"batch {seed}: corr(-MMD, gain)={b.r_mmd:+.2f}  corr(-L2 of means, gain)={b.r_l2:+.2f}")
    print("   closest by MMD   gain   |  closest by L2   gain")
    by_l2 = np.argsort(b.l2)
    for i, j in zip(order[:3], by_l2[:3]):
        print(f"   src{i:<2d} {b.mmd[i]:.3f}  {b.gain[i]:+.3f} |  src{j:<2d} {b.l2[j]:.3f}  {b.gain[j]:+.3f}")
