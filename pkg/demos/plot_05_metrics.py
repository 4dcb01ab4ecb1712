"""
Reconstruction metrics and blood-pressure extraction
====================================================
"""

# %%
import numpy as np

from lsct.metrics import extract_sbp_dbp, frechet, frechet_bruteforce, prd, rmse
from lsct.signal import SynthParams, synth_pair

print("rmse", rmse([0, 0], [2, 2]))
print("prd (factor inside the root)", prd([3, 4], [0, 0]))
print("prd (conventional)", prd([3, 4], [0, 0], conventional=True))
print("frechet, squared cost", frechet([0, 1], [0, 3]))

# %%
# The dynamic programme agrees with explicit enumeration of couplings.
rng = np.random.default_rng(0)
a, b = rng.normal(size=7), rng.normal(size=5)
print(frechet(a, b), frechet_bruteforce(a, b))

# %%
_, abp, truth = synth_pair(3, SynthParams(noise=0.0), return_truth=True)
sbp, dbp = extract_sbp_dbp(abp)
print(f"extracted SBP {sbp:.1f} / DBP {dbp:.1f}; generator {truth['sbp']:.1f} / {truth['dbp']:.1f}")
