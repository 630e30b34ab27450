"""Noise multipliers for a privacy budget, and why trusted aggregation helps.

A client visited ``T`` times needs a larger noise multiplier for the same
budget.  With a trusted aggregator each of ``M`` clients adds only
``sigma / sqrt(M)`` of the noise while the aggregate keeps the full level.
"""

# %%
import numpy as np

from dppvi.privacy import accountant_epsilon, calibrate_sigma, gaussian_mechanism

for steps in (1, 2, 5, 10):
    sigma = calibrate_sigma(1.0, 1e-5, 1.0, steps)
    print(f"T={steps:>2}  sigma={sigma:.3f}  eps={accountant_epsilon(1e-5, 1.0, steps, sigma):.4f}")

# %% DP-SGD steps with subsampling
sigma = calibrate_sigma(1.0, 1e-5, 0.01, 1000)
print(f"1000 steps at q=0.01: sigma={sigma:.3f}")

# %% aggregate noise under a trusted aggregator
rng = np.random.default_rng(0)
sigma0, clip = 2.0, 0.5
for m in (2, 5, 10):
    draws = [sum(gaussian_mechanism(np.zeros(1), 2 * clip, sigma0 / np.sqrt(m), rng) for _ in range(m))
             for _ in range(5000)]
    print(f"M={m:>2}  aggregate std {np.std(draws):.3f}  (target {sigma0 * 2 * clip:.3f})")
