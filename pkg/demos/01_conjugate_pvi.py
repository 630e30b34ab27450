"""Partitioned VI on a model with a closed-form posterior.

With conjugate local updates every client step is exact, so PVI recovers the
pooled posterior after one pass and local averaging leaves it unchanged for
any number of local partitions.
"""

# %%
import numpy as np

from dppvi import ModelSpec, RunConfig, Schedule, run_pvi
from dppvi.conjugate import BetaBernoulli, ConjugateSolver, GaussianMean
from dppvi.data import SplitSpec, split_clients, synth_bernoulli, synth_gaussian_mean
from dppvi.expfam import prior_lambda, to_moment
from dppvi.privacy import DpConfig

# %% Gaussian mean, 5 clients, sequential schedule
data = synth_gaussian_mean(500, [1.0, -2.0], seed=0)
shards = split_clients(data, SplitSpec(5, seed=0))
model = ModelSpec("gaussian_mean", 2)
trace = run_pvi(RunConfig(model, schedule=Schedule("sequential", 5)), shards, solver=ConjugateSolver(GaussianMean()))
exact = GaussianMean().exact_posterior(prior_lambda(2), data)
print("PVI posterior mean  ", to_moment(trace.final_lambda).mean)
print("exact posterior mean", to_moment(exact).mean)
print("communications      ", trace.communications)

# %% local averaging without noise is invariant to the number of partitions
fam = BetaBernoulli()
coins = synth_bernoulli(300, 0.3, seed=1)
for n_parts in (1, 2, 5, 10):
    cfg = RunConfig(ModelSpec("gaussian_mean", 1), method="local_avg", schedule=Schedule("sequential", 3),
                    dp=DpConfig(noise_multiplier=0.0, clip_norm=np.inf), local_partitions=n_parts)
    lam = run_pvi(cfg, [coins], solver=ConjugateSolver(fam), prior=fam.prior_lambda()).final_lambda
    print(f"N={n_parts:>2}  Beta({lam[0] + 1:.0f}, {lam[1] + 1:.0f})")
