"""Differentially private partitioned variational inference on simulated clients."""

from .conjugate import BetaBernoulli, ConjugateSolver, GaussianMean
from .data import SplitSpec, load_tabular, partition_local, rebalance_majority, split_clients, synth_logreg
from .errors import *  # noqa: F401,F403
from .expfam import (
    Factor,
    MeanFieldGaussian,
    MomentGaussian,
    combine,
    damp,
    kl_divergence,
    prior_lambda,
    to_moment,
    to_natural,
)
from .models import Dataset, ModelSpec, elbo_and_grad, evaluate, posterior_predictive, predict_proba
from .privacy import DpConfig, PrivacyLedger, accountant_epsilon, calibrate_sigma, clip_to_ball, gaussian_mechanism
from .protocol import (
    AggregatorMode,
    ClientState,
    OptimizerConfig,
    RunConfig,
    Schedule,
    VISolver,
    cavity,
    run_bcm,
    run_global_vi,
    run_pvi,
    server_round,
)

__version__ = "0.1.0"
