"""Closed-form conjugate families used as exactly solvable local problems.

For a conjugate likelihood the maximiser of

    temper * E_q[log p(x | theta)] - kl_weight * KL(q || prior)

is the (tempered) posterior ``prior * p(x | theta) ** (temper / kl_weight)``,
so a local "optimisation" is a single natural-parameter update.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NonNormalizable
from .expfam import is_normalizable as gaussian_normalizable
from .models import Dataset


@dataclass(frozen=True)
class BetaBernoulli:
    """Beta prior over a Bernoulli rate; natural parameters ``(alpha - 1, beta - 1)``."""

    def prior_lambda(self, alpha: float = 1.0, beta: float = 1.0) -> np.ndarray:
        return np.array([alpha - 1.0, beta - 1.0])

    def sufficient_stats(self, data: Dataset) -> np.ndarray:
        y = data.labels
        return np.array([y.sum(), (1.0 - y).sum()])

    def is_normalizable(self, lam) -> bool:
        lam = np.asarray(lam, dtype=np.float64)
        return bool(np.all(np.isfinite(lam)) and np.all(lam > -1.0))

    def exact_posterior(self, prior_lam, data: Dataset) -> np.ndarray:
        return np.asarray(prior_lam, dtype=np.float64) + self.sufficient_stats(data)


@dataclass(frozen=True)
class GaussianMean:
    """Gaussian prior over the mean of ``N(theta, noise_var I)`` observations.

    Natural parameters use the mean-field layout ``[eta1, eta2]``.
    """

    noise_var: float = 1.0

    def prior_lambda(self, d: int) -> np.ndarray:
        return np.concatenate([np.zeros(d), np.full(d, -0.5)])

    def sufficient_stats(self, data: Dataset) -> np.ndarray:
        x = data.features
        return np.concatenate([x.sum(axis=0) / self.noise_var, np.full(x.shape[1], -0.5 * len(data) / self.noise_var)])

    def is_normalizable(self, lam) -> bool:
        return gaussian_normalizable(lam)

    def exact_posterior(self, prior_lam, data: Dataset) -> np.ndarray:
        return np.asarray(prior_lam, dtype=np.float64) + self.sufficient_stats(data)


class ConjugateSolver:
    """Local solver returning the closed-form tempered posterior."""

    def __init__(self, family):
        self.family = family

    def is_normalizable(self, lam) -> bool:
        return self.family.is_normalizable(lam)

    def lot_size(self, n: int) -> int:
        return n

    def solve(self, init_lambda, effective_prior, data: Dataset, kl_weight=1.0, likelihood_temper=1.0,
              rng=None, dp=None, ledger=None, callback=None, steps=None) -> np.ndarray:
        if dp is not None:
            raise DomainError("closed-form conjugate updates have no DP-SGD variant")
        if not self.family.is_normalizable(effective_prior):
            raise NonNormalizable("effective prior is not normalizable")
        power = likelihood_temper / kl_weight
        lam = np.asarray(effective_prior, dtype=np.float64) + power * self.family.sufficient_stats(data)
        if not self.family.is_normalizable(lam):
            raise NonNormalizable("local posterior left the family")
        return lam
