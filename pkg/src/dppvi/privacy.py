"""Differential privacy mechanisms, accounting and calibration.

Noise convention: ``sigma`` is always a noise *multiplier*.  A release with
sensitivity ``s`` receives Gaussian noise with standard deviation
``sigma * s``.  Clipped sums under the substitution neighbourhood have
sensitivity ``2 C``.

Accounting composes the subsampled Gaussian mechanism in Renyi DP (Poisson
subsampling bound at integer orders) and converts to ``(eps, delta)``.  For
compositions without subsampling the exact Gaussian privacy profile is used,
and since subsampling never weakens a Gaussian release, the reported epsilon
is the smaller of the two valid bounds.
"""

from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np
from scipy import optimize, special

from .errors import (
    CalibrationFailed,
    DivergentEpsilon,
    DomainError,
    MissingPerExampleGrads,
)

RDP_ORDERS = tuple(range(2, 65)) + (72, 80, 96, 112, 128, 160, 192, 256, 320, 384, 512, 768, 1024)
EPSILON_CEILING = 1e8
SIGMA_BOUNDS = (1e-2, 1e6)
SUBSAMPLING_LABEL = "approximate-WOR"  # Poisson RDP bound applied to sampling without replacement

MECHANISMS = ("dp_sgd", "update_perturbation")


# --------------------------------------------------------------------------
# mechanisms


def clip_to_ball(v, clip_norm: float) -> np.ndarray:
    """Project ``v`` onto the l2 ball of radius ``clip_norm`` by rescaling."""
    if not clip_norm > 0:
        raise DomainError("clip norm must be positive")
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm <= clip_norm:
        return v.copy()
    return v * (clip_norm / norm)


def clip_rows(rows: np.ndarray, clip_norm: float) -> np.ndarray:
    """Row-wise :func:`clip_to_ball`."""
    if not clip_norm > 0:
        raise DomainError("clip norm must be positive")
    rows = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    over = norms > clip_norm
    scale = np.ones_like(norms)
    np.divide(clip_norm, norms, out=scale, where=over)
    return rows * scale


def gaussian_mechanism(v, sensitivity: float, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Return ``v + N(0, (sigma * sensitivity)^2 I)``.

    With ``sigma == 0`` the input is returned unchanged and ``rng`` is not
    advanced.
    """
    if not sensitivity > 0:
        raise DomainError("sensitivity must be positive")
    if sigma < 0:
        raise DomainError("noise multiplier must be non-negative")
    v = np.asarray(v, dtype=np.float64)
    if sigma == 0:
        return v.copy()
    return v + rng.normal(0.0, sigma * sensitivity, size=v.shape)


# --------------------------------------------------------------------------
# accounting


def _gaussian_delta(eps: float, mu: float) -> float:
    # privacy profile of N(0,1) vs N(mu,1)
    a = special.ndtr(-eps / mu + mu / 2)
    b = math.exp(eps + special.log_ndtr(-eps / mu - mu / 2)) if eps < 700 else 0.0
    return float(a - b)


def gaussian_epsilon(mu: float, delta: float) -> float:
    """Smallest eps with the Gaussian privacy profile at ``mu`` below ``delta``."""
    if mu <= 0:
        return 0.0
    if _gaussian_delta(0.0, mu) <= delta:
        return 0.0
    hi = max(1.0, mu * mu)
    while _gaussian_delta(hi, mu) > delta:
        hi *= 2.0
        if hi > EPSILON_CEILING:
            raise DivergentEpsilon(f"no epsilon below {EPSILON_CEILING:g} at mu={mu:g}, delta={delta:g}")
    eps = float(optimize.brentq(lambda e: _gaussian_delta(e, mu) - delta, 0.0, hi, xtol=1e-12, rtol=1e-12))
    if eps > EPSILON_CEILING:
        raise DivergentEpsilon(f"epsilon {eps:g} exceeds {EPSILON_CEILING:g} at mu={mu:g}, delta={delta:g}")
    return eps


def _log_binom(n: int, k: np.ndarray) -> np.ndarray:
    return special.gammaln(n + 1) - special.gammaln(k + 1) - special.gammaln(n - k + 1)


def subsampled_gaussian_rdp(q: float, sigma: float, orders: Iterable[int] = RDP_ORDERS) -> np.ndarray:
    """RDP of one Poisson-subsampled Gaussian step at integer orders."""
    return np.array(_subsampled_rdp_cached(float(q), float(sigma), tuple(int(a) for a in orders)))


@functools.lru_cache(maxsize=4096)
def _subsampled_rdp_cached(q: float, sigma: float, orders: tuple) -> tuple:
    alphas = np.asarray(orders, dtype=np.float64)
    if q == 1.0:
        return tuple(alphas / (2.0 * sigma**2))
    k = np.arange(max(orders) + 1, dtype=np.float64)[None, :]
    a = alphas[:, None]
    with np.errstate(invalid="ignore"):
        terms = (_log_binom(a, k) + (a - k) * math.log1p(-q) + k * math.log(q)
                 + (k * k - k) / (2.0 * sigma**2))
    terms = np.where(k <= a, terms, -np.inf)
    return tuple(special.logsumexp(terms, axis=1) / (alphas - 1.0))


def rdp_to_epsilon(rdp: np.ndarray, delta: float, orders: Iterable[int] = RDP_ORDERS) -> float:
    orders = np.asarray(list(orders), dtype=np.float64)
    eps = rdp + np.log1p(-1.0 / orders) - (math.log(delta) + np.log(orders)) / (orders - 1.0)
    return float(max(np.min(eps), 0.0))


def _validate_account_args(delta: float, q: float, steps: int, sigma: float):
    if not 0.0 < delta < 1.0:
        raise DomainError(f"delta must lie in (0, 1), got {delta}")
    if not 0.0 < q <= 1.0:
        raise DomainError(f"sampling fraction must lie in (0, 1], got {q}")
    if steps < 1 or int(steps) != steps:
        raise DomainError(f"composition count must be a positive integer, got {steps}")
    if not sigma > 0:
        raise DomainError(f"noise multiplier must be positive, got {sigma}")


def compose_epsilon(events: Iterable[tuple[float, float, int]], delta: float) -> float:
    """Epsilon for the adaptive composition of ``(sigma, q, steps)`` events."""
    events = [(float(s), float(q), int(t)) for s, q, t in events if t > 0]
    if not events:
        return 0.0
    for sigma, q, steps in events:
        _validate_account_args(delta, q, steps, sigma)
    # Exact bound ignoring subsampling: composition of Gaussians is Gaussian.
    mu = math.sqrt(sum(t / s**2 for s, _, t in events))
    best = gaussian_epsilon(mu, delta)
    if any(q < 1.0 for _, q, _ in events):
        rdp = sum(t * subsampled_gaussian_rdp(q, s) for s, q, t in events)
        if np.all(np.isfinite(rdp)):
            best = min(best, rdp_to_epsilon(rdp, delta))
    if not math.isfinite(best):
        raise DivergentEpsilon("accountant produced a non-finite epsilon")
    return best


def accountant_epsilon(delta: float, q_sample: float, steps: int, noise_multiplier: float) -> float:
    """Accounting oracle ``(delta, q_sample, T, sigma) -> eps``.

    ``eps`` bounds the ``T``-fold composition of the Gaussian mechanism with
    noise multiplier ``sigma`` applied to subsamples of fraction ``q_sample``.
    """
    _validate_account_args(delta, q_sample, steps, noise_multiplier)
    return compose_epsilon([(noise_multiplier, q_sample, steps)], delta)


def calibrate_sigma(target_epsilon: float, delta: float, q_sample: float, steps: int, rel_tol: float = 1e-3) -> float:
    """Smallest noise multiplier (to ``rel_tol``) whose epsilon meets the target."""
    if not target_epsilon > 0:
        raise DomainError("target epsilon must be positive")
    _validate_account_args(delta, q_sample, steps, 1.0)
    lo, hi = SIGMA_BOUNDS

    def eps_at(sigma):
        try:
            return accountant_epsilon(delta, q_sample, steps, sigma)
        except DivergentEpsilon:
            return math.inf

    if eps_at(hi) > target_epsilon:
        raise CalibrationFailed(f"sigma={hi:g} cannot reach epsilon={target_epsilon:g}")
    if eps_at(lo) <= target_epsilon:
        return lo
    while hi / lo - 1.0 > rel_tol:
        mid = math.sqrt(lo * hi)
        if eps_at(mid) <= target_epsilon:
            hi = mid
        else:
            lo = mid
    return hi


# --------------------------------------------------------------------------
# configuration and ledger


@dataclass
class DpConfig:
    clip_norm: float = 1.0
    noise_multiplier: float = 0.0
    target_epsilon: float | None = None
    target_delta: float = 1e-5
    subsample_fraction: float = 1.0
    mechanism_kind: str = "dp_sgd"

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise DomainError("clip_norm must be positive")
        if self.noise_multiplier < 0:
            raise DomainError("noise_multiplier must be non-negative")
        if not 0.0 < self.target_delta < 1.0:
            raise DomainError("target_delta must lie in (0, 1)")
        if not 0.0 < self.subsample_fraction <= 1.0:
            raise DomainError("subsample_fraction must lie in (0, 1]")
        if self.mechanism_kind not in MECHANISMS:
            raise DomainError(f"unknown mechanism {self.mechanism_kind!r}")


@dataclass
class LedgerEntry:
    mechanism_kind: str
    sigma: float
    q_sample: float
    invocations: int
    joint: bool = False


@dataclass
class PrivacyLedger:
    """Append-only record of mechanism invocations made on one party's data.

    ``sigma`` in each entry is the multiplier that protects the release; for
    trusted-aggregator rounds this is the aggregate multiplier, flagged by
    ``joint=True``.
    """

    owner: object = None
    entries: list[LedgerEntry] = field(default_factory=list)

    def record(self, mechanism_kind: str, sigma: float, q_sample: float, invocations: int = 1, joint: bool = False):
        if invocations < 0:
            raise DomainError("invocation count must be non-negative")
        self.entries.append(LedgerEntry(mechanism_kind, float(sigma), float(q_sample), int(invocations), joint))

    @property
    def total_invocations(self) -> int:
        return sum(e.invocations for e in self.entries)

    def epsilon(self, delta: float) -> float:
        events = [(e.sigma, e.q_sample, e.invocations) for e in self.entries if e.invocations > 0]
        if any(s == 0 for s, _, _ in events):
            return math.inf
        return compose_epsilon(events, delta)

    def to_dict(self) -> dict:
        return {"owner": self.owner, "entries": [asdict(e) for e in self.entries]}

    @classmethod
    def from_dict(cls, d: dict) -> "PrivacyLedger":
        return cls(d.get("owner"), [LedgerEntry(**e) for e in d.get("entries", [])])


# --------------------------------------------------------------------------
# optimisation


@dataclass
class Adam:
    """Adam in ascent form, state kept on the instance."""

    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def step(self, params: np.ndarray, direction: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * direction
        self.v = self.beta2 * self.v + (1 - self.beta2) * direction * direction
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return params + self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def nonprivate_direction(report, lot_fraction: float = 1.0) -> np.ndarray:
    """Ascent direction matching :func:`dp_sgd_step` with no clipping or noise."""
    return report.per_example_loglik_grads.sum(axis=0) + lot_fraction * report.kl_weight * report.kl_grad


def private_sum(rows: np.ndarray, dp: DpConfig, rng: np.random.Generator) -> np.ndarray:
    """Clipped per-example sum plus Gaussian noise at sensitivity ``2 C``."""
    clipped = rows if math.isinf(dp.clip_norm) else clip_rows(rows, dp.clip_norm)
    return gaussian_mechanism(clipped.sum(axis=0), 2.0 * dp.clip_norm, dp.noise_multiplier, rng)


def dp_sgd_step(report, dp: DpConfig, opt: Adam, params: np.ndarray, rng: np.random.Generator, lot_fraction: float = 1.0):
    """One DP-SGD ascent step on variational parameters.

    Only the per-example likelihood rows are clipped and noised; the KL
    gradient is data independent and is added afterwards, scaled by the lot
    fraction so the direction is proportional to the unbiased ELBO gradient.
    """
    rows = report.per_example_loglik_grads
    if rows is None:
        raise MissingPerExampleGrads("DP-SGD needs per-example gradient rows")
    direction = private_sum(rows, dp, rng) + lot_fraction * report.kl_weight * report.kl_grad
    return opt.step(params, direction)
