"""Mean-field Gaussian arithmetic in natural parameters.

A mean-field Gaussian over ``d`` coordinates is stored as the stacked vector
``lam = [eta1, eta2]`` of length ``2 d`` with ``eta1 = mu / var`` and
``eta2 = -1 / (2 var)``.  Products and quotients of Gaussian factors are then
plain additions and subtractions of these vectors, which is what the
federated protocol exchanges.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import DimensionMismatch, DomainError, NonNormalizable


def _as_vector(x) -> np.ndarray:
    return np.atleast_1d(np.asarray(x, dtype=np.float64))


@dataclass(frozen=True)
class MomentGaussian:
    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        mean, var = _as_vector(self.mean), _as_vector(self.variance)
        if mean.shape != var.shape:
            raise DimensionMismatch(f"mean {mean.shape} vs variance {var.shape}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", var)

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class MeanFieldGaussian:
    """Normalized mean-field Gaussian in natural parameters.

    Construction validates ``eta2 < 0`` for every coordinate.
    """

    eta1: np.ndarray
    eta2: np.ndarray

    def __post_init__(self):
        eta1, eta2 = _as_vector(self.eta1), _as_vector(self.eta2)
        if eta1.shape != eta2.shape:
            raise DimensionMismatch(f"eta1 {eta1.shape} vs eta2 {eta2.shape}")
        if not np.all(eta2 < 0):
            raise NonNormalizable("eta2 must be strictly negative in every coordinate")
        object.__setattr__(self, "eta1", eta1)
        object.__setattr__(self, "eta2", eta2)

    @classmethod
    def from_lambda(cls, lam) -> "MeanFieldGaussian":
        lam = _as_vector(lam)
        if lam.size % 2:
            raise DimensionMismatch("stacked natural parameters must have even length")
        d = lam.size // 2
        return cls(lam[:d], lam[d:])

    @classmethod
    def standard_normal(cls, d: int) -> "MeanFieldGaussian":
        return cls(np.zeros(d), np.full(d, -0.5))

    @property
    def dim(self) -> int:
        return self.eta1.size

    @property
    def lam(self) -> np.ndarray:
        return np.concatenate([self.eta1, self.eta2])


@dataclass
class Factor:
    """Unnormalized Gaussian site factor; ``eta2`` entries may be of any sign."""

    lam: np.ndarray
    owner: object = None
    shard_index: int | None = None

    def __post_init__(self):
        self.lam = _as_vector(self.lam).copy()
        if self.lam.size % 2:
            raise DimensionMismatch("stacked natural parameters must have even length")

    @classmethod
    def zeros(cls, d: int, owner=None, shard_index=None) -> "Factor":
        return cls(np.zeros(2 * d), owner=owner, shard_index=shard_index)

    @property
    def dim(self) -> int:
        return self.lam.size // 2


NaturalLike = Union[Factor, MeanFieldGaussian, np.ndarray]


def natural_vector(x: NaturalLike) -> np.ndarray:
    """Stacked natural parameters of a factor, distribution or raw vector."""
    if isinstance(x, (Factor, MeanFieldGaussian)):
        return x.lam
    return _as_vector(x)


def is_normalizable(lam) -> bool:
    lam = natural_vector(lam)
    d = lam.size // 2
    return bool(np.all(np.isfinite(lam)) and np.all(lam[d:] < 0))


def prior_lambda(d: int) -> np.ndarray:
    """Natural parameters of the standard normal prior N(0, I_d)."""
    return MeanFieldGaussian.standard_normal(d).lam


def to_moment(q: NaturalLike) -> MomentGaussian:
    lam = natural_vector(q)
    d = lam.size // 2
    eta1, eta2 = lam[:d], lam[d:]
    if not np.all(eta2 < 0):
        raise NonNormalizable("eta2 >= 0: not a proper Gaussian")
    variance = -0.5 / eta2
    return MomentGaussian(eta1 * variance, variance)


def to_natural(m: MomentGaussian) -> MeanFieldGaussian:
    if not np.all(m.variance > 0):
        raise DomainError("variance must be strictly positive")
    return MeanFieldGaussian(m.mean / m.variance, -0.5 / m.variance)


def combine(base: NaturalLike, delta: NaturalLike, sign: int = 1) -> np.ndarray:
    """Product (``sign=+1``) or quotient (``sign=-1``) of Gaussian factors."""
    if sign not in (1, -1):
        raise DomainError("sign must be +1 or -1")
    a, b = natural_vector(base), natural_vector(delta)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    return a + b if sign == 1 else a - b


def kl_divergence(q: NaturalLike, p: NaturalLike) -> float:
    """KL(q || p), summed over coordinates."""
    mq, mp = to_moment(q), to_moment(p)
    if mq.dim != mp.dim:
        raise DimensionMismatch(f"{mq.dim} vs {mp.dim}")
    ratio = mq.variance / mp.variance
    kl = 0.5 * (ratio - 1.0 - np.log(ratio) + (mq.mean - mp.mean) ** 2 / mp.variance)
    return float(np.sum(kl))


def damp(old_lambda, new_lambda, rho: float) -> np.ndarray:
    """Convex combination ``(1 - rho) * old + rho * new``."""
    if not 0.0 < rho <= 1.0:
        raise DomainError(f"damping factor must lie in (0, 1], got {rho}")
    old, new = _as_vector(old_lambda), _as_vector(new_lambda)
    if old.shape != new.shape:
        raise DimensionMismatch(f"{old.shape} vs {new.shape}")
    if rho == 1.0:
        return new.copy()
    return (1.0 - rho) * old + rho * new


# Optimization space: (mean, log-variance) per coordinate.

def natural_to_params(lam) -> np.ndarray:
    m = to_moment(lam)
    return np.concatenate([m.mean, np.log(m.variance)])


def params_to_natural(params) -> np.ndarray:
    params = _as_vector(params)
    d = params.size // 2
    var = np.exp(params[d:])
    return np.concatenate([params[:d] / var, -0.5 / var])


def lambda_bytes(lam) -> bytes:
    """Little-endian float64 serialization of a natural-parameter vector."""
    return np.asarray(lam, dtype="<f8").tobytes()


def lambda_from_bytes(raw: bytes) -> np.ndarray:
    return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def lambda_checksum(lam) -> str:
    return hashlib.sha256(lambda_bytes(lam)).hexdigest()
