"""Likelihood models and reparameterized ELBO estimation.

Three model kinds are supported:

``logistic_regression``
    Bernoulli likelihood with logit ``[1, x] . theta``.
``bnn_1hidden``
    One ReLU hidden layer, Bernoulli output on the scalar logit.
``gaussian_mean``
    Observations ``x_i ~ N(theta, noise_var I)``.  Conjugate to the Gaussian
    prior, so the expected log-likelihood is available in closed form; used
    as an exactly solvable test model.

Variational parameters are optimized in ``(mean, log_variance)`` space.  All
gradients in this module are ascent directions with respect to that vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import DimensionMismatch, DomainError, LengthMismatch, NonNormalizable, OptimizerDiverged
from .expfam import MeanFieldGaussian, MomentGaussian, is_normalizable, natural_vector, to_moment

KINDS = ("logistic_regression", "bnn_1hidden", "gaussian_mean")


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        y = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        if x.shape[0] != y.shape[0]:
            raise LengthMismatch(f"{x.shape[0]} feature rows vs {y.shape[0]} labels")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.features[idx], self.labels[idx])

    @classmethod
    def concat(cls, parts) -> "Dataset":
        parts = list(parts)
        return cls(
            np.concatenate([p.features for p in parts], axis=0),
            np.concatenate([p.labels for p in parts]),
        )


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    hidden_units: int = 50
    noise_var: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1:
            raise DomainError("input_dim must be >= 1")

    @property
    def param_dim(self) -> int:
        if self.kind == "logistic_regression":
            return self.input_dim + 1
        if self.kind == "bnn_1hidden":
            h = self.hidden_units
            return (self.input_dim + 1) * h + (h + 1)
        return self.input_dim

    @property
    def is_bernoulli(self) -> bool:
        return self.kind != "gaussian_mean"


@dataclass
class ElboGradReport:
    """Value and ascent gradient of a (tempered, KL-weighted) local ELBO.

    ``per_example_loglik_grads`` holds one row per batch example with the
    gradient of ``likelihood_temper * E_q[log p(x_i | theta)]``; ``kl_grad`` is
    the gradient of ``-KL(q || effective_prior)``.  The full gradient is
    ``per_example_loglik_grads.sum(0) + kl_weight * kl_grad``.
    """

    elbo_value: float
    per_example_loglik_grads: np.ndarray
    kl_grad: np.ndarray
    mc_samples: int
    kl_weight: float = 1.0
    kl_value: float = 0.0

    @property
    def gradient(self) -> np.ndarray:
        return self.per_example_loglik_grads.sum(axis=0) + self.kl_weight * self.kl_grad


def _check_theta_dim(model: ModelSpec, theta: np.ndarray):
    if theta.shape[-1] != model.param_dim:
        raise DimensionMismatch(f"theta has {theta.shape[-1]} entries, model needs {model.param_dim}")


def _unpack_bnn(model: ModelSpec, thetas: np.ndarray):
    h, din = model.hidden_units, model.input_dim
    s = thetas.shape[0]
    i = h * din
    w1 = thetas[:, :i].reshape(s, h, din)
    b1 = thetas[:, i : i + h]
    w2 = thetas[:, i + h : i + 2 * h]
    b2 = thetas[:, i + 2 * h]
    return w1, b1, w2, b2


def logits(model: ModelSpec, thetas: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Logits for every (parameter draw, input) pair, shape ``(S, n)``."""
    thetas = np.atleast_2d(thetas)
    x = np.atleast_2d(x)
    _check_theta_dim(model, thetas)
    if x.shape[1] != model.input_dim:
        raise DimensionMismatch(f"inputs have {x.shape[1]} features, model expects {model.input_dim}")
    if model.kind == "logistic_regression":
        return thetas[:, :1] + thetas[:, 1:] @ x.T
    if model.kind == "bnn_1hidden":
        w1, b1, w2, b2 = _unpack_bnn(model, thetas)
        hidden = np.maximum(np.einsum("shj,nj->snh", w1, x) + b1[:, None, :], 0.0)
        return np.einsum("snh,sh->sn", hidden, w2) + b2[:, None]
    raise DomainError("gaussian_mean has no logits")


def predict_proba(model: ModelSpec, theta, x) -> float:
    """``p(y = 1 | theta, x)`` for a single parameter vector and input."""
    if not model.is_bernoulli:
        raise DomainError("predict_proba needs a Bernoulli model")
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return float(expit(logits(model, theta[None, :], x))[0, 0])


def _loglik_and_theta_grads(model: ModelSpec, thetas: np.ndarray, batch: Dataset):
    """Per-(draw, example) log-likelihood ``(S, n)`` and its theta-gradient ``(S, n, d)``."""
    x, y = batch.features, batch.labels
    if model.kind == "logistic_regression":
        z = thetas[:, :1] + thetas[:, 1:] @ x.T
        ll = y * z - np.logaddexp(0.0, z)
        resid = y - expit(z)
        xt = np.concatenate([np.ones((x.shape[0], 1)), x], axis=1)
        return ll, resid[:, :, None] * xt[None, :, :]

    w1, b1, w2, b2 = _unpack_bnn(model, thetas)
    pre = np.einsum("shj,nj->snh", w1, x) + b1[:, None, :]
    hidden = np.maximum(pre, 0.0)
    z = np.einsum("snh,sh->sn", hidden, w2) + b2[:, None]
    ll = y * z - np.logaddexp(0.0, z)
    resid = y - expit(z)
    # ReLU subgradient at 0 is 0
    dpre = resid[:, :, None] * w2[:, None, :] * (pre > 0.0)
    s, n = z.shape
    g_w1 = (dpre[:, :, :, None] * x[None, :, None, :]).reshape(s, n, -1)
    g_w2 = resid[:, :, None] * hidden
    return ll, np.concatenate([g_w1, dpre, g_w2, resid[:, :, None]], axis=2)


def elbo_and_grad(
    q,
    effective_prior,
    batch: Dataset,
    model: ModelSpec,
    kl_weight: float = 1.0,
    likelihood_temper: float = 1.0,
    mc_samples: int = 1,
    rng: np.random.Generator | None = None,
) -> ElboGradReport:
    """Estimate ``temper * E_q[log p(batch | theta)] - kl_weight * KL(q || prior)``.

    The expectation uses ``theta = mean + exp(log_var / 2) * eps`` with
    ``mc_samples`` standard normal draws of ``eps`` (closed form for
    ``gaussian_mean``).  The KL term is always exact.
    """
    if kl_weight <= 0:
        raise DomainError("kl_weight must be positive")
    if likelihood_temper <= 0:
        raise DomainError("likelihood_temper must be positive")
    if mc_samples < 1:
        raise DomainError("mc_samples must be >= 1")
    mq = q if isinstance(q, MomentGaussian) else to_moment(q)
    if isinstance(effective_prior, MomentGaussian):
        mp = effective_prior
        if not np.all(mp.variance > 0):
            raise NonNormalizable("effective prior is not a proper Gaussian")
    else:
        prior_lam = natural_vector(effective_prior)
        if prior_lam.size != 2 * mq.dim:
            raise DimensionMismatch(f"q has dimension {mq.dim}, prior {prior_lam.size // 2}")
        if not is_normalizable(prior_lam):
            raise NonNormalizable("effective prior is not a proper Gaussian")
        mp = to_moment(prior_lam)
    if mp.dim != mq.dim or mq.dim != model.param_dim:
        raise DimensionMismatch(f"q has dimension {mq.dim} and prior {mp.dim}, model needs {model.param_dim}")
    if len(batch) and batch.dim != model.input_dim:
        raise DimensionMismatch(f"batch has {batch.dim} features, model expects {model.input_dim}")

    mean, var = mq.mean, mq.variance
    diff = mean - mp.mean
    ratio = var / mp.variance
    kl = 0.5 * float(np.sum(ratio - 1.0 - np.log(ratio) + diff**2 / mp.variance))
    kl_grad = np.concatenate([-diff / mp.variance, -0.5 * (ratio - 1.0)])

    d = model.param_dim
    n = len(batch)
    if model.kind == "gaussian_mean":
        s2 = model.noise_var
        resid = batch.features - mean
        ll_total = float(np.sum(-0.5 * np.log(2 * np.pi * s2) - (resid**2 + var) / (2 * s2)))
        rows = np.concatenate([resid / s2, np.broadcast_to(-var / (2 * s2), (n, d))], axis=1)
        rows *= likelihood_temper
        elbo = likelihood_temper * ll_total - kl_weight * kl
    else:
        if rng is None:
            raise DomainError("a random generator is required for Monte Carlo estimation")
        std = np.sqrt(var)
        eps = rng.standard_normal((mc_samples, d))
        if n == 0:
            rows = np.zeros((0, 2 * d))
            elbo = -kl_weight * kl
        else:
            thetas = mean + std * eps
            ll, g = _loglik_and_theta_grads(model, thetas, batch)
            g_mean = g.mean(axis=0)
            g_logvar = np.einsum("snd,sd->nd", g, 0.5 * std * eps) / mc_samples
            rows = likelihood_temper * np.concatenate([g_mean, g_logvar], axis=1)
            elbo = likelihood_temper * float(ll.sum(axis=1).mean()) - kl_weight * kl

    if not np.isfinite(elbo) or not np.all(np.isfinite(rows)):
        raise OptimizerDiverged("non-finite ELBO or gradient")
    return ElboGradReport(elbo, rows, kl_grad, mc_samples, kl_weight=kl_weight, kl_value=kl)


def posterior_predictive(q, x, model: ModelSpec, n_mc: int = 100, rng: np.random.Generator | None = None) -> np.ndarray:
    """Monte Carlo posterior predictive ``p(y=1 | x)`` averaged over ``n_mc`` draws from ``q``."""
    if n_mc < 1:
        raise DomainError("n_mc must be >= 1")
    if rng is None:
        raise DomainError("a random generator is required")
    m = to_moment(q)
    if m.dim != model.param_dim:
        raise DimensionMismatch(f"q has dimension {m.dim}, model needs {model.param_dim}")
    thetas = m.mean + np.sqrt(m.variance) * rng.standard_normal((n_mc, m.dim))
    return expit(logits(model, thetas, np.atleast_2d(x))).mean(axis=0)


def evaluate(probs, labels) -> tuple[float, float]:
    """Accuracy at threshold 0.5 and mean Bernoulli log-likelihood."""
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if p.shape != y.shape:
        raise LengthMismatch(f"{p.size} probabilities vs {y.size} labels")
    pc = np.clip(p, 1e-12, 1.0 - 1e-12)
    accuracy = float(np.mean((p > 0.5) == (y == 1)))
    mean_loglik = float(np.mean(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)))
    return accuracy, mean_loglik


def gaussian_predictive_loglik(q, x, model: ModelSpec) -> float:
    """Mean held-out log density under the closed-form Gaussian-mean predictive."""
    m = to_moment(q)
    pred_var = m.variance + model.noise_var
    x = np.atleast_2d(x)
    ll = -0.5 * np.log(2 * np.pi * pred_var) - (x - m.mean) ** 2 / (2 * pred_var)
    return float(ll.sum(axis=1).mean())


def evaluate_model(q, heldout: Dataset, model: ModelSpec, n_mc: int = 100, rng=None) -> tuple[float | None, float]:
    """(accuracy, mean log-likelihood) of ``q`` on held-out data.

    Accuracy is ``None`` for the Gaussian-mean model.
    """
    if not model.is_bernoulli:
        return None, gaussian_predictive_loglik(q, heldout.features, model)
    probs = posterior_predictive(q, heldout.features, model, n_mc=n_mc, rng=rng)
    return evaluate(probs, heldout.labels)


def standard_normal_prior(model: ModelSpec) -> MeanFieldGaussian:
    return MeanFieldGaussian.standard_normal(model.param_dim)
