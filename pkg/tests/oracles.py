"""Reference computations that share no code with the package.

They are deliberately slow and literal; tests compare the package against
them.
"""

import math

import numpy as np
from scipy import integrate, optimize, stats


def gaussian_mechanism_delta(eps, sigma):
    """delta(eps) of one Gaussian mechanism (sensitivity 1, noise std sigma).

    Integrates the privacy-loss tail directly: for output y ~ N(1, sigma^2)
    the loss is L(y) = (2y - 1) / (2 sigma^2) and
    delta = E[(1 - exp(eps - L))_+].
    """
    y0 = eps * sigma**2 + 0.5  # L(y0) = eps

    def integrand(y):
        loss = (2 * y - 1) / (2 * sigma**2)
        return (1.0 - math.exp(eps - loss)) * stats.norm.pdf(y, loc=1.0, scale=sigma)

    val, _ = integrate.quad(integrand, y0, np.inf, limit=200, epsabs=1e-14, epsrel=1e-10)
    return val


def gaussian_mechanism_epsilon(sigma, delta):
    """Smallest eps with gaussian_mechanism_delta(eps) <= delta, by root finding."""
    return optimize.brentq(lambda e: gaussian_mechanism_delta(e, sigma) - delta, 1e-9, 200.0, xtol=1e-10)


def gaussian_kl_quadrature(m1, v1, m2, v2):
    """KL(N(m1, v1) || N(m2, v2)) by numeric integration."""
    p, q = stats.norm(m1, math.sqrt(v1)), stats.norm(m2, math.sqrt(v2))
    lo, hi = m1 - 20 * math.sqrt(v1), m1 + 20 * math.sqrt(v1)
    val, _ = integrate.quad(lambda x: p.pdf(x) * (p.logpdf(x) - q.logpdf(x)), lo, hi, limit=200)
    return val


def gaussian_mean_posterior(prior_mean, prior_var, x, noise_var):
    """Exact posterior (mean, var) per coordinate for N(theta, noise_var) observations."""
    x = np.atleast_2d(x)
    precision = 1.0 / prior_var + x.shape[0] / noise_var
    mean = (prior_mean / prior_var + x.sum(axis=0) / noise_var) / precision
    return mean, 1.0 / precision
