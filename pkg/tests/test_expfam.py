import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dppvi.errors import DimensionMismatch, DomainError, NonNormalizable
from dppvi.expfam import (
    Factor,
    MeanFieldGaussian,
    MomentGaussian,
    combine,
    damp,
    kl_divergence,
    lambda_bytes,
    lambda_checksum,
    lambda_from_bytes,
    natural_to_params,
    params_to_natural,
    to_moment,
    to_natural,
)

from oracles import gaussian_kl_quadrature

finite = st.floats(-50, 50, allow_nan=False)
positive = st.floats(1e-3, 50, allow_nan=False)


def mfg(eta1, eta2):
    return MeanFieldGaussian(np.atleast_1d(eta1), np.atleast_1d(eta2))


class TestConversions:
    def test_standard_normal(self):
        m = to_moment(mfg(0.0, -0.5))
        assert m.mean[0] == 0.0 and m.variance[0] == 1.0

    def test_closed_form_inversion(self):
        m = to_moment(mfg(2.0, -1.0))
        np.testing.assert_allclose([m.mean[0], m.variance[0]], [1.0, 0.5])

    def test_positive_eta2_rejected(self):
        with pytest.raises(NonNormalizable):
            to_moment(np.array([0.0, 0.1]))
        with pytest.raises(NonNormalizable):
            mfg(0.0, 0.1)

    def test_to_natural(self):
        q = to_natural(MomentGaussian(np.array([0.0]), np.array([1.0])))
        np.testing.assert_array_equal(q.lam, [0.0, -0.5])
        q = to_natural(MomentGaussian(np.array([1.0]), np.array([0.5])))
        np.testing.assert_allclose(q.lam, [2.0, -1.0])

    def test_degenerate_variance(self):
        with pytest.raises(DomainError):
            to_natural(MomentGaussian(np.array([3.0]), np.array([0.0])))

    @given(arrays(np.float64, 4, elements=finite), arrays(np.float64, 4, elements=positive))
    def test_round_trip(self, mean, var):
        back = to_moment(to_natural(MomentGaussian(mean, var)))
        np.testing.assert_allclose(back.mean, mean, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(back.variance, var, rtol=1e-12)

    @given(arrays(np.float64, 3, elements=finite), arrays(np.float64, 3, elements=st.floats(-3, 3)))
    def test_optimisation_space_round_trip(self, mean, logvar):
        lam = params_to_natural(np.concatenate([mean, logvar]))
        np.testing.assert_allclose(natural_to_params(lam), np.concatenate([mean, logvar]), rtol=1e-10, atol=1e-10)


class TestCombine:
    def test_zero_factor_identity(self):
        np.testing.assert_array_equal(combine(np.array([1.0, -1.0]), Factor(np.zeros(2))), [1.0, -1.0])

    def test_self_quotient(self):
        np.testing.assert_array_equal(combine(np.array([1.0, -1.0]), np.array([1.0, -1.0]), -1), [0.0, 0.0])

    def test_prior_times_two_factors(self):
        prior = MeanFieldGaussian.standard_normal(1)
        t = Factor(np.array([0.5, -0.25]))
        lam = combine(combine(prior, t), t)
        np.testing.assert_allclose(lam, [1.0, -1.0])
        m = to_moment(lam)
        np.testing.assert_allclose([m.mean[0], m.variance[0]], [0.5, 0.5])

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            combine(np.zeros(2), np.zeros(4))

    def test_factor_may_be_unnormalized(self):
        f = Factor(np.array([0.3, 2.0]))
        assert f.lam[1] > 0

    @given(arrays(np.float64, (3, 6), elements=finite))
    def test_associative_commutative(self, deltas):
        base = np.concatenate([np.zeros(3), -0.5 * np.ones(3)])
        a = combine(combine(combine(base, deltas[0]), deltas[1]), deltas[2])
        b = combine(combine(combine(base, deltas[2]), deltas[0]), deltas[1])
        c = combine(base, combine(deltas[0], combine(deltas[1], deltas[2])))
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(a, c, rtol=1e-12, atol=1e-12)

    @given(arrays(np.float64, 4, elements=finite), arrays(np.float64, 4, elements=finite))
    def test_quotient_product_round_trip(self, q, t):
        np.testing.assert_allclose(combine(combine(q, t, -1), t, +1), q, rtol=1e-12, atol=1e-12)


class TestKL:
    def test_self_is_zero(self):
        q = mfg([0.3, -1.0], [-0.7, -2.0])
        assert kl_divergence(q, q) == 0.0

    def test_mean_shift(self):
        assert kl_divergence(mfg(0.0, -0.5), mfg(1.0, -0.5)) == pytest.approx(0.5, abs=1e-14)

    def test_variance_ratio_against_quadrature(self):
        q = to_natural(MomentGaussian(np.array([0.0]), np.array([4.0])))
        p = MeanFieldGaussian.standard_normal(1)
        closed = kl_divergence(q, p)
        assert closed == pytest.approx(0.5 * (4 - 1 - np.log(4)), rel=1e-14)
        assert closed == pytest.approx(0.80685, abs=1e-4)
        assert closed == pytest.approx(gaussian_kl_quadrature(0, 4, 0, 1), rel=1e-7)

    def test_rejects_improper(self):
        with pytest.raises(NonNormalizable):
            kl_divergence(np.array([0.0, 1.0]), np.array([0.0, -0.5]))

    @settings(max_examples=60)
    @given(arrays(np.float64, 3, elements=finite), arrays(np.float64, 3, elements=positive),
           arrays(np.float64, 3, elements=finite), arrays(np.float64, 3, elements=positive))
    def test_nonnegative(self, m1, v1, m2, v2):
        q = to_natural(MomentGaussian(m1, v1))
        p = to_natural(MomentGaussian(m2, v2))
        kl = kl_divergence(q, p)
        assert kl >= -1e-12
        if np.allclose(m1, m2, rtol=0, atol=0) and np.allclose(v1, v2, rtol=0, atol=0):
            assert kl == pytest.approx(0.0, abs=1e-10)


class TestDamp:
    def test_no_damping(self):
        new = np.array([0.3, -0.2])
        out = damp(np.array([1.0, -1.0]), new, 1.0)
        np.testing.assert_array_equal(out, new)

    def test_convex_combination(self):
        assert damp(np.array([0.0]), np.array([1.0]), 0.4)[0] == pytest.approx(0.4, abs=1e-15)

    @pytest.mark.parametrize("rho", [0.0, -0.1, 1.5])
    def test_outside_range(self, rho):
        with pytest.raises(DomainError):
            damp(np.zeros(2), np.ones(2), rho)


class TestSerialization:
    def test_little_endian_float64(self):
        lam = np.array([1.0, -0.5])
        raw = lambda_bytes(lam)
        assert raw == np.array([1.0, -0.5], dtype="<f8").tobytes()
        assert len(raw) == 16
        np.testing.assert_array_equal(lambda_from_bytes(raw), lam)

    def test_checksum_tracks_bits(self):
        a = np.array([1.0, -0.5])
        b = a.copy()
        b[0] = np.nextafter(1.0, 2.0)
        assert lambda_checksum(a) == lambda_checksum(a.copy())
        assert lambda_checksum(a) != lambda_checksum(b)


class TestConjugateFactorisation:
    def test_gaussian_mean_shards_recover_posterior(self, rng):
        from dppvi.conjugate import GaussianMean
        from dppvi.models import Dataset
        from oracles import gaussian_mean_posterior

        fam = GaussianMean(noise_var=2.0)
        x = rng.normal(1.5, np.sqrt(2.0), size=(40, 1))
        shards = [Dataset(x[i::4], np.zeros(10)) for i in range(4)]
        lam = fam.prior_lambda(1)
        for s in shards:
            lam = combine(lam, fam.sufficient_stats(s))
        m = to_moment(lam)
        mean, var = gaussian_mean_posterior(0.0, 1.0, x, 2.0)
        np.testing.assert_allclose(m.mean, mean, rtol=1e-12)
        np.testing.assert_allclose(m.variance, var, rtol=1e-12)
