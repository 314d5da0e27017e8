import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from oylattice.special import (
    SUPPORTED_N,
    ModelParams,
    centered_abs_moment,
    digamma,
    sample_gamma,
    sample_u,
    stationary_cdf,
    trigamma,
)


def se_check(values, target, k=3.0):
    x = np.asarray(values, dtype=float)
    se = x.std(ddof=1) / math.sqrt(x.size)
    assert abs(x.mean() - target) <= k * se, (x.mean(), target, se)


# --- digamma / trigamma ---------------------------------------------------------

def test_digamma_known_values():
    # -gamma and -gamma - 2 ln 2 from mpmath's arbitrary-precision evaluation
    assert digamma(1.0) == pytest.approx(float(-mpmath.euler), abs=1e-12)
    assert digamma(0.5) == pytest.approx(float(-mpmath.euler - 2 * mpmath.log(2)), abs=1e-12)
    assert digamma(1.0) == pytest.approx(-0.5772156649, abs=1e-10)
    assert digamma(0.5) == pytest.approx(-1.9635100260, abs=1e-10)


def test_trigamma_known_values():
    assert trigamma(1.0) == pytest.approx(float(mpmath.pi**2 / 6), abs=1e-12)
    assert trigamma(0.5) == pytest.approx(float(mpmath.pi**2 / 2), abs=1e-12)
    assert trigamma(1.0) == pytest.approx(1.6449340668, abs=1e-10)
    assert trigamma(0.5) == pytest.approx(4.9348022005, abs=1e-10)


def test_recurrence_examples():
    assert digamma(3.0) - digamma(2.0) == pytest.approx(0.5, abs=1e-14)
    assert trigamma(2.0) - trigamma(3.0) == pytest.approx(0.25, abs=1e-14)


def test_against_mpmath_on_grid():
    xs = np.concatenate([np.linspace(0.05, 20, 400), np.geomspace(20, 1000, 100)])
    d = digamma(xs)
    t = trigamma(xs)
    for x, dv, tv in zip(xs, d, t):
        assert abs(dv - float(mpmath.digamma(x))) <= 1e-12
        assert abs(tv - float(mpmath.polygamma(1, x))) <= 1e-12


@settings(max_examples=200, deadline=None)
@given(st.floats(min_value=1e-3, max_value=0.05))
def test_small_arguments_relative_accuracy(x):
    assert digamma(x) == pytest.approx(float(mpmath.digamma(x)), rel=1e-13)
    assert trigamma(x) == pytest.approx(float(mpmath.polygamma(1, x)), rel=1e-13)


@settings(max_examples=200, deadline=None)
@given(st.floats(min_value=0.01, max_value=500.0))
def test_recurrences_hold(x):
    assert digamma(x + 1) - digamma(x) == pytest.approx(1 / x, rel=1e-11, abs=1e-12)
    assert trigamma(x) - trigamma(x + 1) == pytest.approx(1 / x**2, rel=1e-11, abs=1e-12)


@pytest.mark.parametrize("bad", [0.0, -1.0, float("nan"), -0.5])
def test_nonpositive_arguments_raise(bad):
    with pytest.raises(ValueError):
        digamma(bad)
    with pytest.raises(ValueError):
        trigamma(bad)


def test_array_input_keeps_shape():
    x = np.array([[0.5, 1.0], [2.0, 10.0]])
    assert digamma(x).shape == (2, 2)
    assert isinstance(digamma(2.0), float)


# --- model constants --------------------------------------------------------------

@pytest.mark.parametrize("n", SUPPORTED_N)
def test_scaling_identities(n):
    p = ModelParams(n)
    assert p.beta**2 * p.sqrt_n == pytest.approx(1.0, rel=4e-16)
    assert p.nu == pytest.approx(p.theta / p.beta**2, rel=1e-15)
    assert p.sigma2 == pytest.approx(1 / math.sqrt(n) + 1 / (2 * n), rel=1e-15)
    assert p.mean_W == -0.5 * p.beta**2


def test_a_n_increasing_and_sublinear():
    a = [ModelParams(n).a_n for n in SUPPORTED_N]
    ratio = [ModelParams(n).a_n / math.sqrt(n) for n in SUPPORTED_N]
    assert all(x < y for x, y in zip(a, a[1:]))
    assert all(x > y for x, y in zip(ratio, ratio[1:]))


def test_n16_constants():
    p = ModelParams(16)
    assert p.mean_W == -0.125
    assert p.sigma2 == 0.28125
    # mpmath oracle for (1/2) log 16 - psi(4.5) and psi'(4.5)
    assert p.rho == pytest.approx(float(0.5 * mpmath.log(16) - mpmath.digamma(4.5)), abs=1e-14)
    assert p.var_u == pytest.approx(float(mpmath.polygamma(1, 4.5)), abs=1e-14)
    assert p.rho == pytest.approx(-0.0025766, abs=5e-8)
    assert p.var_u == pytest.approx(0.2487251, abs=5e-8)
    assert centered_abs_moment(p, 2) == p.var_u
    with pytest.raises(NotImplementedError):
        centered_abs_moment(p, 4)


def test_params_validation():
    with pytest.raises(ValueError):
        ModelParams(17)
    with pytest.raises(ValueError):
        ModelParams(16, J=1)
    with pytest.raises(ValueError):
        ModelParams(16, dt=0.0)
    with pytest.raises(ValueError):
        ModelParams(16, T_macro=-1.0)


def test_frame_invariant():
    p = ModelParams(256, J=100, T_macro=0.05)
    need = p.required_J(8.0)
    assert need > p.T_micro + p.frame_offset + 8.0 * p.sqrt_n
    assert p.frame_violations(8.0)
    q = p.with_lattice_for(8.0, block=10)
    assert q.J == p.required_J(8.0, 10)
    assert not q.frame_violations(8.0, 10)


# --- samplers -------------------------------------------------------------------

def test_gamma_mean_and_variance():
    rng = np.random.default_rng(1)
    x = sample_gamma(4.5, rng, 10**6)
    se_check(x, 4.5)
    c = (x - x.mean()) ** 2
    se_check(c, 4.5)


def test_gamma_shape_one_is_exponential():
    rng = np.random.default_rng(2)
    x = sample_gamma(1.0, rng, 10**6)
    se_check((x > 1.0).astype(float), math.exp(-1.0))


@pytest.mark.parametrize("shape", [0.3, 0.7, 2.0, 16.5])
def test_gamma_ks_against_scipy(shape):
    rng = np.random.default_rng(3)
    x = sample_gamma(shape, rng, 20000)
    assert stats.kstest(x, stats.gamma(shape).cdf).statistic <= 1.63 / math.sqrt(x.size)


def test_gamma_scalar_and_errors():
    rng = np.random.default_rng(4)
    assert isinstance(sample_gamma(2.0, rng), float)
    with pytest.raises(ValueError):
        sample_gamma(0.0, rng)


def test_sample_u_moments_n16():
    p = ModelParams(16)
    u = sample_u(p, np.random.default_rng(5), 10**6)
    se_check(u, p.rho)
    se_check((u - u.mean()) ** 2, p.var_u)
    se_check(1.0 - np.exp(-u), -0.125)


# --- stationary CDF ---------------------------------------------------------------

def test_cdf_limits_and_monotone():
    p = ModelParams(16)
    assert stationary_cdf(p, -50.0) < 1e-12
    assert stationary_cdf(p, 50.0) == pytest.approx(1.0, abs=1e-12)
    xs = np.linspace(-5, 5, 2001)
    F = stationary_cdf(p, xs)
    assert np.all(np.diff(F) >= 0)
    assert np.all((F > 0) & (F < 1))


def test_cdf_against_density_quadrature():
    # density of u = -log X + log(n)/2 with X ~ Gamma(nu):
    # f(u) = z^nu e^{-z} / Gamma(nu),  z = sqrt(n) e^{-u}
    p = ModelParams(16)
    nu = p.nu

    def density(u):
        z = p.sqrt_n * math.exp(-u)
        return math.exp(nu * math.log(z) - z - math.lgamma(nu))

    # below u = -8 the integrand is under e^{-10^4}
    val, _ = integrate.quad(density, -8.0, 0.0, epsabs=1e-13, epsrel=1e-12, limit=200)
    assert stationary_cdf(p, 0.0) == pytest.approx(val, abs=1e-8)


def test_cdf_matches_sampling():
    p = ModelParams(16)
    u = sample_u(p, np.random.default_rng(6), 10**6)
    se_check((u <= 0).astype(float), stationary_cdf(p, 0.0))
