import math

import mpmath
import numpy as np
import pytest

from dpnkit.special import DomainError, digamma, log_beta, log_gamma, trigamma

mpmath.mp.dps = 50
EULER = 0.57721566490153286061

GRID = np.logspace(-3, 6, 200)


def test_digamma_known_values():
    assert digamma(1.0) == pytest.approx(-EULER, abs=1e-15)
    assert digamma(2.0) == pytest.approx(1 - EULER, abs=1e-15)
    assert abs(digamma(10.5) - float(mpmath.digamma(mpmath.mpf("10.5")))) < 1e-12


def test_log_gamma_known_values():
    assert abs(log_gamma(1.0)) < 1e-15
    assert log_gamma(0.5) == pytest.approx(0.5723649429247001, rel=1e-14)
    ref = float(mpmath.loggamma(mpmath.mpf("123.4")))
    assert abs(log_gamma(123.4) - ref) / abs(ref) < 1e-12


def test_digamma_grid_against_mpmath():
    got = digamma(GRID)
    ref = np.array([float(mpmath.digamma(mpmath.mpf(float(x)))) for x in GRID])
    assert np.max(np.abs(got - ref)) < 1e-12


def test_log_gamma_grid_against_mpmath():
    got = log_gamma(GRID)
    ref = np.array([float(mpmath.loggamma(mpmath.mpf(float(x)))) for x in GRID])
    # relative error is meaningless at the root x = 2 where ln G vanishes
    nonzero = np.abs(ref) > 1e-300
    assert np.max(np.abs(got - ref)[nonzero] / np.abs(ref)[nonzero]) < 1e-12


@pytest.mark.parametrize("x", [0.9999, 1.0001, 1.9999, 2.0001, 1.25, 2.2])
def test_log_gamma_near_roots(x):
    ref = float(mpmath.loggamma(mpmath.mpf(x)))
    assert abs(log_gamma(x) - ref) <= 1e-12 * abs(ref)


def test_trigamma_against_mpmath():
    xs = np.logspace(-3, 5, 40)
    ref = np.array([float(mpmath.psi(1, mpmath.mpf(float(x)))) for x in xs])
    np.testing.assert_allclose(trigamma(xs), ref, rtol=1e-11)


def test_recurrences():
    x = np.linspace(0.01, 50, 500)
    np.testing.assert_allclose(digamma(x + 1) - digamma(x), 1 / x, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(log_gamma(x + 1) - log_gamma(x), np.log(x), atol=1e-11)


def test_log_beta():
    a = np.array([2.0, 3.0, 4.5])
    expected = sum(math.lgamma(v) for v in a) - math.lgamma(a.sum())
    assert log_beta(a) == pytest.approx(expected, rel=1e-13)


def test_scalar_and_array_shapes():
    assert isinstance(digamma(3.0), float)
    assert digamma(np.ones((2, 3))).shape == (2, 3)


@pytest.mark.parametrize("fn", [digamma, log_gamma, trigamma])
@pytest.mark.parametrize("bad", [0.0, -1.0, -0.5])
def test_domain_errors(fn, bad):
    with pytest.raises(DomainError):
        fn(bad)
    with pytest.raises(DomainError):
        fn(np.array([1.0, bad]))
