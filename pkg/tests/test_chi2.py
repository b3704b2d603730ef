import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy import stats

from tetel.chi2 import chi2_cdf, chi2_quantile, chi2_sf, gamma_p, gamma_q


@pytest.mark.parametrize("a", [0.5, 1.0, 2.5, 7.0, 30.0])
@pytest.mark.parametrize("x", [1e-3, 0.4, 1.0, 3.0, 12.0, 45.0])
def test_incomplete_gamma_against_mpmath(a, x):
    ref = float(mpmath.gammainc(a, 0, x, regularized=True))
    assert_allclose(gamma_p(a, x), ref, rtol=1e-12, atol=1e-15)
    refq = float(mpmath.gammainc(a, x, mpmath.inf, regularized=True))
    assert_allclose(gamma_q(a, x), refq, rtol=1e-10, atol=1e-300)


@pytest.mark.parametrize("k", [1, 2, 3, 5, 10, 16, 40])
def test_sf_matches_scipy(k):
    x = np.linspace(0.01, 4 * k + 20, 41)
    assert_allclose([chi2_sf(v, k) for v in x], stats.chi2.sf(x, k), rtol=1e-10, atol=1e-300)
    assert_allclose([chi2_cdf(v, k) for v in x], stats.chi2.cdf(x, k), rtol=1e-10, atol=1e-14)


def test_known_quantile():
    assert chi2_quantile(0.95, 1) == pytest.approx(3.841458820694124, abs=1e-8)
    assert chi2_quantile(0.95, 4) == pytest.approx(9.487729036781154, abs=1e-8)
    assert round(chi2_quantile(0.95, 4), 4) == 9.4877


def test_edges():
    assert chi2_sf(0.0, 3) == 1.0
    assert chi2_sf(math.inf, 3) == 0.0
    assert chi2_cdf(0.0, 2) == 0.0
    with pytest.raises(ValueError):
        chi2_sf(1.0, 0)
    with pytest.raises(ValueError):
        chi2_quantile(1.5, 2)


def test_sf_vectorized():
    out = chi2_sf(np.array([[1.0, 2.0], [3.0, 4.0]]), 2)
    assert out.shape == (2, 2)
    assert_allclose(out, np.exp(-np.array([[1.0, 2.0], [3.0, 4.0]]) / 2), rtol=1e-13)


@settings(max_examples=200, deadline=None)
@given(q=st.floats(1e-6, 1 - 1e-6), k=st.integers(1, 60))
def test_quantile_round_trip(q, k):
    x = chi2_quantile(q, k)
    assert abs(chi2_cdf(x, k) - q) < 1e-8


@settings(max_examples=100, deadline=None)
@given(x=st.floats(0.0, 200.0), k=st.integers(1, 30))
def test_sf_plus_cdf_is_one(x, k):
    assert abs(chi2_sf(x, k) + chi2_cdf(x, k) - 1.0) < 1e-12
