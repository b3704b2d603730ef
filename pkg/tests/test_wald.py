import numpy as np
import pytest
from numpy.testing import assert_allclose

from tetel.el import LinearHypothesis, TestKind
from tetel.moments import MeanSpec, WorkingCorrelation, gee_model
from tetel.wald import gee_solve, sandwich_batch, wald_batch, wald_test


def _independence_sandwich(data):
    """Textbook GEE-independence estimate and robust covariance, written out directly."""
    X = data.X.reshape(-1, data.q)
    y = data.y.reshape(-1)
    A = X.T @ X
    beta = np.linalg.solve(A, X.T @ y)
    B = np.zeros_like(A)
    for i in range(data.n):
        u = data.X[i].T @ (data.y[i] - data.X[i] @ beta)
        B += np.outer(u, u)
    Ai = np.linalg.inv(A)
    return beta, Ai @ B @ Ai


def test_independence_wald_matches_textbook(dataset, spec2):
    beta_ref, cov_ref = _independence_sandwich(dataset)
    H = LinearHypothesis.coefficients(2, [1], 0.3)
    res = wald_test(spec2, dataset, WorkingCorrelation("independence"), H)
    assert res.kind is TestKind.WALD
    assert_allclose(res.extra["beta"], beta_ref, rtol=1e-10)
    assert_allclose(res.extra["covariance"], cov_ref, rtol=1e-5)
    diff = beta_ref[1] - 0.3
    assert res.statistic == pytest.approx(diff**2 / cov_ref[1, 1], rel=1e-5)


def test_wald_zero_at_estimate(dataset, spec2):
    beta = wald_test(spec2, dataset, WorkingCorrelation("exchangeable"),
                     LinearHypothesis.coefficients(2, [1])).extra["beta"]
    res = wald_test(spec2, dataset, WorkingCorrelation("exchangeable"),
                    LinearHypothesis.coefficients(2, [1], beta[1]))
    assert res.statistic == pytest.approx(0.0, abs=1e-12)
    assert res.p_value == pytest.approx(1.0)


def test_batch_matches_single(dataset, spec2):
    model = gee_model(dataset, spec2, WorkingCorrelation("ar1", 0.4))
    mom = model.affine_parts(dataset)
    H = LinearHypothesis(np.array([[1.0, -1.0]]), [0.0])
    beta, stat, cov = wald_batch(mom.offset[None], mom.slope[None], H.R, H.b0)
    single = wald_test(spec2, dataset, WorkingCorrelation("ar1", 0.4), H)
    assert_allclose(beta[0], single.extra["beta"], rtol=1e-10)
    assert stat[0] == pytest.approx(single.statistic, rel=1e-5)


def test_invariant_to_rescaling_moments(dataset, spec2):
    mom = gee_model(dataset, spec2).affine_parts(dataset)
    R, b0 = np.array([[0.0, 1.0]]), np.array([0.2])
    _, s1, c1 = wald_batch(mom.offset[None], mom.slope[None], R, b0)
    _, s2, c2 = wald_batch(7.5 * mom.offset[None], 7.5 * mom.slope[None], R, b0)
    assert_allclose(s1, s2, rtol=1e-10)
    assert_allclose(c1, c2, rtol=1e-10)


def test_gee_solve_root(dataset, spec2):
    mom = gee_model(dataset, spec2).affine_parts(dataset)
    beta = gee_solve(mom.offset[None], mom.slope[None])[0]
    assert_allclose(mom.rows(beta).sum(axis=0), 0.0, atol=1e-9)
    cov = sandwich_batch(mom.offset[None], mom.slope[None], beta[None])[0]
    assert_allclose(cov, cov.T)
    assert np.all(np.linalg.eigvalsh(cov) > 0)
