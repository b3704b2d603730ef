"""Wald tests from GEE fits with a sandwich covariance."""

from __future__ import annotations

import numpy as np

from .chi2 import chi2_sf
from .data import LongitudinalDataset
from .el import LinearHypothesis, SingularMomentCovarianceError, TestKind, TestResult, sandwich_covariance
from .moments import MeanSpec, WorkingCorrelation, gee_model


def gee_solve(off: np.ndarray, slope: np.ndarray) -> np.ndarray:
    """Root of ``sum_i g_i(beta) = 0`` for square affine moments, batched: off (B, n, p), slope (B, n, p, p)."""
    return np.linalg.solve(slope.sum(axis=1), off.sum(axis=1)[..., None])[..., 0]


def sandwich_batch(off: np.ndarray, slope: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """``(D^T V^{-1} D)^{-1}`` for a batch of affine moment systems at ``theta`` (B, p)."""
    rows = off - np.einsum("bnrp,bp->bnr", slope, theta)
    n = rows.shape[1]
    V = np.einsum("bnr,bns->brs", rows, rows) / n
    D = slope.mean(axis=1)
    info = np.einsum("brp,brq->bpq", D, np.linalg.solve(V, D))
    cov = np.linalg.inv(info)
    return 0.5 * (cov + np.swapaxes(cov, 1, 2))


def wald_batch(off: np.ndarray, slope: np.ndarray, R, b0):
    """GEE estimates, Wald statistics and their covariances for a batch of square systems."""
    R = np.atleast_2d(np.asarray(R, dtype=float))
    b0 = np.asarray(b0, dtype=float).reshape(-1)
    n = off.shape[1]
    beta = gee_solve(off, slope)
    cov = sandwich_batch(off, slope, beta) / n
    diff = beta @ R.T - b0
    contrast = np.einsum("cp,bpq,dq->bcd", R, cov, R)
    stat = np.einsum("bc,bc->b", diff, np.linalg.solve(contrast, diff[..., None])[..., 0])
    return beta, np.maximum(stat, 0.0), cov


def wald_test(mean_spec: MeanSpec, data: LongitudinalDataset, working: WorkingCorrelation,
              hypothesis: LinearHypothesis) -> TestResult:
    """Wald statistic ``(R b - b0)^T [R Sigma R^T / n]^{-1} (R b - b0)`` from a GEE fit.

    ``Sigma`` is the sandwich covariance of the GEE moments with the given
    working correlation (its parameter estimated from residuals when unset).
    """
    model = gee_model(data, mean_spec, working)
    moments = model.affine_parts(data)
    beta = gee_solve(moments.offset[None], moments.slope[None])[0]
    cov = sandwich_covariance(model, data, beta) / data.n
    diff = hypothesis.residual(beta)
    contrast = hypothesis.R @ cov @ hypothesis.R.T
    if np.linalg.cond(contrast) > 1e12:
        raise SingularMomentCovarianceError("variance of the tested contrast is singular")
    stat = float(max(diff @ np.linalg.solve(contrast, diff), 0.0))
    return TestResult(statistic=stat, df=hypothesis.c0, p_value=chi2_sf(stat, hypothesis.c0),
                      kind=TestKind.WALD, hypothesis=hypothesis, extra={"beta": beta, "covariance": cov})
