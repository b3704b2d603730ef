"""Adjusted exponentially tilted empirical likelihood (AETEL).

The criterion at a fixed parameter is computed through its convex dual: the
tilting vector ``lam`` minimizes ``log mean_i exp(lam^T g_i)``, the implied
probabilities are ``p_i ~ exp(lam^T g_i)`` and the criterion is
``-(N)^-1 sum_i log(N p_i)`` over the ``N`` moment rows. With the adjustment a
pseudo-row ``-(a_n / n) sum_i g_i``, ``a_n = max(1, log(n) / 2)``, is appended,
which places the origin inside the convex hull of the rows for every parameter.

Conventions: the criterion is nonnegative and estimators minimize it;
likelihood-ratio statistics are ``2 N (constrained minimum - free minimum)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import linprog, minimize

from . import _engine
from .chi2 import chi2_sf
from .data import LongitudinalDataset
from .moments import AffineMoments, MomentModel


class TestKind(str, enum.Enum):
    __test__ = False  # not a pytest test class

    LR_AETEL = "LR_Aetel"
    LR_ETEL = "LR_Etel"
    LR_GF = "LR_GF"
    LR_TETEL = "LR_Tetel"
    WALD = "Wald"


class InfeasibleMomentsError(ArithmeticError):
    """The origin is outside the convex hull of unadjusted moment rows."""


class SingularMomentCovarianceError(np.linalg.LinAlgError):
    """The moment second-moment matrix is numerically singular."""


@dataclass(frozen=True)
class LinearHypothesis:
    """``R theta = b0`` with ``R`` of full row rank."""

    R: np.ndarray
    b0: np.ndarray

    def __post_init__(self):
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        b0 = np.asarray(self.b0, dtype=float).reshape(-1)
        if R.shape[0] != b0.size:
            raise ValueError(f"R has {R.shape[0]} rows but b0 has {b0.size} entries")
        if R.shape[0] > R.shape[1] or np.linalg.matrix_rank(R) < R.shape[0]:
            raise ValueError("R must have full row rank c0 <= p")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "b0", b0)

    @property
    def c0(self) -> int:
        return self.R.shape[0]

    @property
    def p(self) -> int:
        return self.R.shape[1]

    @classmethod
    def coefficients(cls, p: int, index, value=0.0) -> "LinearHypothesis":
        """Hypothesis fixing the listed coefficients, e.g. ``coefficients(4, [3])`` for beta_3 = 0."""
        index = np.atleast_1d(index)
        R = np.zeros((index.size, p))
        R[np.arange(index.size), index] = 1.0
        return cls(R, np.broadcast_to(np.asarray(value, dtype=float), (index.size,)).copy())

    def residual(self, theta) -> np.ndarray:
        return self.R @ np.asarray(theta, dtype=float) - self.b0

    def particular(self) -> np.ndarray:
        return np.linalg.pinv(self.R) @ self.b0

    def null_basis(self) -> np.ndarray:
        return null_space(self.R)


@dataclass(frozen=True)
class MomentMatrix:
    rows: np.ndarray
    n: int
    r: int
    adjusted: bool


@dataclass(frozen=True)
class DualSolution:
    tilt: np.ndarray
    probabilities: np.ndarray
    objective: float
    converged: bool
    iterations: int
    feasible: bool = True


@dataclass(frozen=True)
class Estimate:
    theta: np.ndarray
    objective: float
    converged: bool
    covariance: np.ndarray | None = None
    constrained_to: LinearHypothesis | None = None
    iterations: int = 0

    @property
    def standard_errors(self) -> np.ndarray | None:
        if self.covariance is None:
            return None
        return np.sqrt(np.clip(np.diag(self.covariance), 0, None))


@dataclass(frozen=True)
class TestResult:
    __test__ = False  # not a pytest test class

    statistic: float
    df: int
    p_value: float
    kind: TestKind
    hypothesis: LinearHypothesis | None = None
    extra: dict = field(default_factory=dict, compare=False)

    def reject(self, level: float = 0.05) -> bool:
        return self.p_value <= level


def _as_affine(model_or_moments, data=None) -> AffineMoments:
    if isinstance(model_or_moments, AffineMoments):
        return model_or_moments
    if data is None:
        raise TypeError("a MomentModel needs data")
    return model_or_moments.affine_parts(data)


def _system(moments: AffineMoments, adjusted: bool):
    moments = moments.independent()
    off, slope = moments.offset[None], moments.slope[None]
    if adjusted:
        off, slope = _engine.with_adjustment(off, slope)
    return off, slope


# ---------------------------------------------------------------------------
# fixed-theta quantities


def adjusted_moment_matrix(model: MomentModel, data: LongitudinalDataset, theta, adjusted: bool = True) -> MomentMatrix:
    """Moment rows at ``theta``, plus the adjustment row when ``adjusted``."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (model.p,):
        raise ValueError(f"theta has shape {theta.shape}, model expects ({model.p},)")
    rows = model.evaluate_all(data, theta)
    return moment_matrix_from_rows(rows, adjusted)


def moment_matrix_from_rows(rows, adjusted: bool = True) -> MomentMatrix:
    rows = np.asarray(rows, dtype=float)
    if rows.ndim == 1:
        rows = rows[:, None]
    if not np.all(np.isfinite(rows)):
        raise FloatingPointError("non-finite moment evaluation")
    n, r = rows.shape
    if adjusted:
        a = _engine.adjustment_factor(n)
        rows = np.vstack([rows, -(a / n) * rows.sum(axis=0)])
    return MomentMatrix(rows=rows, n=n, r=r, adjusted=adjusted)


def _strictly_feasible(rows: np.ndarray, tol: float = 1e-12) -> bool:
    """Whether some strictly positive weights put the weighted row mean at the origin."""
    N, r = rows.shape
    # variables: p_1..p_N, s; maximize s subject to p_i >= s
    c = np.zeros(N + 1)
    c[-1] = -1.0
    A_eq = np.zeros((r + 1, N + 1))
    A_eq[:r, :N] = rows.T
    A_eq[r, :N] = 1.0
    b_eq = np.zeros(r + 1)
    b_eq[r] = 1.0
    A_ub = np.hstack([-np.eye(N), np.ones((N, 1))])
    res = linprog(c, A_ub=A_ub, b_ub=np.zeros(N), A_eq=A_eq, b_eq=b_eq,
                  bounds=[(0, None)] * N + [(None, 1.0)], method="highs")
    return bool(res.status == 0 and -res.fun > tol)


def solve_dual(mm: MomentMatrix) -> DualSolution:
    """Tilting vector, implied probabilities and criterion value for a moment matrix.

    Non-convergence is reported through ``converged=False``. When an unadjusted
    matrix does not admit strictly positive weights the solution comes back
    with ``feasible=False`` and an infinite objective.
    """
    rows = np.asarray(mm.rows, dtype=float)
    if not np.all(np.isfinite(rows)):
        raise FloatingPointError("moment matrix is not finite")
    d = _engine.solve_dual_batch(rows[None])
    N = rows.shape[0]
    logp = d.logp[0]
    converged = bool(d.converged[0])
    feasible = True
    objective = max(0.0, float(-logp.mean() - math.log(N)))
    if not converged:
        feasible = mm.adjusted or _strictly_feasible(rows)
        if not feasible:
            objective = math.inf
    return DualSolution(tilt=d.lam[0], probabilities=np.exp(logp), objective=objective,
                        converged=converged, iterations=int(d.iterations[0]), feasible=feasible)


def aetel_objective(model: MomentModel, data: LongitudinalDataset, theta, adjusted: bool = True) -> float:
    """Criterion value at ``theta`` (the plain ETEL analogue when ``adjusted`` is false)."""
    sol = solve_dual(adjusted_moment_matrix(model, data, theta, adjusted))
    if not sol.feasible:
        raise InfeasibleMomentsError("origin is outside the convex hull of the moment rows")
    if not sol.converged:
        raise ArithmeticError(f"dual solver did not converge after {sol.iterations} iterations")
    return sol.objective


# ---------------------------------------------------------------------------
# estimation


def _objective_fn(off, slope):
    state = {"lam": None}

    def f(theta):
        d = _engine.solve_dual_batch(_engine.rows_at(off, slope, np.asarray(theta)[None]), lam0=state["lam"])
        if d.converged[0]:
            state["lam"] = d.lam
        return float(d.objective[0])

    return f


def _polish(off, slope, res: _engine.OuterBatch) -> _engine.OuterBatch:
    """Nelder-Mead from the best point found, then one more Gauss-Newton pass."""
    if not np.isfinite(res.objective[0]):
        return res
    f = _objective_fn(off, slope)
    nm = minimize(f, res.theta[0], method="Nelder-Mead",
                  options={"xatol": 1e-10, "fatol": 1e-15, "maxiter": 4000})
    start = nm.x[None] if nm.fun < res.objective[0] else res.theta
    again = _engine.minimize_batch(off, slope, start)
    return again if again.objective[0] <= res.objective[0] else res


def fit_moments(moments: AffineMoments, hypothesis: LinearHypothesis | None = None, init=None,
                adjusted: bool = True, covariance: bool = True, polish: bool = True) -> Estimate:
    """Minimize the criterion for affine moments, optionally subject to ``R theta = b0``."""
    p = moments.p
    off, slope = _system(moments, adjusted)
    theta0 = None if init is None else np.asarray(init, dtype=float).reshape(1, p)
    if theta0 is not None and not np.all(np.isfinite(theta0)):
        raise ValueError("initial value must be finite")
    if hypothesis is None:
        res = _engine.minimize_batch(off, slope, theta0)
        if polish and not res.converged[0]:
            res = _polish(off, slope, res)
        theta = res.theta[0]
    else:
        if hypothesis.p != p:
            raise ValueError(f"hypothesis has {hypothesis.p} columns, model has p={p}")
        off_c, slope_c, theta_p, Nmat = _engine.null_space_reparam(off, slope, hypothesis.R, hypothesis.b0)
        g0 = None if theta0 is None else (theta0 - theta_p) @ Nmat
        res = _engine.minimize_batch(off_c, slope_c, g0)
        if polish and not res.converged[0] and Nmat.shape[1] > 0:
            res = _polish(off_c, slope_c, res)
        theta = theta_p[0] + Nmat @ res.theta[0]
    cov = None
    if covariance and hypothesis is None and np.isfinite(res.objective[0]):
        try:
            cov = sandwich_from_moments(moments, theta) / moments.n
        except SingularMomentCovarianceError:
            cov = None
    return Estimate(theta=theta, objective=float(res.objective[0]), converged=bool(res.converged[0]),
                    covariance=cov, constrained_to=hypothesis, iterations=int(res.iterations[0]))


def fit(model: MomentModel, data: LongitudinalDataset, hypothesis: LinearHypothesis | None = None,
        init=None, adjusted: bool = True, covariance: bool = True) -> Estimate:
    """AETEL estimate, unconstrained or on ``{theta : R theta = b0}``.

    The default start is the minimizer of ``|sum_i g_i(theta)|^2``, which for
    GEE-independence moments is the GEE estimate itself.
    """
    return fit_moments(model.affine_parts(data), hypothesis, init, adjusted, covariance)


def _lr_from_fits(free: Estimate, null: Estimate, N: int, clamp: float = 1e-8) -> float:
    stat = 2.0 * N * (null.objective - free.objective)
    if stat < -clamp:
        raise ArithmeticError(f"negative likelihood-ratio statistic {stat:.3g}: the free fit is not a minimum")
    return max(stat, 0.0)


def lr_test_moments(moments: AffineMoments, hypothesis: LinearHypothesis, adjusted: bool = True,
                    kind: TestKind | None = None, init=None) -> TestResult:
    free = fit_moments(moments, None, init, adjusted, covariance=False)
    null = fit_moments(moments, hypothesis, free.theta, adjusted, covariance=False)
    if null.objective < free.objective:
        retry = fit_moments(moments, None, null.theta, adjusted, covariance=False)
        if retry.objective < free.objective:
            free = retry
    if not (free.converged and null.converged):
        raise ArithmeticError("likelihood-ratio fits did not converge")
    N = moments.n + 1 if adjusted else moments.n
    stat = _lr_from_fits(free, null, N)
    if kind is None:
        kind = TestKind.LR_AETEL if adjusted else TestKind.LR_ETEL
    return TestResult(statistic=stat, df=hypothesis.c0, p_value=chi2_sf(stat, hypothesis.c0), kind=kind,
                      hypothesis=hypothesis, extra={"free": free, "null": null})


def lr_test(model: MomentModel, data: LongitudinalDataset, hypothesis: LinearHypothesis,
            adjusted: bool = True) -> TestResult:
    """Likelihood-ratio test of ``R theta = b0``, referred to chi-square with ``c0`` df."""
    return lr_test_moments(model.affine_parts(data), hypothesis, adjusted)


def goodness_of_fit_moments(moments: AffineMoments, adjusted: bool = True) -> TestResult:
    """Over-identification test; the degrees of freedom count only linearly independent moments."""
    moments = moments.independent()
    if moments.r <= moments.p:
        raise ValueError("goodness of fit needs more (independent) moments than parameters (r > p)")
    est = fit_moments(moments, None, None, adjusted, covariance=False)
    if not est.converged:
        raise ArithmeticError("goodness-of-fit fit did not converge")
    N = moments.n + 1 if adjusted else moments.n
    stat = 2.0 * N * est.objective
    df = moments.r - moments.p
    return TestResult(statistic=stat, df=df, p_value=chi2_sf(stat, df), kind=TestKind.LR_GF,
                      extra={"estimate": est})


def goodness_of_fit(model: MomentModel, data: LongitudinalDataset, adjusted: bool = True) -> TestResult:
    """Over-identification statistic ``2 N min_theta l(theta)`` on ``r - p`` df.

    ``r`` is the number of linearly independent moment components, which can
    be smaller than ``model.r`` (with an intercept column, for instance, the
    type II products for the intercept repeat the same residuals).
    """
    return goodness_of_fit_moments(model.affine_parts(data), adjusted)


# ---------------------------------------------------------------------------
# covariance


def sandwich_from_rows(rows_fn, theta, cond_limit: float = 1e12) -> np.ndarray:
    """``(D^T V^{-1} D)^{-1}`` with ``D`` from central differences of the mean moment."""
    theta = np.asarray(theta, dtype=float)
    p = theta.size
    g = rows_fn(theta)
    n = g.shape[0]
    V = g.T @ g / n
    cond = np.linalg.cond(V)
    if not np.isfinite(cond) or cond > cond_limit:
        raise SingularMomentCovarianceError(f"moment covariance is singular (condition number {cond:.3g})")
    h0 = np.finfo(float).eps ** (1.0 / 3.0)
    D = np.empty((g.shape[1], p))
    for k in range(p):
        h = max(abs(theta[k]), 1.0) * h0
        e = np.zeros(p)
        e[k] = h
        D[:, k] = (rows_fn(theta + e).mean(axis=0) - rows_fn(theta - e).mean(axis=0)) / (2 * h)
    info = D.T @ np.linalg.solve(V, D)
    cov = np.linalg.inv(info)
    return 0.5 * (cov + cov.T)


def sandwich_from_moments(moments: AffineMoments, theta) -> np.ndarray:
    """Sandwich covariance with linearly redundant moment components removed first."""
    return sandwich_from_rows(moments.independent().rows, theta)


def sandwich_covariance(model: MomentModel, data: LongitudinalDataset, theta_hat) -> np.ndarray:
    """Asymptotic covariance ``Sigma`` of ``sqrt(n) (theta_hat - theta_0)``; divide by ``n`` for standard errors."""
    return sandwich_from_moments(model.affine_parts(data), theta_hat)
