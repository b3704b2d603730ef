"""Estimating-equation models for longitudinal data.

Every builder here produces moments of the form

    g(z_i, beta) = [ D_i^T W_i^(k) (y_i - mu_i(beta)) ]_{k=1..s0}

stacked over a list of m_i x m_i weight matrices ``W^(k)``: an inverse working
covariance for GEE, candidate covariance bases for type I covariates, the
lower-triangular selectors ``e_s e_j^T`` (s >= j) for type II and a diagonal
matrix for type III. With a linear mean the moments are affine in beta, and
:meth:`MomentModel.affine_parts` exposes that structure to the solvers.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import qr

from .data import LongitudinalDataset, Subject

WORKING_KINDS = ("independence", "exchangeable", "ar1")
LABELS = ("GEE", "TypeI", "TypeII", "TypeIII")


class BoundaryWarning(UserWarning):
    """A working-correlation estimate fell on or outside its admissible range."""


@dataclass(frozen=True)
class MeanSpec:
    """Mean model ``mu_ij = x_ij^T beta``.

    Only the linear kind is implemented; ``D_i = X_i`` does not depend on beta.
    """

    p: int
    kind: str = "linear"

    def __post_init__(self):
        if self.kind != "linear":
            raise NotImplementedError(f"mean kind {self.kind!r} is not supported")
        if self.p < 1:
            raise ValueError("mean model needs at least one parameter")

    def mean(self, X: np.ndarray, beta: np.ndarray) -> np.ndarray:
        return X @ beta

    def derivative(self, X: np.ndarray, beta: np.ndarray | None = None) -> np.ndarray:
        return X


@dataclass(frozen=True)
class AffineMoments:
    """Moments written as ``g_i(theta) = offset[i] - slope[i] @ theta``.

    ``offset`` is (n, r) and ``slope`` is (n, r, p).
    """

    offset: np.ndarray
    slope: np.ndarray

    @property
    def n(self) -> int:
        return self.offset.shape[0]

    @property
    def r(self) -> int:
        return self.offset.shape[1]

    @property
    def p(self) -> int:
        return self.slope.shape[2]

    def rows(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        return self.offset - self.slope @ theta

    def scaled(self, factor: float) -> "AffineMoments":
        return AffineMoments(self.offset * factor, self.slope * factor)

    def __add__(self, other: "AffineMoments") -> "AffineMoments":
        return AffineMoments(self.offset + other.offset, self.slope + other.slope)

    def independent(self) -> "AffineMoments":
        """The same moment conditions with linearly redundant components dropped."""
        off, slope = reduce_moments(self.offset, self.slope)
        return AffineMoments(off, slope)


def independent_components(offset, slope, rtol: float = 1e-10) -> np.ndarray:
    """Indices of moment components that are not linear combinations of the others.

    A combination ``c`` of components vanishes for every theta and every row
    exactly when ``c`` annihilates all offsets and all slope columns, so the
    rank is read off a pivoted QR of those stacked vectors. Leading batch axes
    are pooled. The retained indices keep their original order.
    """
    offset = np.asarray(offset, dtype=float)
    slope = np.asarray(slope, dtype=float)
    r = offset.shape[-1]
    Z = np.concatenate([offset.reshape(-1, r), np.swapaxes(slope, -1, -2).reshape(-1, r)])
    if r == 1:
        return np.arange(1) if np.any(Z) else np.arange(0)
    R, piv = qr(Z, mode="r", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int(np.count_nonzero(d > rtol * d[0])) if d.size and d[0] > 0 else 0
    return np.sort(piv[:rank])


def reduce_moments(offset, slope, rtol: float = 1e-10):
    """Offsets and slopes restricted to :func:`independent_components`."""
    keep = independent_components(offset, slope, rtol)
    if keep.size == np.shape(offset)[-1]:
        return offset, slope
    return offset[..., keep], slope[..., keep, :]


def affine_from_weights(y, X, W) -> tuple[np.ndarray, np.ndarray]:
    """Offset and slope of the stacked moments for padded arrays.

    Parameters
    ----------
    y : (..., n, M)
    X : (..., n, M, q)
    W : (..., n, s0, M, M) or (s0, M, M)
        Weight matrices, zero outside each subject's valid block.

    Returns
    -------
    offset : (..., n, s0 * q)
    slope : (..., n, s0 * q, q)
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    W = np.asarray(W, dtype=float)
    WX = np.einsum("...kab,...bp->...kap", W, X)
    Wy = np.einsum("...kab,...b->...ka", W, y)
    offset = np.einsum("...aq,...ka->...kq", X, Wy)
    slope = np.einsum("...aq,...kap->...kqp", X, WX)
    lead = offset.shape[:-2]
    s0, q = offset.shape[-2:]
    # with covariates shared across a batch of responses the slope lacks the batch axes
    slope = np.broadcast_to(slope, lead + slope.shape[-3:])
    return offset.reshape(lead + (s0 * q,)), slope.reshape(lead + (s0 * q, q))


class MomentModel:
    """A moment-condition specification ``g(z_i, theta)`` of dimension ``r`` over ``p`` parameters.

    ``weights`` is either a callable ``m -> (s0, m, m)`` shared by all subjects with
    ``m`` time points, or a sequence of per-subject ``(s0, m_i, m_i)`` arrays.
    """

    def __init__(self, label: str, mean_spec: MeanSpec, s0: int, weights):
        if label not in LABELS:
            raise ValueError(f"unknown model label {label!r}")
        self.label = label
        self.mean_spec = mean_spec
        self.s0 = int(s0)
        self._weights = weights
        self.per_subject = not callable(weights)

    @property
    def p(self) -> int:
        return self.mean_spec.p

    @property
    def r(self) -> int:
        return self.s0 * self.mean_spec.p

    def __repr__(self) -> str:
        return f"MomentModel(label={self.label!r}, r={self.r}, p={self.p})"

    def subject_weights(self, m: int, index: int | None = None) -> np.ndarray:
        if self.per_subject:
            if index is None:
                raise ValueError("this model carries per-subject weights; pass the subject index")
            W = np.asarray(self._weights[index], dtype=float)
        else:
            W = np.asarray(self._weights(m), dtype=float)
        if W.ndim == 2:
            W = W[None]
        if W.shape != (self.s0, m, m):
            raise ValueError(f"weight stack has shape {W.shape}, expected {(self.s0, m, m)}")
        return W

    def evaluate(self, subject: Subject, theta, index: int | None = None) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.p,):
            raise ValueError(f"theta has shape {theta.shape}, expected ({self.p},)")
        if subject.X.shape[1] != self.p:
            raise ValueError(f"subject has {subject.X.shape[1]} covariates, model expects {self.p}")
        W = self.subject_weights(subject.m, index)
        resid = subject.y - self.mean_spec.mean(subject.X, theta)
        D = self.mean_spec.derivative(subject.X, theta)
        return np.einsum("aq,kab,b->kq", D, W, resid).reshape(-1)

    def weight_stack(self, data: LongitudinalDataset) -> np.ndarray:
        """Padded weights, shape (n, s0, M, M), or (s0, M, M) when every subject shares them."""
        M = data.max_m
        if not self.per_subject and data.balanced:
            return self.subject_weights(M)
        if self.per_subject and len(self._weights) != data.n:
            raise ValueError(f"model has weights for {len(self._weights)} subjects, data has {data.n}")
        out = np.zeros((data.n, self.s0, M, M))
        cache: dict[int, np.ndarray] = {}
        for i, m in enumerate(data.sizes):
            if self.per_subject:
                out[i, :, :m, :m] = self.subject_weights(m, i)
            else:
                if m not in cache:
                    cache[m] = self.subject_weights(m)
                out[i, :, :m, :m] = cache[m]
        return out

    def affine_parts(self, data: LongitudinalDataset) -> AffineMoments:
        if data.q != self.p:
            raise ValueError(f"data has q={data.q} covariates, model expects p={self.p}")
        offset, slope = affine_from_weights(data.y, data.X, self.weight_stack(data))
        return AffineMoments(offset, slope)

    def evaluate_all(self, data: LongitudinalDataset, theta) -> np.ndarray:
        """Moment rows for every subject, shape (n, r)."""
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.p,):
            raise ValueError(f"theta has shape {theta.shape}, expected ({self.p},)")
        return self.affine_parts(data).rows(theta)


# ---------------------------------------------------------------------------
# working correlations


def _check_alpha(kind: str, alpha: float, m: int) -> None:
    if kind == "independence" or m <= 1:
        return
    lower = -1.0 / (m - 1) if kind == "exchangeable" else -1.0
    if not (lower < alpha < 1.0):
        raise ValueError(f"alpha={alpha} outside the admissible range ({lower:.4g}, 1) for {kind}, m={m}")


def working_correlation(kind: str, alpha: float, m: int) -> np.ndarray:
    """Working correlation matrix of size ``m``.

    >>> working_correlation("ar1", 0.5, 3)[0]
    array([1.  , 0.5 , 0.25])
    """
    if kind not in WORKING_KINDS:
        raise ValueError(f"unknown working correlation {kind!r}")
    if m < 1:
        raise ValueError("m must be at least 1")
    _check_alpha(kind, alpha, m)
    if kind == "independence":
        return np.eye(m)
    if kind == "exchangeable":
        R = np.full((m, m), float(alpha))
        np.fill_diagonal(R, 1.0)
        return R
    lags = np.abs(np.subtract.outer(np.arange(m), np.arange(m)))
    return float(alpha) ** lags


def gee_independence_fit(y, X, mask):
    """Ordinary least squares over all observations, batched over leading axes.

    Returns ``beta`` (..., q) and residuals (..., n, M) that are zero on padding.
    """
    XtX = np.einsum("...nmq,...nmp->...qp", X, X)
    Xty = np.einsum("...nmq,...nm->...q", X, y)
    beta = np.linalg.solve(XtX, Xty[..., None])[..., 0]
    resid = (y - np.einsum("...nmq,...q->...nm", X, beta)) * mask
    return beta, resid


def correlation_from_residuals(resid, mask, kind: str, p: int):
    """Moment estimates of the scale and working-correlation parameter from residuals.

    Returns ``(phi, alpha)`` batched over leading axes of ``resid`` (..., n, M).
    """
    if kind not in WORKING_KINDS:
        raise ValueError(f"unknown working correlation {kind!r}")
    mask = np.asarray(mask, dtype=float)
    nobs = mask.sum(axis=(-2, -1))
    phi = (resid**2).sum(axis=(-2, -1)) / np.maximum(nobs - p, 1.0)
    if kind == "independence":
        return phi, np.zeros_like(phi)
    if kind == "exchangeable":
        tot = resid.sum(axis=-1)
        sq = (resid**2).sum(axis=-1)
        pair_sum = (0.5 * (tot**2 - sq)).sum(axis=-1)
        k = mask.sum(axis=-1)
        npairs = (0.5 * k * (k - 1)).sum(axis=-1)
    else:
        pair_sum = (resid[..., 1:] * resid[..., :-1]).sum(axis=(-2, -1))
        npairs = (mask[..., 1:] * mask[..., :-1]).sum(axis=(-2, -1))
    if np.any(npairs == 0):
        raise ValueError("working correlation undefined: no subject has two or more time points")
    with np.errstate(invalid="ignore", divide="ignore"):
        alpha = (pair_sum / npairs) / phi
    return phi, alpha


def estimate_correlation(data: LongitudinalDataset, mean_spec: MeanSpec, kind: str) -> float:
    """Working-correlation parameter from Pearson residuals of a GEE-independence fit.

    ``ar1`` uses the lag-one product moment and ``exchangeable`` the mean
    within-subject pairwise product, both divided by the residual scale. A
    :class:`BoundaryWarning` is issued when the estimate is not strictly inside
    the admissible range; the value itself is returned unclipped.
    """
    if data.q != mean_spec.p:
        raise ValueError("data and mean specification disagree on the number of covariates")
    _, resid = gee_independence_fit(data.y, data.X, data.mask)
    _, alpha = correlation_from_residuals(resid, data.mask, kind, mean_spec.p)
    alpha = float(alpha)
    if kind != "independence":
        m = data.max_m
        lower = -1.0 / (m - 1) if kind == "exchangeable" and m > 1 else -1.0
        if not (lower < alpha < 1.0) or not np.isfinite(alpha):
            warnings.warn(f"{kind} correlation estimate {alpha:.6g} is on or outside the boundary", BoundaryWarning)
    return alpha


def clip_alpha(kind: str, alpha, m: int, margin: float = 1e-6):
    if kind == "independence":
        return np.zeros_like(np.asarray(alpha, dtype=float))
    lower = -1.0 / (m - 1) if kind == "exchangeable" and m > 1 else -1.0
    return np.clip(np.nan_to_num(np.asarray(alpha, dtype=float)), lower + margin, 1.0 - margin)


@dataclass(frozen=True)
class WorkingCorrelation:
    """Working correlation structure; ``alpha=None`` means estimate it from the data."""

    kind: str = "independence"
    alpha: float | None = None

    def __post_init__(self):
        if self.kind not in WORKING_KINDS:
            raise ValueError(f"unknown working correlation {self.kind!r}")

    def matrix(self, m: int) -> np.ndarray:
        return working_correlation(self.kind, 0.0 if self.alpha is None else self.alpha, m)


# ---------------------------------------------------------------------------
# builders


def gee_moments(mean_spec: MeanSpec, inverse_working_cov) -> MomentModel:
    """GEE moments ``D_i^T V_i^{-1} (y_i - mu_i)``; ``r = p``.

    ``inverse_working_cov`` is a callable ``m -> (m, m)`` or a sequence of
    per-subject matrices.
    """
    if callable(inverse_working_cov):
        fn = inverse_working_cov
        return MomentModel("GEE", mean_spec, 1, lambda m: np.asarray(fn(m), dtype=float)[None])
    mats = []
    for i, V in enumerate(inverse_working_cov):
        V = np.asarray(V, dtype=float)
        if V.ndim != 2 or V.shape[0] != V.shape[1]:
            raise ValueError(f"subject {i}: inverse working covariance must be square, got {V.shape}")
        mats.append(V[None])
    return MomentModel("GEE", mean_spec, 1, mats)


def gee_model(data: LongitudinalDataset, mean_spec: MeanSpec, kind: str = "exchangeable",
              alpha: float | None = None) -> MomentModel:
    """GEE moments with a plug-in working covariance ``phi * R(alpha)``.

    ``phi`` (and ``alpha`` unless given) come from Pearson residuals of a
    GEE-independence fit and are then held fixed.
    """
    if isinstance(kind, WorkingCorrelation):
        kind, alpha = kind.kind, kind.alpha if alpha is None else alpha
    _, resid = gee_independence_fit(data.y, data.X, data.mask)
    phi, alpha_hat = correlation_from_residuals(resid, data.mask, kind, mean_spec.p)
    phi = float(phi)
    if alpha is None:
        alpha = float(clip_alpha(kind, alpha_hat, data.max_m))
    else:
        _check_alpha(kind, alpha, data.max_m)

    def inv_cov(m: int) -> np.ndarray:
        return np.linalg.inv(phi * working_correlation(kind, alpha if m > 1 else 0.0, m))

    model = gee_moments(mean_spec, inv_cov)
    model.working = (kind, alpha, phi)
    return model


def elementary_basis(m: int, lower: bool = False) -> list[np.ndarray]:
    """Selector matrices ``e_s e_j^T``.

    With ``lower=True`` only ``s >= j`` is kept, ordered by ``j`` then ``s``;
    otherwise all ``m * m`` pairs in the same ordering.
    """
    mats = []
    for j in range(m):
        for s in range(j if lower else 0, m):
            E = np.zeros((m, m))
            E[s, j] = 1.0
            mats.append(E)
    return mats


def type1_moments(mean_spec: MeanSpec, basis: Sequence) -> MomentModel:
    """Stacked ``D_i^T M^(k) (y_i - mu_i)`` over a basis of working matrices; ``r = s0 * q``.

    Each basis element is an ``(m, m)`` array or a callable ``m -> (m, m)``.
    """
    basis = list(basis)
    if not basis:
        raise ValueError("type I moments need a non-empty basis")

    def weights(m: int) -> np.ndarray:
        mats = []
        for M in basis:
            M = np.asarray(M(m) if callable(M) else M, dtype=float)
            if M.shape != (m, m):
                raise ValueError(f"basis matrix has shape {M.shape}, subject has m={m}")
            mats.append(M)
        return np.stack(mats)

    return MomentModel("TypeI", mean_spec, len(basis), weights)


def full_type1_moments(mean_spec: MeanSpec, m: int) -> MomentModel:
    """Type I moments using every product ``d_beta mu_is * (y_ij - mu_ij)``, s and j unrestricted."""
    return type1_moments(mean_spec, elementary_basis(m, lower=False))


def type2_moments(mean_spec: MeanSpec, m: int) -> MomentModel:
    """Type II moments from ``L^(b) = e_s e_j^T`` for ``s >= j``; ``r = q m (m + 1) / 2``.

    Only balanced designs with ``m`` time points per subject are accepted.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    stack = np.stack(elementary_basis(m, lower=True))

    def weights(k: int) -> np.ndarray:
        if k != m:
            raise ValueError(f"type II moments need balanced data with m={m}; got a subject with {k} time points")
        return stack

    return MomentModel("TypeII", mean_spec, stack.shape[0], weights)


def type3_moments(mean_spec: MeanSpec, diag_variances=None) -> MomentModel:
    """``D_i^T V_i^{-1} (y_i - mu_i)`` with diagonal ``V_i`` (identity by default)."""
    if diag_variances is None:
        return MomentModel("TypeIII", mean_spec, 1, lambda m: np.eye(m)[None])
    var = np.asarray(diag_variances, dtype=float).reshape(-1)
    if np.any(~(var > 0)):
        raise ValueError("diagonal variances must be strictly positive")

    def weights(m: int) -> np.ndarray:
        if m > var.size:
            raise ValueError(f"{var.size} variances given for a subject with {m} time points")
        return np.diag(1.0 / var[:m])[None]

    return MomentModel("TypeIII", mean_spec, 1, weights)


def covariate_type_test(data: LongitudinalDataset, mean_spec: MeanSpec, test: str, adjusted: bool = True):
    """Goodness-of-fit test of the larger estimating-equation set in the III -> II -> I sequence.

    ``"II_vs_III"`` fits the type II equations, ``"I_vs_II"`` the full type I
    product set. Non-rejection licenses the next step up.
    """
    from .el import goodness_of_fit

    if not data.balanced:
        raise ValueError("the covariate-type tests need a balanced design")
    m = data.max_m
    if test == "II_vs_III":
        model = type2_moments(mean_spec, m)
    elif test == "I_vs_II":
        model = full_type1_moments(mean_spec, m)
    else:
        raise ValueError(f"unknown covariate-type test {test!r}")
    return goodness_of_fit(model, data, adjusted=adjusted)


__all__ = [
    "AffineMoments",
    "BoundaryWarning",
    "MeanSpec",
    "MomentModel",
    "affine_from_weights",
    "clip_alpha",
    "correlation_from_residuals",
    "covariate_type_test",
    "elementary_basis",
    "estimate_correlation",
    "full_type1_moments",
    "independent_components",
    "reduce_moments",
    "gee_independence_fit",
    "gee_model",
    "gee_moments",
    "type1_moments",
    "type2_moments",
    "type3_moments",
    "working_correlation",
    "WorkingCorrelation",
]
