"""Two-stage spatially adaptive AETEL over voxel lattices.

Stage 1 fits every voxel on its own. Stage 2 borrows strength from the
neighbors of each voxel: the moment rows of neighbor ``d'`` enter the
equations of voxel ``d`` with weight ``exp(-LR(d'; d) / C_n)``, where
``LR(d'; d)`` measures how implausible the neighbor's stage-1 estimate is
under the criterion of voxel ``d``. The pooled equations are then run through
the same adjusted machinery as a single voxel.

All per-voxel arrays are indexed by the flat (C-order) voxel index.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _engine
from ._parallel import chunks, ordered_map
from .chi2 import chi2_quantile, chi2_sf
from .data import LongitudinalDataset
from .el import LinearHypothesis, MomentMatrix, moment_matrix_from_rows
from .fdr import fdr_adjust
from .moments import (
    AffineMoments,
    MeanSpec,
    MomentModel,
    affine_from_weights,
    clip_alpha,
    correlation_from_residuals,
    full_type1_moments,
    gee_independence_fit,
    gee_model,
    reduce_moments,
    type2_moments,
    type3_moments,
    working_correlation,
)
from .wald import sandwich_batch

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# lattice


@dataclass(frozen=True)
class Lattice:
    """A 2-D or 3-D grid of voxels; neighbors are cells within L1 distance ``radius``."""

    dims: tuple[int, ...]
    radius: int = 1

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) not in (2, 3) or any(d < 1 for d in dims):
            raise ValueError(f"lattice dims must be 2 or 3 positive integers, got {self.dims}")
        if self.radius < 1:
            raise ValueError("neighborhood radius must be at least 1")
        object.__setattr__(self, "dims", dims)

    @property
    def size(self) -> int:
        return math.prod(self.dims)

    def contains(self, coord) -> bool:
        return len(coord) == len(self.dims) and all(0 <= c < d for c, d in zip(coord, self.dims))

    def index(self, coord) -> int:
        if not self.contains(coord):
            raise IndexError(f"voxel {tuple(coord)} is outside the lattice {self.dims}")
        return int(np.ravel_multi_index(tuple(int(c) for c in coord), self.dims))

    def coord(self, index: int) -> tuple[int, ...]:
        if not 0 <= index < self.size:
            raise IndexError(f"voxel index {index} is outside the lattice of size {self.size}")
        return tuple(int(c) for c in np.unravel_index(index, self.dims))

    def coords(self) -> np.ndarray:
        """All voxel coordinates in flat-index order, shape (V, ndim)."""
        return np.stack(np.unravel_index(np.arange(self.size), self.dims), axis=1)

    def _offsets(self) -> list[tuple[int, ...]]:
        rng = range(-self.radius, self.radius + 1)
        offs = [o for o in itertools.product(rng, repeat=len(self.dims)) if 0 < sum(map(abs, o)) <= self.radius]
        return sorted(offs, key=lambda o: (sum(map(abs, o)), o))

    def neighbor_table(self) -> np.ndarray:
        """Flat neighbor indices, shape (V, K), padded with -1 where truncated by the boundary."""
        coords = self.coords()
        offs = np.array(self._offsets(), dtype=int)
        cand = coords[:, None, :] + offs[None, :, :]
        inside = np.all((cand >= 0) & (cand < np.array(self.dims)), axis=2)
        flat = np.ravel_multi_index(tuple(np.clip(cand, 0, np.array(self.dims) - 1).transpose(2, 0, 1)), self.dims)
        return np.where(inside, flat, -1)


def neighborhood(lattice: Lattice, d) -> list[tuple[int, ...]]:
    """Neighbors of voxel ``d`` (a coordinate tuple), truncated at the boundary and excluding ``d``."""
    idx = lattice.index(d)
    row = lattice.neighbor_table()[idx]
    return [lattice.coord(int(j)) for j in row if j >= 0]


# ---------------------------------------------------------------------------
# fields


@dataclass(frozen=True)
class ModelRecipe:
    """How to turn one voxel's data into estimating equations.

    ``kind`` is ``"gee"`` (with working correlation ``working``, its parameter
    and scale estimated per voxel), ``"type1"``, ``"type2"`` or ``"type3"``.
    """

    p: int
    kind: str = "gee"
    working: str = "exchangeable"

    def build(self, data: LongitudinalDataset) -> MomentModel:
        spec = MeanSpec(self.p)
        if self.kind == "gee":
            return gee_model(data, spec, self.working)
        if self.kind == "type1":
            return full_type1_moments(spec, data.max_m)
        if self.kind == "type2":
            return type2_moments(spec, data.max_m)
        if self.kind == "type3":
            return type3_moments(spec)
        raise ValueError(f"unknown model kind {self.kind!r}")

    def affine_batch(self, y: np.ndarray, X: np.ndarray, sizes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Offsets (V, n, r) and slopes (V, n, r, p) for responses ``y`` (V, n, M).

        ``X`` is (n, M, q) when shared by every voxel, else (V, n, M, q).
        """
        V, n, M = y.shape
        mask = np.arange(M)[None, :] < sizes[:, None]
        if self.kind != "gee":
            data = LongitudinalDataset(np.zeros((n, M)), X if X.ndim == 3 else X[0], np.arange(1, M + 1), sizes)
            W = self.build(data).weight_stack(data)
            return reduce_moments(*affine_from_weights(y, X, W))
        _, resid = gee_independence_fit(y, X, mask)
        phi, alpha = correlation_from_residuals(resid, mask, self.working, self.p)
        alpha = clip_alpha(self.working, alpha, M)
        W = np.zeros((V, n, 1, M, M))
        for m in np.unique(sizes):
            rows = sizes == m
            R = np.stack([working_correlation(self.working, a if m > 1 else 0.0, m) for a in alpha])
            W[:, rows, 0, :m, :m] = np.linalg.inv(phi[:, None, None] * R)[:, None]
        return affine_from_weights(y, X, W)


class VoxelField:
    """Longitudinal data at every voxel of a lattice, sharing subjects and their order.

    Parameters
    ----------
    lattice : Lattice
    y : (V, n, M) responses, zero-padded past each subject's size
    X : (n, M, q) covariates shared by all voxels, or (V, n, M, q)
    t : (n, M) or (M,) observation times shared by all voxels
    sizes : (n,) number of time points per subject
    recipe : ModelRecipe producing the per-voxel equations
    """

    def __init__(self, lattice: Lattice, y, X, t, sizes=None, recipe: ModelRecipe | None = None):
        y = np.asarray(y, dtype=float)
        X = np.asarray(X, dtype=float)
        if y.ndim != 3 or y.shape[0] != lattice.size:
            raise ValueError(f"responses must be (V={lattice.size}, n, M); got {y.shape}")
        V, n, M = y.shape
        if X.shape[:-1] not in ((n, M), (V, n, M)):
            raise ValueError(f"covariates have shape {X.shape}; subjects are not aligned with the responses")
        self.lattice = lattice
        # validates times, sizes and finiteness once, on the first voxel
        first = LongitudinalDataset(y[0], X if X.ndim == 3 else X[0], t, sizes)
        self.t = first.t
        self.sizes = first.sizes
        mask = first.mask
        if not np.all(np.isfinite(y[:, mask])):
            raise ValueError("non-finite responses in the field")
        self.y = np.where(mask, y, 0.0)
        self.X = np.where(mask[..., None], X, 0.0)
        self.recipe = recipe if recipe is not None else ModelRecipe(self.q)
        if self.recipe.p != self.q:
            raise ValueError(f"recipe expects p={self.recipe.p}, data have q={self.q}")
        for arr in (self.y, self.X):
            arr.flags.writeable = False

    @property
    def n(self) -> int:
        return self.y.shape[1]

    @property
    def q(self) -> int:
        return self.X.shape[-1]

    @property
    def p(self) -> int:
        return self.recipe.p

    @property
    def shared_covariates(self) -> bool:
        return self.X.ndim == 3

    def covariates(self, v: int) -> np.ndarray:
        return self.X if self.shared_covariates else self.X[v]

    def dataset(self, v: int) -> LongitudinalDataset:
        return LongitudinalDataset(self.y[v], self.covariates(v), self.t, self.sizes)

    def model(self, v: int) -> MomentModel:
        return self.recipe.build(self.dataset(v))

    def with_recipe(self, recipe: ModelRecipe) -> "VoxelField":
        return VoxelField(self.lattice, self.y, self.X, self.t, self.sizes, recipe)

    def affine_parts(self, voxels=None) -> tuple[np.ndarray, np.ndarray]:
        """Unadjusted offsets (B, n, r) and slopes (B, n, r, p) for the selected voxels."""
        idx = np.arange(self.lattice.size) if voxels is None else np.asarray(voxels, dtype=int)
        X = self.X if self.shared_covariates else self.X[idx]
        return self.recipe.affine_batch(self.y[idx], X, self.sizes)


# ---------------------------------------------------------------------------
# results


@dataclass
class StageOneResult:
    """Per-voxel stage-1 fits.

    ``theta`` (V, p) are the unconstrained estimates, ``objective`` their
    criterion values, ``lr`` and ``p_value`` the tests of the field
    hypothesis and ``ok`` flags voxels whose fits all converged.
    """

    theta: np.ndarray
    objective: np.ndarray
    null_theta: np.ndarray
    null_objective: np.ndarray
    lr: np.ndarray
    p_value: np.ndarray
    ok: np.ndarray
    df: int
    adjusted: bool = True

    @property
    def failures(self) -> int:
        return int(np.count_nonzero(~self.ok))


@dataclass
class TetelResult:
    """Per-voxel stage-2 estimates, statistics and p-values.

    ``weights`` (V, K) holds the neighbor weights in neighbor-table order
    (NaN where the neighborhood is truncated); the weight of a voxel on itself
    is always 1 and not stored.
    """

    theta: np.ndarray
    lr: np.ndarray
    p_value: np.ndarray
    p_adjusted: np.ndarray
    ok: np.ndarray
    weights: np.ndarray
    df: int
    fdr_method: str = "BY"
    covariance: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def failures(self) -> int:
        return int(np.count_nonzero(~self.ok))

    def weight_summary(self) -> np.ndarray:
        """Minimum, mean and maximum neighbor weight per voxel, shape (V, 3); NaN without neighbors."""
        w = self.weights
        out = np.full((w.shape[0], 3), np.nan)
        has = np.any(np.isfinite(w), axis=1)
        if np.any(has):
            ww = w[has]
            out[has, 0] = np.nanmin(ww, axis=1)
            out[has, 1] = np.nanmean(ww, axis=1)
            out[has, 2] = np.nanmax(ww, axis=1)
        return out


# ---------------------------------------------------------------------------
# stage 1


def _system(off, slope, adjusted):
    return _engine.with_adjustment(off, slope) if adjusted else (off, slope)


def _stage_one_chunk(args):
    field_, idx, R, b0, adjusted = args
    off, slope = field_.affine_parts(idx)
    off, slope = _system(off, slope, adjusted)
    res = _engine.lr_batch(off, slope, R, b0)
    return res.free.theta, res.free.objective, res.null.theta, res.null.objective, res.statistic, res.ok


def stage_one(field_: VoxelField, hypothesis: LinearHypothesis, adjusted: bool = True,
              threads: int | None = 1, chunk_size: int = 256) -> StageOneResult:
    """Free and constrained fits plus the likelihood-ratio test at every voxel.

    Failed voxels are flagged in ``ok``; their statistics are NaN.
    """
    if hypothesis.p != field_.p:
        raise ValueError(f"hypothesis has {hypothesis.p} columns, field model has p={field_.p}")
    jobs = [(field_, np.array(c), hypothesis.R, hypothesis.b0, adjusted)
            for c in chunks(field_.lattice.size, chunk_size)]
    parts = ordered_map(_stage_one_chunk, jobs, threads)
    theta, obj, ntheta, nobj, lr, ok = (np.concatenate(a) for a in zip(*parts))
    lr = np.where(ok, lr, np.nan)
    pval = np.where(ok, chi2_sf(np.nan_to_num(lr), hypothesis.c0), np.nan)
    if not np.all(ok):
        log.warning("stage 1: %d of %d voxel fits failed", np.count_nonzero(~ok), ok.size)
    return StageOneResult(theta, obj, ntheta, nobj, lr, pval, ok, hypothesis.c0, adjusted)


# ---------------------------------------------------------------------------
# similarity and weights


def _n_rows(n: int, adjusted: bool) -> int:
    return n + 1 if adjusted else n


def cross_lr_table(field_: VoxelField, stage1: StageOneResult, nbr: np.ndarray | None = None) -> np.ndarray:
    """``LR(d'; d)`` for every voxel ``d`` and each neighbor ``d'``, shape (V, K); NaN where undefined.

    ``LR(d'; d) = 2 N [l(theta_hat(d'); d) - min_theta l(theta; d)]``, clamped at 0.
    """
    nbr = field_.lattice.neighbor_table() if nbr is None else nbr
    V, K = nbr.shape
    out = np.full((V, K), np.nan)
    if K == 0:
        return out
    off, slope = _system(*field_.affine_parts(), stage1.adjusted)
    N = off.shape[1]
    dd, kk = np.nonzero((nbr >= 0) & stage1.ok[:, None] & stage1.ok[np.maximum(nbr, 0)])
    for c in chunks(dd.size, 2048):
        d, k = dd[c], kk[c]
        theta = stage1.theta[nbr[d, k]]
        rows = _engine.rows_at(off[d], slope[d], theta)
        dual = _engine.solve_dual_batch(rows)
        val = 2.0 * N * (dual.objective - stage1.objective[d])
        out[d, k] = np.where(np.isfinite(val), np.maximum(val, 0.0), np.nan)
    return out


def cross_lr(field_: VoxelField, stage1: StageOneResult, d_prime, d) -> float:
    """Similarity statistic of neighbor ``d_prime`` as seen from voxel ``d`` (coordinate tuples)."""
    lat = field_.lattice
    i, j = lat.index(d), lat.index(d_prime)
    if not (stage1.ok[i] and stage1.ok[j]):
        raise ArithmeticError(f"stage-1 fit failed at {d if not stage1.ok[i] else d_prime}")
    if i == j:
        return 0.0
    off, slope = _system(*field_.affine_parts([i]), stage1.adjusted)
    dual = _engine.solve_dual_batch(_engine.rows_at(off, slope, stage1.theta[[j]]))
    if not dual.converged[0]:
        raise ArithmeticError("dual did not converge at the neighbor estimate")
    return max(0.0, 2.0 * off.shape[1] * float(dual.objective[0] - stage1.objective[i]))


def bandwidth(p: int, n: int, alpha: float = 0.05) -> float:
    """``C_n = chi2_{1 - alpha}(p) log(n) / 5``."""
    if n < 2:
        raise ValueError("the weight bandwidth needs n >= 2")
    return chi2_quantile(1.0 - alpha, p) * math.log(n) / 5.0


def weights_from_lr(lr: np.ndarray, p: int, n: int, alpha: float = 0.05) -> np.ndarray:
    """``exp(-LR / C_n)``; undefined similarities (NaN) get weight 0."""
    cn = bandwidth(p, n, alpha)
    lr = np.asarray(lr, dtype=float)
    return np.where(np.isnan(lr), 0.0, np.exp(-np.maximum(np.nan_to_num(lr), 0.0) / cn))


def adaptive_weights(field_: VoxelField, stage1: StageOneResult, d, alpha: float = 0.05,
                     n: int | None = None) -> dict:
    """Weights ``{d': omega(d'; d)}`` over the neighbors of ``d`` and ``d`` itself."""
    n = field_.n if n is None else n
    cn = bandwidth(field_.p, n, alpha)
    out = {tuple(d): 1.0}
    for dp in neighborhood(field_.lattice, d):
        try:
            lr = cross_lr(field_, stage1, dp, d)
        except ArithmeticError as exc:
            log.warning("weight of %s for voxel %s set to 0: %s", dp, tuple(d), exc)
            out[dp] = 0.0
            continue
        out[dp] = math.exp(-lr / cn)
    return out


# ---------------------------------------------------------------------------
# stage 2


def _combine(off: np.ndarray, slope: np.ndarray, nbr: np.ndarray, w: np.ndarray, idx: np.ndarray):
    """Pooled offsets/slopes for voxels ``idx``: own rows plus weighted neighbor rows."""
    o = off[idx].copy()
    s = slope[idx].copy()
    for k in range(nbr.shape[1]):
        j = nbr[idx, k]
        wk = w[idx, k]
        use = (j >= 0) & (wk > 0)
        if np.any(use):
            o[use] += wk[use, None, None] * off[j[use]]
            s[use] += wk[use, None, None, None] * slope[j[use]]
    return o, s


def combined_moments(field_: VoxelField, d, weights: dict, theta) -> MomentMatrix:
    """Pooled rows ``sum_{d'} omega(d'; d) g(z_i(d'), theta)`` for voxel ``d``, without the adjustment row."""
    lat = field_.lattice
    theta = np.asarray(theta, dtype=float)
    allowed = {tuple(d)} | set(neighborhood(lat, d))
    total = None
    for dp, w in weights.items():
        if tuple(dp) not in allowed:
            raise ValueError(f"voxel {tuple(dp)} is not in the neighborhood of {tuple(d)}")
        off, slope = field_.affine_parts([lat.index(dp)])
        rows = AffineMoments(off[0], slope[0]).rows(theta) * w
        total = rows if total is None else total + rows
    return moment_matrix_from_rows(total, adjusted=False)


def _stage_two_chunk(args):
    off, slope, theta0, R, b0, adjusted = args
    off, slope = _system(off, slope, adjusted)
    res = _engine.lr_batch(off, slope, R, b0, theta0=theta0)
    return res.free.theta, res.statistic, res.ok


def stage_two(field_: VoxelField, stage1: StageOneResult, hypothesis: LinearHypothesis,
              alpha: float = 0.05, fdr: str = "BY", threads: int | None = 1,
              chunk_size: int = 256, covariance: bool = True) -> TetelResult:
    """Adaptive-weight pooled fits and tests at every voxel.

    Each voxel's free fit starts from its stage-1 estimate. Voxels with no
    neighbors reuse their stage-1 results unchanged. FDR adjustment runs over
    the voxels whose tests succeeded.
    """
    lat = field_.lattice
    nbr = lat.neighbor_table()
    lr_nb = cross_lr_table(field_, stage1, nbr)
    w = weights_from_lr(lr_nb, field_.p, field_.n, alpha)
    w = np.where(nbr >= 0, w, np.nan)
    if np.any((nbr >= 0) & np.isnan(lr_nb)):
        log.warning("stage 2: %d neighbor weights set to 0 after failed stage-1 fits",
                    np.count_nonzero((nbr >= 0) & np.isnan(lr_nb)))
    off, slope = field_.affine_parts()
    wz = np.nan_to_num(w)
    V = lat.size
    theta = stage1.theta.copy()
    lr = stage1.lr.copy()
    ok = stage1.ok.copy()
    pooled = np.flatnonzero(np.any(nbr >= 0, axis=1))
    jobs = []
    for c in chunks(pooled.size, chunk_size):
        idx = pooled[np.array(c)]
        o, s = _combine(off, slope, nbr, wz, idx)
        jobs.append((o, s, stage1.theta[idx], hypothesis.R, hypothesis.b0, stage1.adjusted))
    parts = ordered_map(_stage_two_chunk, jobs, threads)
    if parts:
        t2, lr2, ok2 = (np.concatenate(a) for a in zip(*parts))
        theta[pooled], lr[pooled], ok[pooled] = t2, lr2, ok2
    lr = np.where(ok, lr, np.nan)
    pval = np.where(ok, chi2_sf(np.nan_to_num(lr), hypothesis.c0), np.nan)
    padj = np.full(V, np.nan)
    if np.any(ok):
        padj[ok] = fdr_adjust(pval[ok], fdr).adjusted
    cov = None
    if covariance:
        cov = np.full((V, field_.p, field_.p), np.nan)
        good = np.flatnonzero(ok)
        for c in chunks(good.size, chunk_size):
            idx = good[np.array(c)]
            o, s = _combine(off, slope, nbr, wz, idx)
            try:
                cov[idx] = sandwich_batch(o, s, theta[idx]) / field_.n
            except np.linalg.LinAlgError:
                log.warning("stage 2: singular moment covariance in a voxel chunk")
    if not np.all(ok):
        log.warning("stage 2: %d of %d voxel fits failed", np.count_nonzero(~ok), V)
    return TetelResult(theta, lr, pval, padj, ok, w, hypothesis.c0, fdr.upper(), cov)


# ---------------------------------------------------------------------------
# smoothing baseline


def heat_kernel_smooth(values, iterations: int, kappa: float = 0.5, wrap: bool = False,
                       ndim: int | None = None) -> np.ndarray:
    """Repeated local averaging ``new = (1 - kappa) old + kappa * mean(face neighbors)``.

    The first ``ndim`` axes of ``values`` (all of them by default) form the
    lattice; trailing axes are carried along. Neighborhoods are truncated at
    the boundary unless ``wrap`` makes the lattice a torus.
    """
    if iterations < 0:
        raise ValueError("iterations must be nonnegative")
    out = np.array(values, dtype=float, copy=True)
    ndim = out.ndim if ndim is None else ndim
    if iterations == 0:
        return out
    count = np.zeros(out.shape[:ndim])
    for ax in range(ndim):
        if wrap:
            count += 2.0
        else:
            c = np.full(out.shape[ax], 2.0)
            c[0] -= 1.0
            c[-1] -= 1.0
            shape = [1] * ndim
            shape[ax] = -1
            count = count + c.reshape(shape)
    count = count.reshape(count.shape + (1,) * (out.ndim - ndim))
    safe = np.where(count > 0, count, 1.0)
    for _ in range(iterations):
        total = np.zeros_like(out)
        for ax in range(ndim):
            if wrap:
                total += np.roll(out, 1, axis=ax) + np.roll(out, -1, axis=ax)
            else:
                lo = [slice(None)] * out.ndim
                hi = [slice(None)] * out.ndim
                lo[ax], hi[ax] = slice(0, -1), slice(1, None)
                total[tuple(hi)] += out[tuple(lo)]
                total[tuple(lo)] += out[tuple(hi)]
        mean = total / safe
        out = np.where(count > 0, (1.0 - kappa) * out + kappa * mean, out)
    return out


__all__ = [
    "Lattice",
    "ModelRecipe",
    "StageOneResult",
    "TetelResult",
    "VoxelField",
    "adaptive_weights",
    "bandwidth",
    "combined_moments",
    "cross_lr",
    "cross_lr_table",
    "heat_kernel_smooth",
    "neighborhood",
    "stage_one",
    "stage_two",
    "weights_from_lr",
]
