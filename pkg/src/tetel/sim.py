"""Seeded data generators and the Monte Carlo harness for the three simulation studies.

Every replication draws from its own Philox stream keyed by ``(seed, replication)``,
so results do not depend on how replications are grouped into chunks or
spread over worker processes.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import _engine
from ._parallel import chunks, ordered_map
from .chi2 import chi2_sf
from .data import LongitudinalDataset
from .el import LinearHypothesis
from .moments import affine_from_weights, elementary_basis, reduce_moments
from .spatial import Lattice, ModelRecipe, VoxelField, heat_kernel_smooth, stage_one, stage_two
from .wald import gee_solve, wald_batch

ERROR_DISTS = ("normal01", "chisq3_centered")
STUDY1_TIMES = np.arange(1.0, 6.0)
DEFAULT_ROIS = ((5, 5, 6, 6), (19, 19, 6, 6))


def substream(seed: int, replication: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator for one replication (and optional sub-stream)."""
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=(int(replication), int(stream)))
    return np.random.Generator(np.random.Philox(ss))


def draw_errors(rng: np.random.Generator, dist: str, shape) -> np.ndarray:
    """Mean-zero errors: standard normal, or chi-square(3) minus 3 built from three squared normals."""
    if dist == "normal01":
        return rng.standard_normal(shape)
    if dist == "chisq3_centered":
        z = rng.standard_normal((3,) + tuple(np.atleast_1d(shape)))
        return (z**2).sum(axis=0) - 3.0
    raise ValueError(f"unknown error distribution {dist!r}; expected one of {ERROR_DISTS}")


# ---------------------------------------------------------------------------
# generators


def study1_design(x: np.ndarray) -> np.ndarray:
    """Design rows ``(1, t, x, t x)`` at times 1..5, shape (n, 5, 4)."""
    n = x.shape[0]
    t = np.broadcast_to(STUDY1_TIMES, (n, 5))
    xx = np.broadcast_to(x[:, None], (n, 5))
    return np.stack([np.ones((n, 5)), t, xx, t * xx], axis=-1)


def _study1_arrays(rng, n, beta3, error_dist, zero_noise=False):
    x = rng.standard_normal(n)
    b = rng.standard_normal(n)
    eps = draw_errors(rng, error_dist, (n, 5))
    X = study1_design(x)
    y = X @ np.array([1.0, 1.0, 1.0, beta3])
    if not zero_noise:
        y = y + b[:, None] + eps
    return y, X


def gen_study1(n: int, beta3: float, error_dist: str = "normal01", seed: int = 0,
               replication: int = 0, zero_noise: bool = False) -> LongitudinalDataset:
    """Random-intercept data ``y = 1 + t + x + beta3 t x + b + eps`` at times 1..5.

    ``zero_noise`` drops ``b`` and ``eps`` (a testing hook).
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    y, X = _study1_arrays(substream(seed, replication), n, beta3, error_dist, zero_noise)
    return LongitudinalDataset(y, X, STUDY1_TIMES)


def _study2_arrays(rng, n, T, beta, beta3, include_lag=False, variances=(4.0, 1.0, 1.0)):
    var_b, var_e, var_eps = variances
    x = np.empty((n, T + 1))
    x[:, 0] = rng.standard_normal(n) * math.sqrt(var_eps / (1.0 - beta3**2))
    eps = rng.standard_normal((n, T)) * math.sqrt(var_eps)
    for t in range(1, T + 1):
        x[:, t] = beta3 * x[:, t - 1] + eps[:, t - 1]
    b = rng.standard_normal(n) * math.sqrt(var_b)
    e = rng.standard_normal((n, T)) * math.sqrt(var_e)
    b0, b1, b2 = beta
    y = b0 + b1 * x[:, 1:] + b2 * x[:, :-1] + b[:, None] + e
    cols = [np.ones((n, T)), x[:, 1:]]
    if include_lag:
        cols.append(x[:, :-1])
    return y, np.stack(cols, axis=-1)


def gen_study2(n: int = 500, T: int = 3, beta: Sequence[float] = (1.0, 1.0, 1.0), beta3: float = 0.5,
               seed: int = 0, replication: int = 0, include_lag: bool = False,
               variances: Sequence[float] = (4.0, 1.0, 1.0)) -> LongitudinalDataset:
    """Autoregressive time-dependent covariate data.

    ``x_it = beta3 x_i,t-1 + eps_it`` started from its stationary law and
    ``y_it = beta0 + beta1 x_it + beta2 x_i,t-1 + b_i + e_it``. The returned
    design has columns ``(1, x_it)`` and, with ``include_lag``, ``x_i,t-1``.
    """
    if not abs(beta3) < 1.0:
        raise ValueError("the covariate process needs |beta3| < 1 to be stationary")
    if n < 1 or T < 1:
        raise ValueError("n and T must be positive")
    y, X = _study2_arrays(substream(seed, replication), n, T, tuple(beta), beta3, include_lag, tuple(variances))
    return LongitudinalDataset(y, X, np.arange(1.0, T + 1))


def study2_target(beta: Sequence[float] = (1.0, 1.0, 1.0), beta3: float = 0.5) -> float:
    """Slope on ``x_it`` of the mean of ``y_it`` given ``x_it`` alone: ``beta1 + beta2 beta3``."""
    return float(beta[1] + beta[2] * beta3)


def roi_mask(dims: Sequence[int], rois: Sequence[Sequence[int]] = DEFAULT_ROIS) -> np.ndarray:
    """Boolean map of the union of rectangles ``(row0, col0, height, width)``."""
    dims = tuple(dims)
    mask = np.zeros(dims, dtype=bool)
    for roi in rois:
        r0, c0, h, w = (int(v) for v in roi)
        if h < 1 or w < 1 or r0 < 0 or c0 < 0 or r0 + h > dims[0] or c0 + w > dims[1]:
            raise ValueError(f"ROI {tuple(roi)} does not fit in the lattice {dims}")
        mask[r0:r0 + h, c0:c0 + w] = True
    return mask


def _study3_arrays(rng, n, beta3_map, error_dist):
    V = beta3_map.size
    x = rng.standard_normal(n)
    X = study1_design(x)
    b = rng.standard_normal((V, n))
    eps = draw_errors(rng, error_dist, (V, n, 5))
    y = beta3_map.reshape(V, 1, 1) * X[None, :, :, 3] + b[..., None] + eps
    return y, X


def gen_study3(n: int, beta3_in_roi: float, error_dist: str = "normal01", seed: int = 0,
               lattice: Sequence[int] = (30, 30), rois: Sequence[Sequence[int]] = DEFAULT_ROIS,
               replication: int = 0) -> VoxelField:
    """Voxel field with ``y(d) = beta3(d) t x + b(d) + eps(d)``.

    ``beta3(d)`` equals ``beta3_in_roi`` inside the ROIs and 0 elsewhere. The
    subject covariate ``x_i`` and times are shared by all voxels; the random
    intercepts and errors are independent across voxels.
    """
    lat = Lattice(tuple(lattice))
    mask = roi_mask(lat.dims, rois)
    y, X = _study3_arrays(substream(seed, replication), n, np.where(mask, beta3_in_roi, 0.0), error_dist)
    return VoxelField(lat, y, X, STUDY1_TIMES, recipe=ModelRecipe(4, "gee", "exchangeable"))


# ---------------------------------------------------------------------------
# configuration and tables


@dataclass(frozen=True)
class SimConfig:
    """One simulation cell.

    ``beta3`` is the interaction effect for Studies I and III and the
    autoregression coefficient of the covariate for Study II. ``n`` defaults
    to 80 subjects for Studies I and III and 500 for Study II; ``beta3``
    defaults to 0 for Studies I and III and 0.5 for Study II.
    """

    study: str = "I"
    n: int | None = None
    beta3: float | None = None
    error_dist: str = "normal01"
    replications: int = 1000
    seed: int = 20240101
    alpha: float = 0.05
    T: int = 3
    beta: tuple[float, ...] = (1.0, 1.0, 1.0)
    lattice: tuple[int, ...] = (30, 30)
    rois: tuple[tuple[int, int, int, int], ...] = DEFAULT_ROIS
    statistics: tuple[str, ...] = ()
    smoothing_iterations: int = 16
    weight_alpha: float = 0.05
    chunk_size: int = 100
    threads: int = 1

    def __post_init__(self):
        if self.study not in ("I", "II", "III"):
            raise ValueError(f"unknown study {self.study!r}")
        if self.n is None:
            object.__setattr__(self, "n", DEFAULT_N[self.study])
        if self.beta3 is None:
            object.__setattr__(self, "beta3", DEFAULT_BETA3[self.study])
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if self.n < 2:
            raise ValueError("n must be at least 2")
        if self.error_dist not in ERROR_DISTS:
            raise ValueError(f"unknown error distribution {self.error_dist!r}")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if self.study == "II" and not abs(self.beta3) < 1.0:
            raise ValueError("Study II needs |beta3| < 1")
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        object.__setattr__(self, "lattice", tuple(int(d) for d in self.lattice))
        object.__setattr__(self, "rois", tuple(tuple(int(v) for v in r) for r in self.rois))
        object.__setattr__(self, "statistics", tuple(self.statistics) or DEFAULT_STATISTICS[self.study])

    def with_(self, **kw) -> "SimConfig":
        return replace(self, **kw)


DEFAULT_N = {"I": 80, "II": 500, "III": 80}
DEFAULT_BETA3 = {"I": 0.0, "II": 0.5, "III": 0.0}

DEFAULT_STATISTICS = {
    "I": ("LR_Aetel", "LR_Etel", "Wald"),
    "II": ("GF_II_vs_III", "GF_I_vs_II"),
    "III": ("LR_Aetel", "LR_Tetel", "Wald_smoothed"),
}

RATE_FIELDS = ("study", "beta3", "n", "error_dist", "statistic", "stage", "region",
               "rate", "se", "rejections", "tests", "replications", "failures")


@dataclass
class RateRow:
    study: str
    beta3: float
    n: int
    error_dist: str
    statistic: str
    stage: str
    region: str
    rejections: int
    tests: int
    replications: int
    failures: int

    @property
    def rate(self) -> float:
        return self.rejections / self.tests if self.tests else math.nan

    @property
    def se(self) -> float:
        p = self.rate
        return math.sqrt(p * (1.0 - p) / self.replications) if self.tests else math.nan

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in RATE_FIELDS}
        return d


@dataclass
class RejectionTable:
    """Rejection proportions keyed by ``(beta3, n, error_dist, statistic, stage, region)``."""

    rows: list[RateRow] = field(default_factory=list)

    def extend(self, other: "RejectionTable") -> "RejectionTable":
        self.rows.extend(other.rows)
        return self

    def get(self, statistic: str, region: str = "all", **match) -> RateRow:
        hits = [r for r in self.rows if r.statistic == statistic and r.region == region
                and all(getattr(r, k) == v for k, v in match.items())]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} rows match statistic={statistic!r}, region={region!r}, {match}")
        return hits[0]

    def rate(self, statistic: str, region: str = "all", **match) -> float:
        return self.get(statistic, region, **match).rate

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RATE_FIELDS)
        for r in self.rows:
            d = r.as_dict()
            d["rate"] = f"{r.rate:.6f}"
            d["se"] = f"{r.se:.6f}"
            d["beta3"] = repr(float(r.beta3))
            w.writerow([d[k] for k in RATE_FIELDS])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# per-chunk workers


def _interaction_hypothesis() -> LinearHypothesis:
    return LinearHypothesis.coefficients(4, [3], 0.0)


def _study1_chunk(args):
    cfg, reps = args
    ys, Xs = zip(*(_study1_arrays(substream(cfg.seed, r), cfg.n, cfg.beta3, cfg.error_dist) for r in reps))
    y, X = np.stack(ys), np.stack(Xs)
    off, slope = ModelRecipe(4, "gee", "exchangeable").affine_batch(y, X, np.full(cfg.n, 5))
    H = _interaction_hypothesis()
    out = {}
    for stat in cfg.statistics:
        if stat == "LR_Aetel":
            res = _engine.lr_batch(*_engine.with_adjustment(off, slope), H.R, H.b0)
            out[stat] = (res.statistic, res.ok)
        elif stat == "LR_Etel":
            res = _engine.lr_batch(off, slope, H.R, H.b0)
            out[stat] = (res.statistic, res.ok)
        elif stat == "Wald":
            _, w, _ = wald_batch(off, slope, H.R, H.b0)
            out[stat] = (w, np.isfinite(w))
        else:
            raise ValueError(f"statistic {stat!r} is not available for Study I")
    return out


def _study2_systems(y, X):
    T = y.shape[-1]
    W2 = np.stack(elementary_basis(T, lower=True))
    W1 = np.stack(elementary_basis(T, lower=False))
    return {"II": reduce_moments(*affine_from_weights(y, X, W2)),
            "I": reduce_moments(*affine_from_weights(y, X, W1)),
            "III": affine_from_weights(y, X, np.eye(T)[None])}


def _study2_arrays_for(cfg, reps):
    ys, Xs = zip(*(_study2_arrays(substream(cfg.seed, r), cfg.n, cfg.T, cfg.beta, cfg.beta3) for r in reps))
    return np.stack(ys), np.stack(Xs)


def _study2_chunk(args):
    cfg, reps = args
    y, X = _study2_arrays_for(cfg, reps)
    systems = _study2_systems(y, X)
    out = {}
    for stat in cfg.statistics:
        key = {"GF_II_vs_III": "II", "GF_I_vs_II": "I"}.get(stat)
        if key is None:
            raise ValueError(f"statistic {stat!r} is not available for Study II")
        off, slope = _engine.with_adjustment(*systems[key])
        res = _engine.minimize_batch(off, slope)
        out[stat] = (2.0 * off.shape[1] * res.objective, res.converged & np.isfinite(res.objective))
        out.setdefault("_df", {})[stat] = slope.shape[2] - slope.shape[3]
    return out


def _study2_estimates_chunk(args):
    cfg, reps = args
    y, X = _study2_arrays_for(cfg, reps)
    systems = _study2_systems(y, X)
    sizes = np.full(cfg.n, cfg.T)
    est = {}
    off, slope = _engine.with_adjustment(*systems["II"])
    res = _engine.minimize_batch(off, slope)
    est["TypeII"] = np.where(res.converged, res.theta[:, 1], np.nan)
    off, slope = _engine.with_adjustment(*systems["III"])
    res = _engine.minimize_batch(off, slope)
    est["TypeIII"] = np.where(res.converged, res.theta[:, 1], np.nan)
    for label, kind in (("GEE_independence", "independence"), ("GEE_exchangeable", "exchangeable"),
                        ("GEE_AR1", "ar1")):
        o, s = ModelRecipe(2, "gee", kind).affine_batch(y, X, sizes)
        est[label] = gee_solve(o, s)[:, 1]
    return est


def _study3_rep(args):
    cfg, rep = args
    lat = Lattice(cfg.lattice)
    mask = roi_mask(lat.dims, cfg.rois).reshape(-1)
    y, X = _study3_arrays(substream(cfg.seed, rep), cfg.n, np.where(mask, cfg.beta3, 0.0), cfg.error_dist)
    field_ = VoxelField(lat, y, X, STUDY1_TIMES, recipe=ModelRecipe(4, "gee", "exchangeable"))
    H = _interaction_hypothesis()
    out = {}
    s1 = None
    if "LR_Aetel" in cfg.statistics or "LR_Tetel" in cfg.statistics:
        s1 = stage_one(field_, H, threads=1, chunk_size=lat.size)
        out["LR_Aetel"] = (s1.lr, s1.ok)
    if "LR_Tetel" in cfg.statistics:
        s2 = stage_two(field_, s1, H, alpha=cfg.weight_alpha, threads=1, chunk_size=lat.size, covariance=False)
        out["LR_Tetel"] = (s2.lr, s2.ok)
    if "Wald_smoothed" in cfg.statistics:
        ys = heat_kernel_smooth(y.reshape(lat.dims + y.shape[1:]), cfg.smoothing_iterations,
                                ndim=len(lat.dims)).reshape(y.shape)
        off, slope = ModelRecipe(4, "gee", "exchangeable").affine_batch(ys, X, np.full(cfg.n, 5))
        _, w, _ = wald_batch(off, slope, H.R, H.b0)
        out["Wald_smoothed"] = (w, np.isfinite(w))
    return {k: v for k, v in out.items() if k in cfg.statistics}


STAGES = {"LR_Aetel": "stage1", "LR_Tetel": "stage2", "Wald_smoothed": "smoothed", "LR_Etel": "stage1",
          "Wald": "stage1", "GF_II_vs_III": "stage1", "GF_I_vs_II": "stage1"}


def _tally(cfg: SimConfig, parts: list[dict], df: dict, regions: dict | None = None) -> RejectionTable:
    table = RejectionTable()
    for stat in cfg.statistics:
        values = [p[stat] for p in parts]
        regs = regions or {"all": None}
        for region, sel in regs.items():
            rej = tests = fails = 0
            for statv, ok in values:
                s = np.asarray(statv, dtype=float)
                o = np.asarray(ok, dtype=bool)
                if sel is not None:
                    s, o = s[sel], o[sel]
                pv = chi2_sf(np.where(o, np.nan_to_num(s), 0.0), df[stat])
                rej += int(np.count_nonzero(o & (pv <= cfg.alpha)))
                tests += int(np.count_nonzero(o))
                fails += int(np.count_nonzero(~o))
            table.rows.append(RateRow(cfg.study, cfg.beta3, cfg.n, cfg.error_dist, stat, STAGES.get(stat, ""),
                                      region, rej, tests, cfg.replications, fails))
    return table


def rejection_rates(config: SimConfig) -> RejectionTable:
    """Monte Carlo rejection proportions at level ``config.alpha``.

    Failed fits (non-convergence, or an empty convex hull for the unadjusted
    criterion) are excluded from the denominators and counted in ``failures``.
    Study III rows report rates inside the ROIs, outside them and overall.
    """
    cfg = config
    if cfg.study == "III":
        parts = ordered_map(_study3_rep, [(cfg, r) for r in range(cfg.replications)], cfg.threads)
        mask = roi_mask(cfg.lattice, cfg.rois).reshape(-1)
        df = {s: 1 for s in cfg.statistics}
        return _tally(cfg, parts, df, {"roi": mask, "outside": ~mask, "all": None})
    jobs = [(cfg, list(c)) for c in chunks(cfg.replications, cfg.chunk_size)]
    if cfg.study == "I":
        parts = ordered_map(_study1_chunk, jobs, cfg.threads)
        return _tally(cfg, parts, {s: 1 for s in cfg.statistics})
    parts = ordered_map(_study2_chunk, jobs, cfg.threads)
    # degrees of freedom count the linearly independent moments of each set
    df = parts[0]["_df"]
    if any(p["_df"] != df for p in parts):
        raise ArithmeticError("the number of independent moments differs between replications")
    return _tally(cfg, parts, df)


@dataclass(frozen=True)
class EstimatorSummary:
    label: str
    bias: float
    rmse: float
    efficiency: float
    replications: int
    failures: int


STUDY2_ESTIMATORS = ("TypeII", "TypeIII", "GEE_independence", "GEE_exchangeable", "GEE_AR1")


def study2_summary(config: SimConfig) -> list[EstimatorSummary]:
    """Bias, RMSE and efficiency (MSE of GEE-independence over MSE) for estimators of the slope on ``x_it``.

    The target is :func:`study2_target`, the slope of the mean of ``y_it``
    given ``x_it`` alone, since the fitted design omits the lagged covariate.
    """
    cfg = config if config.study == "II" else config.with_(study="II", statistics=())
    jobs = [(cfg, list(c)) for c in chunks(cfg.replications, cfg.chunk_size)]
    parts = ordered_map(_study2_estimates_chunk, jobs, cfg.threads)
    truth = study2_target(cfg.beta, cfg.beta3)
    est = {k: np.concatenate([p[k] for p in parts]) for k in STUDY2_ESTIMATORS}
    mse = {}
    rows = []
    for k in STUDY2_ESTIMATORS:
        v = est[k]
        good = np.isfinite(v)
        err = v[good] - truth
        mse[k] = float(np.mean(err**2))
        rows.append((k, float(np.mean(err)), math.sqrt(mse[k]), int(np.count_nonzero(~good))))
    ref = mse["GEE_independence"]
    return [EstimatorSummary(k, b, r, ref / mse[k], cfg.replications, f) for k, b, r, f in rows]


__all__ = [
    "DEFAULT_ROIS",
    "ERROR_DISTS",
    "EstimatorSummary",
    "RateRow",
    "RejectionTable",
    "SimConfig",
    "draw_errors",
    "gen_study1",
    "gen_study2",
    "gen_study3",
    "rejection_rates",
    "roi_mask",
    "study1_design",
    "study2_summary",
    "study2_target",
    "substream",
]
