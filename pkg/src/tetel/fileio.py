"""Run configuration, CSV ingestion and result serialization.

Long-format CSV files have one row per (subject, time) observation with
columns ``subject_id, time, y, x1..xq``; voxel fields add ``voxel_row,
voxel_col`` (and ``voxel_layer`` for 3-D lattices). No intercept column is
added: the design is exactly the ``x`` columns supplied.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import re
from collections import OrderedDict
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .data import LongitudinalDataset
from .el import Estimate, TestResult
from .fdr import fdr_adjust
from .sim import DEFAULT_ROIS, EstimatorSummary, RejectionTable, SimConfig
from .spatial import Lattice, ModelRecipe, StageOneResult, TetelResult, VoxelField

SUBCOMMANDS = ("fit", "test", "tetel", "simulate", "fdr")
_XCOL = re.compile(r"^x(\d+)$")


class DataFormatError(ValueError):
    """Malformed input file; the message lists every offending line."""


# ---------------------------------------------------------------------------
# configuration


def format_matrix(R) -> str:
    """``[[0, 1], [1, 0]] -> "0,1;1,0"``."""
    return ";".join(",".join(repr(float(v)) for v in row) for row in R)


def parse_matrix(text: str) -> tuple[tuple[float, ...], ...]:
    """Inline matrix ``"0,0,0,1;0,0,1,0"`` (rows separated by ``;``)."""
    rows = [r for r in text.strip().split(";") if r.strip()]
    if not rows:
        raise ValueError("empty matrix specification")
    out = tuple(tuple(float(v) for v in r.split(",")) for r in rows)
    if len({len(r) for r in out}) != 1:
        raise ValueError(f"ragged matrix specification {text!r}")
    return out


def parse_vector(text: str) -> tuple[float, ...]:
    vals = [v for v in text.replace(";", ",").split(",") if v.strip()]
    if not vals:
        raise ValueError("empty vector specification")
    return tuple(float(v) for v in vals)


@dataclass(frozen=True)
class RunConfig:
    """Everything one CLI invocation needs; renders to and parses from ``key=value`` text."""

    subcommand: str = "fit"
    inputs: tuple[str, ...] = ()
    outdir: str = "out"
    model: str = "gee"
    working: str = "exchangeable"
    adjusted: bool = True
    alpha: float = 0.05
    weight_alpha: float = 0.05
    fdr: str = "BY"
    R: tuple[tuple[float, ...], ...] | None = None
    b0: tuple[float, ...] | None = None
    radius: int = 1
    study: str = "I"
    n: int | None = None
    beta3: float | None = None
    error_dist: str = "normal01"
    replications: int = 1000
    seed: int = 20240101
    T: int = 3
    beta: tuple[float, ...] = (1.0, 1.0, 1.0)
    lattice: tuple[int, ...] = (30, 30)
    rois: tuple[tuple[int, ...], ...] = DEFAULT_ROIS
    statistics: tuple[str, ...] = ()
    threads: int = 1

    def __post_init__(self):
        if self.subcommand not in SUBCOMMANDS:
            raise ValueError(f"unknown subcommand {self.subcommand!r}")
        if self.fdr.upper() not in ("BH", "BY"):
            raise ValueError(f"unknown FDR method {self.fdr!r}")
        object.__setattr__(self, "fdr", self.fdr.upper())
        if self.threads < 1:
            raise ValueError("threads must be at least 1")
        if (self.R is None) != (self.b0 is None):
            raise ValueError("R and b0 must be given together")
        if self.R is not None and len(self.R) != len(self.b0):
            raise ValueError("b0 needs one entry per row of R")

    def hypothesis(self):
        from .el import LinearHypothesis

        if self.R is None:
            raise ValueError("this subcommand needs a hypothesis (R and b0)")
        return LinearHypothesis(np.array(self.R), np.array(self.b0))

    def sim_config(self) -> SimConfig:
        return SimConfig(study=self.study, n=self.n, beta3=self.beta3, error_dist=self.error_dist,
                         replications=self.replications, seed=self.seed, alpha=self.alpha, T=self.T,
                         beta=self.beta, lattice=self.lattice, rois=self.rois, statistics=self.statistics,
                         weight_alpha=self.weight_alpha, threads=self.threads)

    def render(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={_render_value(f.name, v)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str, overrides: dict | None = None) -> "RunConfig":
        """Parse ``key=value`` lines (``#`` comments allowed); ``overrides`` win over the text."""
        raw: dict[str, str] = {}
        known = {f.name for f in fields(cls)}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            raw[key] = value
        values = {k: _parse_value(k, v) for k, v in raw.items()}
        for k, v in (overrides or {}).items():
            if k not in known:
                raise ValueError(f"unknown option {k!r}")
            values[k] = _parse_value(k, v) if isinstance(v, str) else v
        return cls(**values)


_TUPLE_FLOAT = {"b0", "beta"}
_TUPLE_INT = {"lattice"}
_TUPLE_STR = {"inputs", "statistics"}
_INT = {"radius", "n", "replications", "seed", "T", "threads"}
_FLOAT = {"alpha", "weight_alpha", "beta3"}
_BOOL = {"adjusted"}


def _render_value(name: str, v: Any) -> str:
    if v is None:
        return ""
    if name == "R":
        return format_matrix(v)
    if name == "rois":
        return ";".join(",".join(str(int(x)) for x in r) for r in v)
    if name in _TUPLE_FLOAT:
        return ",".join(repr(float(x)) for x in v)
    if name in _TUPLE_INT:
        return ",".join(str(int(x)) for x in v)
    if name in _TUPLE_STR:
        return ",".join(v)
    if name in _FLOAT:
        return repr(float(v))
    if name in _BOOL:
        return "true" if v else "false"
    return str(v)


def _parse_value(name: str, s: str) -> Any:
    s = s.strip()
    if name in ("R", "b0", "n", "beta3") and s == "":
        return None
    if name == "R":
        return parse_matrix(s)
    if name == "rois":
        return tuple(tuple(int(x) for x in r.split(",")) for r in s.split(";") if r.strip())
    if name in _TUPLE_FLOAT:
        return parse_vector(s)
    if name in _TUPLE_INT:
        return tuple(int(x) for x in s.split(",") if x.strip())
    if name in _TUPLE_STR:
        return tuple(x.strip() for x in s.split(",") if x.strip())
    if name in _INT:
        return int(s)
    if name in _FLOAT:
        return float(s)
    if name in _BOOL:
        low = s.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{name} must be true or false, got {s!r}")
        return low in ("true", "1", "yes")
    return s


# ---------------------------------------------------------------------------
# CSV ingestion


def _report(path, errors, limit: int = 10) -> str:
    shown = "; ".join(errors[:limit])
    more = f"; ... and {len(errors) - limit} more" if len(errors) > limit else ""
    return f"{path}: {shown}{more}"


def _read_rows(path, required: Sequence[str]):
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        missing = [c for c in required if c not in header]
        xcols = sorted((c for c in header if _XCOL.match(c)), key=lambda c: int(_XCOL.match(c).group(1)))
        if not xcols:
            missing.append("x1..xq")
        if missing:
            raise DataFormatError(f"{path}: line 1: missing columns {', '.join(missing)}")
        pos = {c: header.index(c) for c in list(required) + xcols}
        rows = []
        errors = []
        for lineno, rec in enumerate(reader, 2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                errors.append(f"line {lineno}: expected {len(header)} fields, found {len(rec)}")
                continue
            rows.append((lineno, {c: rec[i].strip() for c, i in pos.items()}))
    if errors:
        raise DataFormatError(_report(path, errors))
    return rows, xcols


def _numbers(path, rows, cols):
    out = []
    errors = []
    for lineno, rec in rows:
        vals = []
        for c in cols:
            try:
                v = float(rec[c])
            except ValueError:
                errors.append(f"line {lineno}: non-numeric value {rec[c]!r} in column {c}")
                continue
            if not math.isfinite(v):
                errors.append(f"line {lineno}: non-finite value in column {c}")
            vals.append(v)
        out.append(vals)
    if errors:
        raise DataFormatError(_report(path, errors))
    return out


def _group_subjects(path, rows, nums, key_fn):
    """Group observations by key, sorted by time; reports duplicate (key, time) pairs."""
    groups: OrderedDict = OrderedDict()
    errors = []
    for (lineno, rec), vals in zip(rows, nums):
        key = key_fn(rec)
        g = groups.setdefault(key, {})
        t = vals[0]
        if t in g:
            errors.append(f"line {lineno}: duplicate time {rec['time']} for {key} (first seen on line {g[t][0]})")
            continue
        g[t] = (lineno, vals)
    if errors:
        raise DataFormatError(_report(path, errors))
    return OrderedDict((k, [g[t][1] for t in sorted(g)]) for k, g in groups.items())


def _padded(obs_by_subject, q):
    n = len(obs_by_subject)
    M = max(len(o) for o in obs_by_subject)
    y = np.zeros((n, M))
    X = np.zeros((n, M, q))
    t = np.zeros((n, M))
    sizes = np.zeros(n, dtype=int)
    for i, obs in enumerate(obs_by_subject):
        a = np.array(obs)
        m = a.shape[0]
        t[i, :m], y[i, :m], X[i, :m] = a[:, 0], a[:, 1], a[:, 2:]
        sizes[i] = m
    return y, X, t, sizes


def load_long_csv(path) -> LongitudinalDataset:
    """Dataset from a long CSV; subjects in order of first appearance, times sorted within subject."""
    rows, xcols = _read_rows(path, ("subject_id", "time", "y"))
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    nums = _numbers(path, rows, ["time", "y"] + xcols)
    groups = _group_subjects(path, rows, nums, lambda r: r["subject_id"])
    y, X, t, sizes = _padded(list(groups.values()), len(xcols))
    return LongitudinalDataset(y, X, t, sizes)


def load_field_csv(path, recipe: ModelRecipe | None = None, radius: int = 1) -> VoxelField:
    """Voxel field from a long CSV with voxel coordinates.

    The lattice is the bounding box of the coordinates; every cell must be
    present and every voxel must carry the same subjects at the same times.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        header = [h.strip() for h in next(csv.reader(fh), [])]
    coord_cols = ["voxel_row", "voxel_col"] + (["voxel_layer"] if "voxel_layer" in header else [])
    rows, xcols = _read_rows(path, coord_cols + ["subject_id", "time", "y"])
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    coords_raw = _numbers(path, rows, coord_cols)
    bad = [f"line {ln}: voxel coordinates must be integers" for (ln, _), c in zip(rows, coords_raw)
           if any(v != int(v) for v in c)]
    if bad:
        raise DataFormatError(f"{path}: " + "; ".join(bad))
    coords = np.array(coords_raw, dtype=int)
    lo = coords.min(axis=0)
    dims = tuple(int(d) for d in coords.max(axis=0) - lo + 1)
    lattice = Lattice(dims, radius)
    nums = _numbers(path, rows, ["time", "y"] + xcols)
    flat = np.ravel_multi_index(tuple((coords - lo).T), dims)
    per_voxel: dict[int, list] = {}
    for (ln, rec), v, vals in zip(rows, flat, nums):
        per_voxel.setdefault(int(v), []).append(((ln, rec), vals))
    missing = [tuple(int(c) for c in np.unravel_index(v, dims) + lo) for v in range(lattice.size) if v not in per_voxel]
    if missing:
        raise DataFormatError(f"{path}: lattice has holes; missing voxels {missing}")
    subjects = None
    times = None
    ys, Xs = [], []
    for v in range(lattice.size):
        recs = per_voxel[v]
        groups = _group_subjects(path, [r for r, _ in recs], [x for _, x in recs], lambda r: r["subject_id"])
        if subjects is None:
            subjects = list(groups)
        elif set(groups) != set(subjects):
            where = tuple(int(c) for c in np.unravel_index(v, dims) + lo)
            diff = sorted(set(groups) ^ set(subjects))
            raise DataFormatError(f"{path}: voxel {where} does not share the subject set (differs in {diff})")
        y, X, t, sizes = _padded([groups[s] for s in subjects], len(xcols))
        if times is None:
            times, size0 = (t, sizes)
        elif not (np.array_equal(sizes, size0) and np.array_equal(t, times)):
            where = tuple(int(c) for c in np.unravel_index(v, dims) + lo)
            raise DataFormatError(f"{path}: voxel {where} has observation times that differ from the first voxel")
        ys.append(y)
        Xs.append(X)
    X_all = np.stack(Xs)
    X_use = X_all[0] if np.all(X_all == X_all[0]) else X_all
    recipe = recipe if recipe is not None else ModelRecipe(len(xcols))
    return VoxelField(lattice, np.stack(ys), X_use, times, size0, recipe)


def _fmt(v) -> str:
    v = float(v)
    if math.isnan(v):
        return "nan"
    return repr(v)


def write_field_csv(field_: VoxelField, path) -> None:
    """Inverse of :func:`load_field_csv` (subjects are labelled ``s1..sn``)."""
    lat = field_.lattice
    coord_cols = ["voxel_row", "voxel_col", "voxel_layer"][: len(lat.dims)]
    q = field_.q
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(coord_cols + ["subject_id", "time", "y"] + [f"x{k + 1}" for k in range(q)])
        for v in range(lat.size):
            c = [str(x) for x in lat.coord(v)]
            X = field_.covariates(v)
            for i in range(field_.n):
                for j in range(field_.sizes[i]):
                    w.writerow(c + [f"s{i + 1}", _fmt(field_.t[i, j]), _fmt(field_.y[v, i, j])]
                               + [_fmt(x) for x in X[i, j]])


# ---------------------------------------------------------------------------
# results


@dataclass
class FieldResults:
    """Stage-1 and stage-2 output on a lattice."""

    lattice: Lattice
    stage1: StageOneResult
    stage2: TetelResult


@dataclass
class SimulationResults:
    table: RejectionTable
    summary: list[EstimatorSummary] | None = None


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def neglog10(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return np.where(np.isfinite(p), -np.log10(np.clip(p, 1e-300, 1.0)), 0.0)


def write_pgm(path: Path, values: np.ndarray, scale_path: Path) -> None:
    """Plain (P2) PGM of nonnegative values scaled linearly so the maximum maps to 255.

    3-D maps are written as their layers stacked top to bottom.
    """
    img = np.asarray(values, dtype=float)
    if img.ndim == 3:
        img = img.transpose(2, 0, 1).reshape(-1, img.shape[1])
    vmax = float(np.max(img)) if img.size else 0.0
    scale = 255.0 / vmax if vmax > 0 else 0.0
    grey = np.clip(np.rint(img * scale), 0, 255).astype(int)
    lines = ["P2", f"{grey.shape[1]} {grey.shape[0]}", "255"]
    lines += [" ".join(str(v) for v in row) for row in grey]
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    scale_path.write_text(
        f"quantity=-log10(adjusted p)\nmax_value={_fmt(vmax)}\ngrey_per_unit={_fmt(scale)}\n", encoding="ascii")


def write_results(results, outdir) -> list[Path]:
    """Serialize results from fit, test, tetel or simulate runs; returns the files written."""
    out = Path(outdir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    written = []
    items = results if isinstance(results, (list, tuple)) else [results]
    for res in items:
        if isinstance(res, Estimate):
            p = res.theta.size
            se = res.standard_errors if res.standard_errors is not None else np.full(p, np.nan)
            path = out / "estimates.csv"
            _write_csv(path, [f"theta{k + 1}" for k in range(p)] + [f"se{k + 1}" for k in range(p)],
                       [[_fmt(v) for v in res.theta] + [_fmt(v) for v in se]])
            written.append(path)
        elif isinstance(res, TestResult):
            path = out / "tests.csv"
            adj = fdr_adjust([res.p_value], "BH").adjusted[0]
            _write_csv(path, ["kind", "statistic", "df", "p_raw", "p_adjusted"],
                       [[res.kind.value, _fmt(res.statistic), str(res.df), _fmt(res.p_value), _fmt(adj)]])
            written.append(path)
        elif isinstance(res, FieldResults):
            written += _write_field(res, out)
        elif isinstance(res, SimulationResults):
            path = out / "rates.csv"
            path.write_text(res.table.to_csv(), encoding="utf-8")
            written.append(path)
            if res.summary is not None:
                path = out / "summary.csv"
                _write_csv(path, ["estimator", "bias", "rmse", "efficiency", "replications", "failures"],
                           [[s.label, _fmt(s.bias), _fmt(s.rmse), _fmt(s.efficiency), s.replications, s.failures]
                            for s in res.summary])
                written.append(path)
        else:
            raise TypeError(f"cannot serialize {type(res).__name__}")
    return written


def _write_field(res: FieldResults, out: Path) -> list[Path]:
    lat = res.lattice
    coords = lat.coords()
    ccols = ["voxel_row", "voxel_col", "voxel_layer"][: len(lat.dims)]
    s2 = res.stage2
    V, p = s2.theta.shape
    cov = s2.covariance if s2.covariance is not None else np.full((V, p, p), np.nan)
    se = np.sqrt(np.clip(np.diagonal(cov, axis1=1, axis2=2), 0.0, None))
    se = np.where(np.isnan(np.diagonal(cov, axis1=1, axis2=2)), np.nan, se)
    est_rows = []
    test_rows = []
    wsum = s2.weight_summary()
    for v in range(V):
        c = [str(int(x)) for x in coords[v]]
        est_rows.append(c + [_fmt(x) for x in s2.theta[v]] + [_fmt(x) for x in se[v]])
        test_rows.append(c + [_fmt(res.stage1.lr[v]), _fmt(res.stage1.p_value[v]), _fmt(s2.lr[v]), str(s2.df),
                              _fmt(s2.p_value[v]), _fmt(s2.p_adjusted[v])] + [_fmt(x) for x in wsum[v]]
                         + ["1" if s2.ok[v] else "0"])
    e = out / "estimates.csv"
    _write_csv(e, ccols + [f"theta{k + 1}" for k in range(p)] + [f"se{k + 1}" for k in range(p)], est_rows)
    t = out / "tests.csv"
    _write_csv(t, ccols + ["stage1_statistic", "stage1_p_raw", "statistic", "df", "p_raw", "p_adjusted",
                           "weight_min", "weight_mean", "weight_max", "ok"], test_rows)
    m = out / "map_neglog10p.pgm"
    s = out / "map_scale.txt"
    write_pgm(m, neglog10(s2.p_adjusted).reshape(lat.dims), s)
    return [e, t, m, s]


__all__ = [
    "DataFormatError",
    "FieldResults",
    "RunConfig",
    "SimulationResults",
    "format_matrix",
    "load_field_csv",
    "load_long_csv",
    "neglog10",
    "parse_matrix",
    "write_field_csv",
    "write_pgm",
    "write_results",
]
