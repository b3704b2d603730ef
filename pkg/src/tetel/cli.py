"""Command-line entry point: ``tetel {fit,test,tetel,simulate,fdr}``.

Exit status is 0 when every fit succeeded and every file was written. Failures
print a one-line JSON summary on standard error:

* 1: some per-voxel or per-replication fits failed (results still written)
* 2: bad configuration or arguments
* 3: malformed input data
* 4: output could not be written
* 5: a numerical failure in a single (non-spatial) fit
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ._parallel import default_threads
from .el import fit, lr_test
from .fdr import fdr_adjust
from .fileio import (
    DataFormatError,
    FieldResults,
    RunConfig,
    SimulationResults,
    load_field_csv,
    load_long_csv,
    write_results,
)
from .sim import rejection_rates, study2_summary
from .spatial import ModelRecipe, stage_one, stage_two

EXIT_OK, EXIT_FAILURES, EXIT_CONFIG, EXIT_DATA, EXIT_IO, EXIT_NUMERIC = range(6)

# flag name -> RunConfig field (flags left unset do not override the config file)
_FLAGS = {
    "outdir": "outdir", "model": "model", "working": "working", "alpha": "alpha",
    "weight_alpha": "weight_alpha", "fdr": "fdr", "R": "R", "b0": "b0", "radius": "radius",
    "study": "study", "n": "n", "beta3": "beta3", "error_dist": "error_dist",
    "replications": "replications", "seed": "seed", "T": "T", "beta": "beta", "lattice": "lattice",
    "rois": "rois", "statistics": "statistics", "threads": "threads",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tetel", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p):
        p.add_argument("--config", help="key=value configuration file; flags override it")
        p.add_argument("--outdir", "-o")
        p.add_argument("--threads", type=int, help="worker processes (default: $ETEL_THREADS or 1)")
        p.add_argument("--verbose", "-v", action="store_true")

    def model(p):
        p.add_argument("--model", choices=("gee", "type1", "type2", "type3"))
        p.add_argument("--working", choices=("independence", "exchangeable", "ar1"))
        p.add_argument("--unadjusted", action="store_true", help="plain ETEL without the adjustment row")

    def hyp(p, required):
        p.add_argument("--R", required=required, help='hypothesis matrix, e.g. "0,0,0,1" or "1,0;0,1"')
        p.add_argument("--b0", required=required, help='right-hand side, e.g. "0" or "0,0"')

    p = sub.add_parser("fit", help="AETEL estimate for a long-format dataset")
    p.add_argument("input")
    common(p), model(p), hyp(p, False)

    p = sub.add_parser("test", help="likelihood-ratio test of R theta = b0")
    p.add_argument("input")
    common(p), model(p), hyp(p, True)
    p.add_argument("--alpha", type=float)

    p = sub.add_parser("tetel", help="two-stage spatial analysis of a voxel field")
    p.add_argument("input")
    common(p), model(p), hyp(p, True)
    p.add_argument("--alpha", type=float, help="level inside the weight bandwidth")
    p.add_argument("--fdr", type=str.upper, choices=("BH", "BY"))
    p.add_argument("--radius", type=int)

    p = sub.add_parser("simulate", help="Monte Carlo rejection rates for Study I, II or III")
    common(p)
    p.add_argument("--study", choices=("I", "II", "III"))
    p.add_argument("--n", type=int)
    p.add_argument("--beta3", type=float)
    p.add_argument("--error-dist", dest="error_dist", choices=("normal01", "chisq3_centered"))
    p.add_argument("--replications", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--T", type=int)
    p.add_argument("--beta", help="Study II (beta0, beta1, beta2), comma separated")
    p.add_argument("--lattice", help="Study III lattice dims, comma separated")
    p.add_argument("--rois", help='Study III ROIs "row,col,height,width;..."')
    p.add_argument("--statistics", help="comma-separated statistic names")

    p = sub.add_parser("fdr", help="adjust a column of p-values")
    p.add_argument("input", help="CSV with a 'p' column (or a single column of p-values)")
    common(p)
    p.add_argument("--fdr", type=str.upper, choices=("BH", "BY"))
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    text = Path(args.config).read_text(encoding="utf-8") if getattr(args, "config", None) else ""
    overrides = {"subcommand": args.subcommand}
    if getattr(args, "input", None):
        overrides["inputs"] = (args.input,)
    for flag, name in _FLAGS.items():
        val = getattr(args, flag, None)
        if val is not None:
            overrides[name] = val
    if getattr(args, "unadjusted", False):
        overrides["adjusted"] = False
    if args.subcommand == "tetel" and getattr(args, "alpha", None) is not None:
        overrides["weight_alpha"] = args.alpha
    if "threads" not in overrides and not any(l.strip().startswith("threads") for l in text.splitlines()):
        overrides["threads"] = default_threads()
    return RunConfig.parse(text, overrides)


def _error(code: int, kind: str, message: str, **extra) -> int:
    print(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True), file=sys.stderr)
    return code


def _load_pvalues(path) -> np.ndarray:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise DataFormatError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    col = header.index("p") if "p" in header else 0
    body = rows[1:] if ("p" in header or not _is_number(header[col])) else rows
    vals = []
    for k, r in enumerate(body):
        try:
            vals.append(float(r[col]))
        except (ValueError, IndexError):
            raise DataFormatError(f"{path}: row {k + 1}: not a p-value: {r}") from None
    return np.array(vals)


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def run(cfg: RunConfig) -> int:
    out = Path(cfg.outdir)
    failures = 0
    if cfg.subcommand in ("fit", "test"):
        data = load_long_csv(cfg.inputs[0])
        model = ModelRecipe(data.q, cfg.model, cfg.working).build(data)
        results = [fit(model, data, adjusted=cfg.adjusted)]
        if cfg.subcommand == "test" or cfg.R is not None:
            results.append(lr_test(model, data, cfg.hypothesis(), adjusted=cfg.adjusted))
        if not results[0].converged:
            failures = 1
    elif cfg.subcommand == "tetel":
        field_ = load_field_csv(cfg.inputs[0], radius=cfg.radius)
        field_ = field_.with_recipe(ModelRecipe(field_.q, cfg.model, cfg.working))
        H = cfg.hypothesis()
        s1 = stage_one(field_, H, adjusted=cfg.adjusted, threads=cfg.threads)
        s2 = stage_two(field_, s1, H, alpha=cfg.weight_alpha, fdr=cfg.fdr, threads=cfg.threads)
        results = FieldResults(field_.lattice, s1, s2)
        failures = s2.failures
    elif cfg.subcommand == "simulate":
        sc = cfg.sim_config()
        table = rejection_rates(sc)
        summary = study2_summary(sc) if sc.study == "II" else None
        results = SimulationResults(table, summary)
        # convex-hull failures of the unadjusted criterion are an expected finding, not an error
        failures = sum(r.failures for r in table.rows if r.region == "all" and r.statistic != "LR_Etel")
    else:
        p = _load_pvalues(cfg.inputs[0])
        adj = fdr_adjust(p, cfg.fdr)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "fdr.csv"
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["p", "p_adjusted"])
            w.writerows([[repr(float(a)), repr(float(b))] for a, b in zip(adj.raw, adj.adjusted)])
        return EXIT_OK
    write_results(results, out)
    (out / "config.txt").write_text(cfg.render(), encoding="utf-8")
    if failures:
        return _error(EXIT_FAILURES, "fit_failures", f"{failures} fits failed; see the output files",
                      failures=int(failures))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        cfg = config_from_args(args)
    except (ValueError, OSError) as exc:
        return _error(EXIT_CONFIG, "config", str(exc))
    try:
        return run(cfg)
    except DataFormatError as exc:
        return _error(EXIT_DATA, "data", str(exc))
    except OSError as exc:
        return _error(EXIT_IO, "io", str(exc))
    except ArithmeticError as exc:
        return _error(EXIT_NUMERIC, "numeric", str(exc))
    except ValueError as exc:
        return _error(EXIT_CONFIG, "config", str(exc))


if __name__ == "__main__":
    sys.exit(main())
