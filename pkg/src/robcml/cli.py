"""Command-line front end: ``robcml fit | diagnose | simulate``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import warnings
from importlib import resources
from pathlib import Path

import numpy as np

from . import family as fam
from .cml import PipelineConfig, cml_pipeline, rejection_lists
from .errors import ConfigError, DomainError, RobCMLError
from .model import NB, Dataset, FamilySpec, ThetaEstimate
from .rqr import adaptive_cutoffs, rqr_compute
from .simulate import Contamination, SimConfig, figure_csv, run_experiment

log = logging.getLogger("robcml")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_DIVERGED = 2

BUILTIN_PREFIX = "builtin:"


class IngestError(RobCMLError, ValueError):
    """Malformed input file; the message carries the offending line."""


def _open_text(path):
    if str(path).startswith(BUILTIN_PREFIX):
        name = str(path)[len(BUILTIN_PREFIX):]
        ref = resources.files("robcml.data").joinpath(f"{name}.csv")
        if not ref.is_file():
            raise IngestError(f"unknown built-in dataset {name!r}", stage="ingest")
        return ref.open("r", encoding="utf-8")
    return open(path, "r", encoding="utf-8", newline="")


def _number(cell, line, column):
    try:
        return float(cell)
    except (TypeError, ValueError):
        raise IngestError(f"line {line}: column {column!r} is not numeric: {cell!r}",
                          stage="ingest") from None


def _check_response(v, line, family: FamilySpec):
    if not math.isfinite(v):
        raise IngestError(f"line {line}: response is not finite", stage="ingest")
    if family.discrete and (v < 0 or v != round(v)):
        raise IngestError(f"line {line}: count response must be a nonnegative integer, got {v:g}",
                          stage="ingest")
    if not family.discrete and not 0 < v < 1:
        raise IngestError(f"line {line}: Beta response must lie in (0, 1), got {v:g}",
                          stage="ingest")


def ingest_csv(path, response, covariates=(), family: FamilySpec = NB, shift=0.0) -> Dataset:
    """Read a header CSV; the intercept column is prepended to the covariates.

    ``shift`` is subtracted from the response before validation.
    """
    covariates = list(covariates)
    if response in covariates:
        raise ConfigError("response and covariate columns must be disjoint", stage="ingest")
    with _open_text(path) as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise IngestError(f"{path}: file is empty", stage="ingest")
        missing = [c for c in [response, *covariates] if c not in reader.fieldnames]
        if missing:
            raise IngestError(f"line 1: missing columns {missing}", stage="ingest")
        ys, xs = [], []
        for row in reader:
            line = reader.line_num
            y = _number(row[response], line, response) - shift
            _check_response(y, line, family)
            ys.append(y)
            xs.append([_number(row[c], line, c) for c in covariates])
    if not ys:
        raise IngestError(f"{path}: no data rows", stage="ingest")
    xstar = np.asarray(xs, dtype=float) if covariates else None
    return Dataset.from_covariates(ys, xstar, ["(Intercept)", *covariates])


def ingest_frequencies(path, family: FamilySpec = NB, shift=0.0) -> Dataset:
    """Read a two-column ``value,count`` file into an intercept-only dataset."""
    with _open_text(path) as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows:
        raise IngestError(f"{path}: file is empty", stage="ingest")
    start = 0
    try:
        float(rows[0][0])
    except (ValueError, IndexError):
        start = 1  # header row
    values = []
    for k, row in enumerate(rows[start:], start=start + 1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 2:
            raise IngestError(f"line {k}: expected value,count", stage="ingest")
        v = _number(row[0], k, "value") - shift
        c = _number(row[1], k, "count")
        if c < 0 or c != round(c):
            raise IngestError(f"line {k}: count must be a nonnegative integer", stage="ingest")
        _check_response(v, k, family)
        values.extend([v] * int(c))
    if not values:
        raise IngestError(f"{path}: no observations", stage="ingest")
    return Dataset.from_covariates(values)


def _load_data(args, family):
    if args.freq:
        return ingest_frequencies(args.freq, family, args.shift)
    if not args.data:
        raise ConfigError("either --data or --freq is required", stage="cli")
    if not args.response:
        raise ConfigError("--response is required with --data", stage="cli")
    cov = [c for c in (args.covariates or "").split(",") if c]
    return ingest_csv(args.data, args.response, cov, family, args.shift)


def _write(path, text):
    if path in (None, "-"):
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    else:
        Path(path).write_text(text, encoding="utf-8")


def _qq_csv(z) -> str:
    zs = np.sort(np.asarray(z))
    n = zs.size
    q = (np.arange(1, n + 1) - 0.5) / n
    lines = ["uniform_quantile,residual"] + [f"{a:.8g},{b:.8g}" for a, b in zip(q, zs)]
    return "\n".join(lines) + "\n"


def _require_seed(args):
    if args.seed is None:
        raise ConfigError("--seed is required for randomized computations", stage="cli")


def _ml_report(data, family, fit) -> dict:
    return {"family": family.kind.value, "names": list(data.names), "method": "ML",
            "estimate": fit.theta.as_dict(), "loglik": fit.loglik, "converged": fit.converged}


def cmd_fit(args) -> int:
    family = FamilySpec.from_name(args.family)
    data = _load_data(args, family)
    if args.ml_only:
        fit = fam.ml_fit(data, family)
        _write(args.out, json.dumps(_ml_report(data, family, fit), indent=2))
        return EXIT_OK
    _require_seed(args)
    config = PipelineConfig(zeta1=args.zeta1, zeta2=args.zeta2, replicates=args.reps,
                            iterations=args.iterations, seed=args.seed)
    report = cml_pipeline(data, family, config)
    _write(args.out, report.to_json())
    if args.qq:
        rng = np.random.default_rng(args.seed)
        diag = rqr_compute(report.theta, data, family, rng=rng)
        _write(args.qq, _qq_csv(diag.z))
    if report.diverged:
        log.warning("at least one conditional fit diverged; the initial value was kept there")
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_diagnose(args) -> int:
    family = FamilySpec.from_name(args.family)
    data = _load_data(args, family)
    report_cutoffs = None
    if args.report:
        text = Path(args.report).read_text(encoding="utf-8")
        doc = json.loads(text)
        theta = ThetaEstimate(doc["estimate"]["beta"], doc["estimate"]["alpha"])
        if len(theta.beta) != data.p:
            raise DomainError("report and data have different numbers of coefficients",
                              stage="diagnose")
        if doc.get("mean_cutoffs") is not None:
            report_cutoffs = tuple(float(c) for c in doc["mean_cutoffs"])
    else:
        theta = fam.ml_fit(data, family).theta
    if family.discrete:
        _require_seed(args)
    rng = np.random.default_rng(args.seed)
    diag = rqr_compute(theta, data, family, rng=rng)
    a, b = adaptive_cutoffs(diag.z, args.zeta1, args.zeta2)
    # a fit report's averaged cutoffs define its rejection lists; otherwise use this draw's
    ra, rb = report_cutoffs if report_cutoffs is not None else (a, b)
    rejected, lower, upper, _ = rejection_lists(theta, data, family, ra, rb)
    out = {"estimate": theta.as_dict(), "cutoffs": [a, b], "rejection_cutoffs": [ra, rb],
           "rejected": rejected.tolist(), "boundary_lower": lower.tolist(),
           "boundary_upper": upper.tolist(),
           "residuals_below": np.flatnonzero(diag.z < a).tolist(),
           "residuals_above": np.flatnonzero(diag.z > b).tolist(), "seed": args.seed}
    _write(args.out, json.dumps(out, indent=2))
    if args.qq:
        _write(args.qq, _qq_csv(diag.z))
    return EXIT_OK


PRESETS = {
    "table1": dict(n=400, reps=200),
    "table2": dict(n=400, reps=100),
}


def cmd_simulate(args) -> int:
    _require_seed(args)
    kw = dict(PRESETS.get(args.preset, {}))
    if args.n is not None:
        kw["n"] = args.n
    if args.reps is not None:
        kw["reps"] = args.reps
    kw["cml_replicates"] = args.cml_reps
    y_outs = [None]
    if args.preset == "table2" or args.yout:
        y_outs = args.yout or [0.0, 30.0, 180.0]
    results = []
    for y_out in y_outs:
        cont = None if y_out is None else Contamination(args.fraction, (3.0, 1.0, 0.0, 0.0, 0.0), y_out)
        cfg = SimConfig(seed=args.seed, contamination=cont, **kw)
        res = run_experiment(cfg, workers=args.workers)
        results.append(res)
        print(res.table())
        print()
        if args.raw:
            stem = Path(args.raw)
            path = stem if y_out is None else stem.with_name(f"{stem.stem}_yout{y_out:g}{stem.suffix}")
            _write(path, res.raw_csv())
    if args.figure:
        _write(args.figure, figure_csv(results))
    return EXIT_OK


def _add_data_args(p):
    p.add_argument("--family", default="nb", choices=["nb", "beta"])
    p.add_argument("--data", help="CSV file with a header row")
    p.add_argument("--response", help="response column of --data")
    p.add_argument("--covariates", help="comma-separated covariate columns of --data")
    p.add_argument("--freq", help="value,count file (or builtin:los_frequencies)")
    p.add_argument("--shift", type=float, default=0.0, help="subtract this from the response")
    p.add_argument("--zeta1", type=float, default=0.05)
    p.add_argument("--zeta2", type=float, default=0.95)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="-", help="output JSON path (default stdout)")
    p.add_argument("--qq", help="write sorted residuals vs uniform quantiles to this CSV")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robcml",
                                     description="Robust conditional ML for NB and Beta regression")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="robust fit with replicate-averaged conditional ML")
    _add_data_args(p)
    p.add_argument("--reps", type=int, default=30, help="jitter replicates")
    p.add_argument("--iterations", type=int, default=2)
    p.add_argument("--ml-only", action="store_true", help="plain maximum likelihood")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("diagnose", help="residuals, cutoffs and rejected observations")
    _add_data_args(p)
    p.add_argument("--report", help="fit report whose estimate is diagnosed (default: ML)")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("simulate", help="Monte Carlo comparison of ML, INI and CML")
    p.add_argument("--preset", choices=sorted(PRESETS), default="table1")
    p.add_argument("--yout", type=float, action="append",
                   help="outlier response (repeatable); implies contamination")
    p.add_argument("--fraction", type=float, default=0.1)
    p.add_argument("--n", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--cml-reps", type=int, default=3, help="jitter replicates per sample")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--raw", help="per-replication CSV path")
    p.add_argument("--figure", help="CSV of errors against y_out")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    warnings.simplefilter("default")
    try:
        return args.func(args)
    except RobCMLError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
