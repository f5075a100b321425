"""Command-line interface: ``psdetect <command> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from ._parallel import default_workers
from .discrete import SelectionFitError, estimate_unit_z, fit_selection, read_areal_csv, run_discrete_test, write_areal_csv
from .latent import TRANSFORMS, DegenerateMarksError, KrigingFitError, fit_kriging
from .pointproc import (
    InfeasibleHardcoreError,
    IntensityFitError,
    fit_hardcore,
    fit_intensity,
    read_points_csv,
    write_points_csv,
)
from .pstest import MonteCarloAbort, TestConfig, run_nn_test, run_residual_test
from .randfield import read_grid_csv
from .simstudy import ExperimentSpec, SpecError, run_experiment, simulate_dataset

MIN_POINTS = 10
_ALT = {"pos": "positive-ps", "neg": "negative-ps", "two": "two-sided"}


class UsageError(Exception):
    """Bad input; reported without a traceback and exit status 2."""


def _k_list(text):
    try:
        ks = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("K values must be positive integers")
    return ks


def _add_test_flags(p):
    p.add_argument("--input", required=True, help="input CSV")
    p.add_argument("--k", type=_k_list, default=[1, 5, 10], help="comma-separated K values (default 1,5,10)")
    p.add_argument("--m", type=int, default=19, help="Monte Carlo replicates (>= 19)")
    p.add_argument("--alt", choices=sorted(_ALT), default="two", help="alternative hypothesis")
    p.add_argument("--fix-n", action=argparse.BooleanOptionalAction, default=True, help="condition replicates on n")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--threads", type=int, default=None, help="worker processes (default: available cores)")


def build_parser():
    parser = argparse.ArgumentParser(prog="psdetect", description="Monte Carlo tests for preferential sampling.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("test-geostat", help="test marked point data")
    _add_test_flags(g)
    g.add_argument("--covariates", nargs="*", default=[], help="covariate lattice CSV files")
    g.add_argument("--statistic", choices=["nn", "residual"], default="nn")
    g.add_argument("--null", choices=["ipp", "hardcore"], default="ipp", help="null sampling process")
    g.add_argument("--transform", choices=TRANSFORMS, default="identity", help="mark transform before kriging")

    a = sub.add_parser("test-areal", help="test areal unit data")
    _add_test_flags(a)
    a.add_argument("--covariates", default="", help="selection covariates, e.g. w1,x1")
    a.add_argument("--use-x", action="store_true", help="x covariates enter the kriging trend")
    a.add_argument("--transform", choices=TRANSFORMS, default="identity")

    s = sub.add_parser("simstudy", help="run a simulation experiment from a JSON spec")
    s.add_argument("--spec", required=True)
    s.add_argument("--fast", action="store_true", help="50 replicates")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=".")
    s.add_argument("--threads", type=int, default=None)

    e = sub.add_parser("make-example", help="write a synthetic dataset")
    e.add_argument("--kind", choices=["geostat", "areal"], default="geostat")
    e.add_argument("--gamma", type=float, default=2.0)
    e.add_argument("--n", type=int, default=150, help="points (geostat)")
    e.add_argument("--rho-z", type=float, default=0.2)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True, help="output CSV path")
    return parser


# ---------------------------------------------------------------- reports


def _fmt_p(p):
    return "NA" if not np.isfinite(p) else f"{p:.3f}"


def _write_reports(out, reports, variant_names, extra_meta):
    out.mkdir(parents=True, exist_ok=True)
    payload = reports[0].to_dict() if len(reports) == 1 else {"reports": [r.to_dict() for r in reports]}
    payload["meta"] = extra_meta
    (out / "report.json").write_text(json.dumps(payload, indent=2) + "\n")

    lines = ["# Preferential sampling test", ""]
    for key, val in extra_meta.items():
        lines.append(f"- {key}: {val}")
    rep0 = reports[0]
    cfg = rep0.config
    lines += [
        f"- statistic: {cfg.statistic}",
        f"- alternative: {cfg.alternative}",
        f"- Monte Carlo replicates: {cfg.m} (fix_n={cfg.fix_n}, seed={cfg.seed})",
        f"- skipped replicates: {sum(r.skipped for r in reports)}",
        "",
    ]
    header = ["variant", "t"] + rep0.labels
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "---|" * len(header))
    for name, rep in zip(variant_names, reports):
        for ti, t in enumerate(rep.times):
            cells = [name, str(t)] + [_fmt_p(p) for p in rep.p_values[ti]]
            lines.append("| " + " | ".join(cells) + " |")
    lines += ["", f"Bonferroni min-p global value: {min(r.global_p for r in reports):.3f}", ""]
    lines.append("P-values are pointwise per K and time index and are not adjusted for multiple testing.")
    (out / "report.md").write_text("\n".join(lines) + "\n")

    with (out / "plotdata.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "t", "label", "k", "rho_obs", "p_value"])
        for name, rep in zip(variant_names, reports):
            for ti, t in enumerate(rep.times):
                for j, lbl in enumerate(rep.labels):
                    k = lbl.split("=")[1] if lbl.startswith("K=") else ""
                    w.writerow([name, t, lbl, k, repr(float(rep.rho_obs[ti, j])), repr(float(rep.p_values[ti, j]))])


def _config(args, statistic="nn"):
    try:
        return TestConfig(
            k_values=tuple(args.k) if statistic == "nn" else (1,),
            m=args.m,
            statistic=statistic,
            alternative=_ALT[args.alt],
            fix_n=args.fix_n,
            seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _workers(args):
    return default_workers() if args.threads is None else max(1, args.threads)


# ---------------------------------------------------------------- commands


def cmd_test_geostat(args):
    try:
        patterns = read_points_csv(args.input)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    covs = []
    for path in args.covariates:
        try:
            covs.append(read_grid_csv(path))
        except (OSError, ValueError) as exc:
            raise UsageError(str(exc)) from None
    covs = tuple(covs)
    config = _config(args, args.statistic)
    models, nulls = [], []
    for pat in patterns:
        if pat.n < MIN_POINTS:
            raise UsageError(
                f"time index {pat.time_index} has {pat.n} points; at least {MIN_POINTS} are needed "
                "for the null fits and nearest-neighbour statistics to be meaningful"
            )
        if pat.marks is None or not np.all(np.isfinite(pat.marks)):
            raise UsageError(f"time index {pat.time_index}: every point needs a mark")
        try:
            config.check_pattern(pat.n)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        try:
            km = fit_kriging(pat, covs, args.transform)
        except KrigingFitError as exc:
            if exc.best is None:
                raise
            km = exc.best
            print(f"warning: t={pat.time_index}: {exc}; using the best parameters found", file=sys.stderr)
        except (DegenerateMarksError, ValueError) as exc:
            raise UsageError(f"time index {pat.time_index}: {exc}") from None
        models.append(km)
        nulls.append(fit_intensity(pat, covs) if args.null == "ipp" else fit_hardcore(pat, covs))
    run = run_nn_test if args.statistic == "nn" else run_residual_test
    report = run(patterns, models, nulls, config, workers=_workers(args))
    variant = f"{args.statistic.upper()}-MC ({args.null}{', covariates' if covs else ''})"
    meta = {"input": str(args.input), "null": args.null, "transform": args.transform, "n_points": [p.n for p in patterns]}
    _write_reports(Path(args.out), [report], [variant], meta)
    print(f"global p = {report.global_p:.3f}; outputs in {args.out}")
    return 0


def cmd_test_areal(args):
    try:
        pops = read_areal_csv(args.input)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    include = [c.strip() for c in args.covariates.split(",") if c.strip()]
    config = _config(args)
    zs, models = [], []
    for pop in pops:
        if pop.n_selected < MIN_POINTS:
            raise UsageError(f"time index {pop.time_index} has {pop.n_selected} selected units; at least {MIN_POINTS} needed")
        try:
            config.check_pattern(pop.n_selected)
            z, _ = estimate_unit_z(pop, args.transform, use_x=args.use_x)
        except KrigingFitError as exc:
            if exc.best is None:
                raise
            z, _ = estimate_unit_z(pop, args.transform, model=exc.best)
        except ValueError as exc:
            raise UsageError(f"time index {pop.time_index}: {exc}") from None
        zs.append(z)
    try:
        models = fit_selection(pops, include)
    except (SelectionFitError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    report = run_discrete_test(pops, zs, models, config, workers=_workers(args))
    variant = "NN-MC (logistic" + (", " + ",".join(include) if include else "") + ")"
    meta = {"input": str(args.input), "selection": models.to_dict(), "n_selected": [p.n_selected for p in pops]}
    _write_reports(Path(args.out), [report], [variant], meta)
    print(f"global p = {report.global_p:.3f}; outputs in {args.out}")
    return 0


def cmd_simstudy(args):
    try:
        spec = ExperimentSpec.from_json(Path(args.spec).read_text())
    except OSError as exc:
        raise UsageError(str(exc)) from None
    if args.fast:
        spec = spec.fast()
    result = run_experiment(spec, args.seed, workers=_workers(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(result.to_csv())
    (out / "results.json").write_text(result.to_json() + "\n")
    print(result.to_csv(), end="")
    return 0


def _example_areal(gamma, seed, side=10):
    from .discrete import ArealPopulation
    from .randfield import MaternParams, simulate_field

    rng = np.random.default_rng(seed)
    z = simulate_field(MaternParams(1.0, 1.0, 0.5), 64, rng)
    c = (np.arange(side) + 0.5) / side
    cx, cy = np.meshgrid(c, c, indexing="ij")
    cent = np.column_stack([cx.ravel(), cy.ravel()])
    zbar = z(cent)
    w = rng.standard_normal(cent.shape[0])
    eta = 0.5 * w + gamma * zbar
    eta += np.log(0.5) - np.median(eta)
    sel = rng.random(cent.shape[0]) < 1 / (1 + np.exp(-eta))
    marks = np.where(sel, zbar + 0.1 * rng.standard_normal(cent.shape[0]), np.nan)
    return ArealPopulation(
        tuple(f"u{i:03d}" for i in range(cent.shape[0])), cent, np.full(cent.shape[0], 1 / side**2), sel, marks, w[:, None]
    )


def cmd_make_example(args):
    if args.kind == "geostat":
        spec = ExperimentSpec(n=args.n, gamma=args.gamma, rho_z=args.rho_z, replicates=50)
        pattern, _, _ = simulate_dataset(spec, np.random.default_rng(args.seed))
        write_points_csv(pattern, args.out)
    else:
        write_areal_csv(_example_areal(args.gamma, args.seed), args.out)
    print(f"wrote {args.out}")
    return 0


COMMANDS = {
    "test-geostat": cmd_test_geostat,
    "test-areal": cmd_test_areal,
    "simstudy": cmd_simstudy,
    "make-example": cmd_make_example,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, SpecError) as exc:
        print(f"psdetect: error: {exc}", file=sys.stderr)
        return 2
    except (MonteCarloAbort, IntensityFitError, InfeasibleHardcoreError, KrigingFitError) as exc:
        print(f"psdetect: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
