"""Command-line front end.

Exit codes: 0 success, 2 bad input (data, model spec, arguments), 3 numerical
failure. The summary goes to stdout; diagnostics go to stderr.
"""
import argparse
import json
import os
import sys
import warnings

import numpy as np

from . import numkit, simlab
from .ate import (drlearner_fit, drlearner_pseudo, eif_ate, eif_ate_variant, gformula_ate,
                  ipw_ate)
from .cmr import cmr_estimate, cmr_variant, single_source_cmr
from .data import load_csv
from .nuisance import WeightChoice, fit_nuisances

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

ATE_ESTIMATORS = ("eif", "ipw", "gformula", "pooled", "armwise")
CMR_ESTIMATORS = ("eif", "pooled", "armwise", "single")


class UsageError(ValueError):
    pass


def _weights(text):
    try:
        return WeightChoice.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _level(text):
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError("--ci must lie in (0, 1)")
    return v


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def build_parser():
    ap = argparse.ArgumentParser(
        prog="transport-meta",
        description="Transport trial treatment effects to a target population.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, need_input=True):
        if need_input:
            p.add_argument("--input", required=True, help="pooled CSV (g,s,a,y,x1..xp)")
        p.add_argument("--spec", help="JSON model spec")
        p.add_argument("--weights", type=_weights, default=WeightChoice(),
                       help="optimal, constant or custom:l1,l0")
        p.add_argument("--ci", type=_level, default=0.95, help="confidence level")
        p.add_argument("--seed", type=int, default=1)
        p.add_argument("--threads", type=_positive, default=1)
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("estimate-ate", help="target-population average treatment effect")
    common(p)
    p.add_argument("--estimator", choices=ATE_ESTIMATORS, default="eif")

    p = sub.add_parser("estimate-cmr", help="target-population causal mean ratio")
    common(p)
    p.add_argument("--estimator", choices=CMR_ESTIMATORS, default="eif")
    p.add_argument("--literal-divisor", action="store_true",
                   help="divide the one-step correction by log(init) instead of init")

    p = sub.add_parser("drlearner", help="linear CATE from DR-learner pseudo-outcomes")
    common(p)
    p.add_argument("--terms", default=None, help="comma-separated basis, default 1,x1..xp")

    p = sub.add_parser("simulate", help="Monte Carlo scenario grid")
    common(p, need_input=False)
    p.add_argument("--preset", choices=("table1", "table2", "table3"))
    p.add_argument("--reps", type=_positive, default=None)
    p.add_argument("--sizes", default="1250,5000", help="sample sizes for a preset")
    return ap


def _read_json(path):
    if path is None:
        return None
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read spec {path}: {exc}") from None


def _write(out, name, text):
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, name), "w", encoding="utf-8") as fh:
        fh.write(text)


def _dump(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _split_spec(spec):
    """Separate CLI-only keys from the nuisance-model spec."""
    spec = dict(spec or {})
    extra = {k: spec.pop(k) for k in ("effect_terms", "tau") if k in spec}
    if "tau" in extra:
        spec["support_tau"] = extra["tau"]
    return spec, extra


def _estimate_summary(report, args):
    lo, hi = report["ci"]
    lines = [f"{report['estimator']}  weights={args.weights}",
             f"psi_hat = {report['psi_hat']:.6g}",
             f"se      = {report['se']:.6g}" if report["se"] is not None else "se      = nan",
             f"{100 * args.ci:g}% CI = [{lo:.6g}, {hi:.6g}]" if lo is not None
             else "CI unavailable"]
    return "\n".join(lines) + "\n"


def cmd_estimate(args):
    mode = "ratio" if args.command == "estimate-cmr" else "difference"
    data = load_csv(args.input, mode=mode)
    spec, _ = _split_spec(_read_json(args.spec))
    nuis = fit_nuisances(data, spec)
    est = args.estimator
    if mode == "difference":
        if est == "eif":
            r = eif_ate(data, nuis, args.weights, args.ci)
        elif est == "ipw":
            r = ipw_ate(data, nuis, args.weights, args.ci)
        elif est == "gformula":
            r = gformula_ate(data, nuis.effect, args.ci)
        else:
            r = eif_ate_variant(data, nuis, est, args.ci)
    else:
        lit = args.literal_divisor
        if est == "eif":
            r = cmr_estimate(data, nuis, args.weights, args.ci, lit)
        elif est == "single":
            r = single_source_cmr(data, nuis, args.ci, lit)
        else:
            r = cmr_variant(data, nuis, est, args.ci, lit)
    report = r.to_json()
    report["n"] = data.n
    report["n_target"] = data.n1
    report["m"] = data.m
    report["weights"] = str(args.weights)
    summary = _estimate_summary(report, args)
    if args.out:
        _write(args.out, "report.json", _dump(report))
        _write(args.out, "summary.txt", summary)
    return summary


def cmd_drlearner(args):
    data = load_csv(args.input, mode="difference")
    spec, extra = _split_spec(_read_json(args.spec))
    terms = (args.terms.split(",") if args.terms
             else extra.get("effect_terms", ["1"] + [f"x{j + 1}" for j in range(data.p)]))
    nuis = fit_nuisances(data, spec)
    zeta = drlearner_pseudo(data, nuis, args.weights)
    fit = drlearner_fit(zeta, data.X, terms)
    se = np.sqrt(np.diag(fit.vcov))
    report = {"estimator": "drlearner", "terms": list(fit.terms),
              "coef": [float(c) for c in fit.coef], "se": [float(v) for v in se],
              "weights": str(args.weights), "n_pseudo": int(np.sum(~np.isnan(zeta)))}
    width = max(len(t) for t in fit.terms)
    summary = "".join(f"{t.ljust(width)}  {c: .6g}  ({v:.3g})\n"
                      for t, c, v in zip(fit.terms, fit.coef, se))
    if args.out:
        _write(args.out, "report.json", _dump(report))
        _write(args.out, "summary.txt", summary)
    return summary


def _grid(args):
    """Scenario cells and table layout from ``--preset`` or a grid file."""
    if args.preset:
        sizes = tuple(int(v) for v in args.sizes.split(","))
        cells = simlab.preset(args.preset, reps=args.reps or 1000, seed=args.seed, sizes=sizes)
        return cells, args.preset
    grid = _read_json(args.spec)
    if grid is None:
        raise UsageError("simulate needs --preset or --spec")
    try:
        cells = [simlab.ScenarioConfig.from_dict({"seed": args.seed, **c}) for c in grid["cells"]]
    except (KeyError, TypeError) as exc:
        raise UsageError(f"malformed grid spec: {exc}") from None
    if args.reps:
        cells = simlab.with_reps(cells, args.reps)
    layout = grid.get("layout", "table1" if cells[0].dgp.mode == "difference" else "table2")
    return cells, layout


def cmd_simulate(args):
    cells, layout = _grid(args)
    rows, failures = [], []
    for cfg in cells:
        res = simlab.run_scenario(cfg, threads=args.threads)
        rows.append(res.row)
        failures += [(cfg.label, cfg.n, rep, msg) for rep, msg in res.errors]
    csv_text, text = simlab.emit_table(rows, layout)
    cells_json = [{"config": c.to_dict(), "summary": vars(r)} for c, r in zip(cells, rows)]
    for label, n, rep, msg in failures:
        print(f"cell {label} n={n} rep {rep}: {msg}", file=sys.stderr)
    if args.out:
        _write(args.out, "table.csv", csv_text)
        _write(args.out, "table.txt", text)
        _write(args.out, "cells.json", _dump(cells_json))
    return text


COMMANDS = {"estimate-ate": cmd_estimate, "estimate-cmr": cmd_estimate,
            "drlearner": cmd_drlearner, "simulate": cmd_simulate}


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            summary = COMMANDS[args.command](args)
    except numkit.NumericError as exc:
        where = getattr(exc, "nuisance", None)
        print(f"numerical failure{f' in {where} model' if where else ''}: {exc}",
              file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        where = getattr(exc, "nuisance", None)
        print(f"input error{f' in {where} model' if where else ''}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    sys.stdout.write(summary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
