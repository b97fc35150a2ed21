"""Command-line interface.

Subcommands: ``test`` (one hypothesis), ``ci`` (test inversion),
``diagnose`` (first-stage F statistics) and ``simulate size|power``
(Monte Carlo experiments).

Exit codes: 0 on success (whatever the test decides), 1 for usage errors,
2 for data or numerical errors. When ``--out`` is given, the result is
written there and a one-line summary goes to standard error, so standard
output stays empty.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import fields

import numpy as np

from . import __version__
from .data import CsvSchema, load_csv, partial_out_controls, validate
from .diagnostics import Flavor, first_stage_f
from .exceptions import ClusterIVError
from .inference import METHODS, invert_confidence_set, make_grid, run_test
from .jackknife import Estimator, KernelChoice
from .montecarlo import METHOD_NAMES, McConfig, power_experiment, size_experiment

SCHEMA_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _csv_list(text):
    return [s.strip() for s in text.split(",") if s.strip()]


def _float_list(text):
    try:
        return [float(v) for v in _csv_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _int_list(text):
    try:
        return [int(v) for v in _csv_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _range(text):
    parts = text.split(":")
    try:
        lo, hi, step = (float(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo:hi:step, got {text!r}")
    return lo, hi, step


def _data_args(p):
    p.add_argument("--data", help="CSV file with a header row")
    p.add_argument("--y", help="outcome column")
    p.add_argument("--x", type=_csv_list, help="endogenous regressor column(s)")
    p.add_argument("--z", type=_csv_list, help="instrument columns")
    p.add_argument("--controls", type=_csv_list, default=[], help="exogenous control columns")
    p.add_argument("--cluster", help="cluster identifier column")


def _output_args(p, formats, default):
    p.add_argument("--out", help="write the result to this file")
    p.add_argument("--format", choices=formats, default=default)


def _method_args(p):
    p.add_argument("--method", choices=METHODS, default="clj-ar")
    p.add_argument("--kernel", choices=[c.value for c in KernelChoice], default="plain")
    p.add_argument("--estimator", choices=[c.value for c in Estimator], default="plain")
    p.add_argument("--alpha", type=float, default=0.05)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clusteriv", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="JSON file of option defaults; explicit flags win")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("test", help="test H0: beta = b")
    _data_args(t)
    _method_args(t)
    t.add_argument("--beta", type=_float_list, default=None, help="hypothesised value(s)")
    _output_args(t, ("json", "text"), "json")

    c = sub.add_parser("ci", help="confidence set by test inversion")
    _data_args(c)
    _method_args(c)
    c.add_argument("--grid", type=_range, default=(-2.0, 2.0, 0.005), help="lo:hi:step")
    c.add_argument("--refine", action=argparse.BooleanOptionalAction, default=True)
    c.add_argument("--dump-grid", help="write per-grid-point decisions to this CSV")
    _output_args(c, ("json", "text"), "json")

    d = sub.add_parser("diagnose", help="first-stage F statistics")
    _data_args(d)
    d.add_argument("--flavor", choices=[f.value for f in Flavor] + ["all"], default="all")
    _output_args(d, ("json", "text"), "json")

    s = sub.add_parser("simulate", help="Monte Carlo size or power experiment")
    s.add_argument("experiment", choices=("size", "power"))
    defaults = McConfig()
    for name in ("n", "G", "gamma", "zeta", "rho", "h", "R", "beta0", "alpha"):
        s.add_argument(f"--{name}", type=type(getattr(defaults, name)),
                       default=getattr(defaults, name))
    s.add_argument("--k", type=_int_list, default=None,
                   help="instrument counts (size) or a single count (power)")
    s.add_argument("--methods", type=_csv_list, default=["clj-ar", "clj-score", "clmi-ar"])
    s.add_argument("--reps", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--beta-grid", type=_range, default=(-1.0, 1.0, 0.1), help="lo:hi:step")
    _output_args(s, ("csv", "json"), "csv")
    return parser


def _apply_config(parser, argv):
    """Re-parse ``argv`` with defaults taken from the ``--config`` file."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        with open(args.config, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}")
    if not isinstance(cfg, dict):
        raise UsageError("the config file must hold a JSON object")
    sub = parser._subparsers._group_actions[0].choices.get(args.command)
    target = sub if sub is not None else parser
    known = {a.dest: a for a in target._actions}
    conv = {}
    for key, val in cfg.items():
        dest = key.replace("-", "_")
        if dest not in known:
            raise UsageError(f"unknown config key {key!r}")
        action = known[dest]
        if action.type is not None and isinstance(val, str):
            try:
                val = action.type(val)
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"config key {key!r}: {exc}")
        elif action.type in (_csv_list, _int_list, _float_list) and not isinstance(val, list):
            val = [val]
        elif action.type is _range and isinstance(val, list):
            val = tuple(float(v) for v in val)
        conv[dest] = val
    target.set_defaults(**conv)
    return parser.parse_args(argv)


def _load_design(args):
    missing = [f"--{n}" for n in ("data", "y", "x", "z", "cluster") if not getattr(args, n)]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join(missing)}")
    schema = CsvSchema(args.y, tuple(args.x), tuple(args.z), args.cluster, tuple(args.controls))
    design = load_csv(args.data, schema)
    report = validate(design)
    notes = list(report.warnings)
    many = getattr(args, "kernel", None) == KernelChoice.MANY_CONTROLS.value
    if design.W is not None and not many:
        design = partial_out_controls(design)
    return design, report, notes


def _emit(args, payload, text):
    """Write ``payload`` (str) to --out or stdout, and the summary line."""
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(payload)
        print(text, file=sys.stderr)
    else:
        sys.stdout.write(payload if args.format != "text" else text + "\n")


def _envelope(command, result, **extra):
    return json.dumps({"schema_version": SCHEMA_VERSION, "command": command,
                       "result": result, **extra}, indent=2, default=_jsonable) + "\n"


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float):
        return obj
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def _clean(obj):
    """Replace non-finite floats by None so the JSON is strict."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)) and not np.isfinite(obj):
        return None
    return obj


def cmd_test(args) -> int:
    design, report, notes = _load_design(args)
    beta = args.beta if args.beta is not None else [0.0] * design.p
    out = run_test(design, beta, args.method, args.alpha,
                   KernelChoice(args.kernel), Estimator(args.estimator))
    result = out.to_dict()
    result["warnings"] = notes + result["warnings"]
    text = (f"{out.method}: beta={out.beta} statistic={out.statistic:.6g} "
            f"threshold={out.threshold:.6g} p={out.p_value:.4g} "
            f"{'reject' if out.reject else 'do not reject'} at alpha={out.alpha}")
    _emit(args, _envelope("test", _clean(result), validation=_clean(report.to_dict())), text)
    return EXIT_OK


def cmd_ci(args) -> int:
    design, report, notes = _load_design(args)
    cs = invert_confidence_set(design, args.method, args.alpha, args.grid, args.refine,
                               KernelChoice(args.kernel), Estimator(args.estimator))
    result = cs.to_dict()
    if cs.is_empty:
        result["warnings"] = result["warnings"] + ["empty confidence set"]
    result["warnings"] = notes + result["warnings"]
    if args.dump_grid:
        with open(args.dump_grid, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("beta", "statistic", "p_value", "reject"))
            for p in cs.points:
                w.writerow((f"{p['beta']:.10g}",
                            "" if p["statistic"] is None else f"{p['statistic']:.10g}",
                            "" if p["p_value"] is None else f"{p['p_value']:.10g}",
                            int(p["reject"])))
    parts = [f"[{lo:.6g}, {hi:.6g}]" for lo, hi in cs.intervals]
    text = (f"{cs.method} {100 * (1 - cs.alpha):g}% confidence set: "
            + (" U ".join(parts) if parts else "empty"))
    _emit(args, _envelope("ci", _clean(result), validation=_clean(report.to_dict())), text)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    design, report, notes = _load_design(args)
    flavors = list(Flavor) if args.flavor == "all" else [Flavor(args.flavor)]
    if design.p != 1 and args.flavor == "all":
        flavors = [Flavor.HOMOSKEDASTIC]
    reports = [first_stage_f(design, f).to_dict() for f in flavors]
    text = "; ".join(
        f"{r['flavor']} F = {'inf' if r['infinite'] else format(r['value'], '.6g')}"
        for r in reports
    )
    result = {"statistics": reports, "warnings": notes}
    _emit(args, _envelope("diagnose", _clean(result), validation=_clean(report.to_dict())), text)
    return EXIT_OK


def cmd_simulate(args) -> int:
    unknown = [m for m in args.methods if m not in METHOD_NAMES]
    if unknown:
        raise UsageError(f"unknown method(s) {unknown}; choose from {list(METHOD_NAMES)}")
    if args.threads < 1:
        raise UsageError("--threads must be at least 1")
    ks = args.k or [McConfig().k]
    if args.experiment == "power" and len(ks) != 1:
        raise UsageError("power experiments take a single --k")
    reps = args.reps if args.reps is not None else (2000 if args.experiment == "size" else 500)
    names = {f.name for f in fields(McConfig)}
    params = {n: getattr(args, n) for n in names if hasattr(args, n)}
    try:
        config = McConfig(**{**params, "k": ks[0], "reps": reps, "base_seed": args.seed})
        if args.experiment == "size":
            table = size_experiment(config, args.methods, ks, threads=args.threads)
        else:
            grid = [float(b) for b in make_grid(*args.beta_grid)]
            table = power_experiment(config, args.methods, grid, threads=args.threads)
    except ValueError as exc:
        if isinstance(exc, ClusterIVError):
            raise
        raise UsageError(str(exc))
    payload = table.to_csv() if args.format == "csv" else table.to_json() + "\n"
    text = f"{args.experiment} experiment: {len(table.rows)} rows, {reps} reps, seed {args.seed}"
    _emit(args, payload, text)
    return EXIT_OK


COMMANDS = {"test": cmd_test, "ci": cmd_ci, "diagnose": cmd_diagnose, "simulate": cmd_simulate}


def _join_ranges(argv):
    """Attach ``lo:hi:step`` values to their flag so a leading minus is not an option."""
    out, it = [], iter(argv)
    for tok in it:
        if tok in ("--grid", "--beta-grid"):
            nxt = next(it, None)
            out.append(tok if nxt is None else f"{tok}={nxt}")
        else:
            out.append(tok)
    return out


def main(argv=None) -> int:
    parser = build_parser()
    argv = _join_ranges(sys.argv[1:] if argv is None else list(argv))
    try:
        args = _apply_config(parser, argv)
        if args.command is None:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ClusterIVError, ValueError, ArithmeticError, np.linalg.LinAlgError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
