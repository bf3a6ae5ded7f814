"""Command-line interface: ``splitplot <subcommand> [options]``.

Every subcommand writes CSV to ``--out`` (atomically, through a temporary file
in the same directory) or to standard output.  Options may also come from a
flat ``key=value`` file given with ``--config``; command-line flags win.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
import tempfile
from typing import Callable, Optional, Sequence

from .design import CompletelyRandomizedSpec, SplitPlotSpec, randomize_cr, randomize_sp, write_assignment_csv
from .estimator import EstimationError, estimate, read_observed_csv
from .harness import METHODS, CoverageConfig, run_coverage
from .oracle import DEFAULT_CAP, EnumerationTooLarge, identity_checks
from .pom import BlockLayout, read_pom_csv, write_pom_csv
from .rng import make_stream
from .simgen import ADDITIVITY_TYPES, PO_TYPES, PomRecipe, all_cells, build_pom, parse_additivity, parse_po_type

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


def read_config(path: str) -> dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def write_output(text: str, out: Optional[str]) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
        return
    directory = os.path.dirname(os.path.abspath(out))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".splitplot-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, out)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _methods(value: str) -> tuple[str, ...]:
    return tuple(m.strip().upper() for m in value.split(",") if m.strip())


def _layout_args(p: argparse.ArgumentParser, plus: bool = True) -> None:
    p.add_argument("--W", type=int, help="number of whole-plots")
    p.add_argument("--M", type=int, help="sub-plots per whole-plot")
    if plus:
        p.add_argument("--W-plus", dest="W_plus", type=int, help="whole-plots on level +1 of A (default W/2)")
        p.add_argument("--M-plus", dest="M_plus", type=int, help="sub-plots on level +1 of B (default M/2)")


def _require(args, *names: str) -> None:
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _sp_spec(args) -> SplitPlotSpec:
    _require(args, "W", "M")
    W_plus = args.W_plus if args.W_plus is not None else args.W // 2
    M_plus = args.M_plus if args.M_plus is not None else args.M // 2
    return SplitPlotSpec(BlockLayout(args.W, args.M), W_plus, M_plus)


def _cr_spec(args, layout: BlockLayout) -> CompletelyRandomizedSpec:
    sizes = getattr(args, "arm_sizes", None)
    if sizes:
        return CompletelyRandomizedSpec(layout.N, tuple(int(s) for s in sizes.split(",")), layout)
    return CompletelyRandomizedSpec.balanced(layout.N, layout)


def cmd_gen_pom(args) -> int:
    _require(args, "po_type", "additivity", "W", "M")
    recipe = PomRecipe(args.po_type, args.additivity, BlockLayout(args.W, args.M), args.seed)
    buf = io.StringIO()
    write_pom_csv(build_pom(recipe), buf)
    write_output(buf.getvalue(), args.out)
    return EXIT_OK


def cmd_design(args) -> int:
    _require(args, "W", "M")
    rng = make_stream(args.seed)
    if args.design == "sp":
        assignment = randomize_sp(_sp_spec(args), rng)
    else:
        layout = BlockLayout(args.W, args.M)
        assignment = randomize_cr(_cr_spec(args, layout), rng)
    buf = io.StringIO()
    write_assignment_csv(assignment, buf)
    write_output(buf.getvalue(), args.out)
    return EXIT_OK


def cmd_estimate(args) -> int:
    _require(args, "data")
    data = read_observed_csv(args.data)
    method = (args.method or args.design).upper()
    spec = None
    if method == "SP":
        if args.W is None:
            args.W = data.layout.W
        if args.M is None:
            args.M = data.layout.M
        spec = _sp_spec(args)
        if spec.layout != data.layout:
            raise UsageError(f"data are {data.layout.W}x{data.layout.M}, options say {spec.W}x{spec.M}")
        if not data.assignment.satisfies(spec):
            raise UsageError("observed assignment is not a valid split-plot assignment for the given design")
    result = estimate(data, method, spec, args.alpha)
    buf = io.StringIO()
    fields = ("effect", "method", "tau_hat", "v_hat", "ci_lo", "ci_hi", "alpha")
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for row in result.rows():
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    write_output(buf.getvalue(), args.out)
    return EXIT_OK


def cmd_enumerate_check(args) -> int:
    _require(args, "pom")
    pom = read_pom_csv(args.pom)
    if args.W is not None and args.W != pom.layout.W or args.M is not None and args.M != pom.layout.M:
        raise UsageError("--W/--M do not match the POM")
    args.W, args.M = pom.layout.W, pom.layout.M
    spec = _sp_spec(args) if args.design == "sp" else _cr_spec(args, pom.layout)
    checks = identity_checks(pom, spec, args.cap)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("check", "error", "tolerance", "passed"))
    for c in checks:
        writer.writerow((c.name, repr(c.error), repr(c.tolerance), "pass" if c.passed else "FAIL"))
    write_output(buf.getvalue(), args.out)
    return EXIT_OK if all(c.passed for c in checks) else EXIT_FAILED


def _expand(values: Optional[str], universe: Sequence[str], parse: Callable[[str], str]) -> tuple[str, ...]:
    if values is None or values.strip().lower() == "all":
        return tuple(universe)
    return tuple(parse(v) for v in values.split(",") if v.strip())


def cmd_simulate_coverage(args) -> int:
    po_types = _expand(args.po_type, PO_TYPES, parse_po_type)
    additivities = _expand(args.additivity, ADDITIVITY_TYPES, parse_additivity)
    cells = tuple(c for c in all_cells() if c[0] in po_types and c[1] in additivities)
    config = CoverageConfig(
        cells=cells, W=args.W if args.W is not None else 40, M=args.M if args.M is not None else 40,
        r_A=args.r_A, r_B=args.r_B, reps=args.reps, alpha=args.alpha, seed=args.seed,
        methods=args.methods, workers=args.workers,
    )
    write_output(run_coverage(config).to_csv(), args.out)
    return EXIT_OK


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="splitplot", description="Randomization inference for 2x2 split-plot designs.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    subs = {}

    def add(name: str, func, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="key=value file supplying option defaults")
        p.add_argument("--out", help="output path (default: standard output)")
        p.set_defaults(func=func)
        subs[name] = p
        return p

    p = add("gen-pom", cmd_gen_pom, "generate a simulation POM as CSV")
    p.add_argument("--po-type", dest="po_type", help="potential-outcome type: " + ", ".join(PO_TYPES))
    p.add_argument("--additivity", help="additivity type: " + ", ".join(ADDITIVITY_TYPES))
    _layout_args(p, plus=False)
    p.add_argument("--seed", type=int, default=0)

    p = add("design", cmd_design, "emit a randomized treatment assignment")
    p.add_argument("--design", choices=("sp", "cr"), default="sp", type=str.lower)
    _layout_args(p)
    p.add_argument("--arm-sizes", dest="arm_sizes", help="comma-separated arm sizes for a CR design")
    p.add_argument("--seed", type=int, default=0)

    p = add("estimate", cmd_estimate, "estimate factorial effects from observed data")
    p.add_argument("--design", choices=("sp", "cr"), default="sp", type=str.lower)
    p.add_argument("--method", choices=METHODS, type=str.upper, help="analysis method (default follows --design)")
    _layout_args(p)
    p.add_argument("--data", help="CSV with whole_plot,sub_plot,treatment,y_obs")
    p.add_argument("--alpha", type=float, default=0.05)

    p = add("enumerate-check", cmd_enumerate_check, "verify exact identities by enumerating all assignments")
    p.add_argument("--design", choices=("sp", "cr"), default="sp", type=str.lower)
    _layout_args(p)
    p.add_argument("--arm-sizes", dest="arm_sizes", help="comma-separated arm sizes for a CR design")
    p.add_argument("--pom", help="POM CSV")
    p.add_argument("--cap", type=int, default=DEFAULT_CAP, help="maximum number of assignments")

    p = add("simulate-coverage", cmd_simulate_coverage, "Monte Carlo coverage of interval estimates")
    p.add_argument("--po-type", dest="po_type", help="comma-separated PO types or 'all' (default)")
    p.add_argument("--additivity", help="comma-separated additivity types or 'all' (default)")
    _layout_args(p, plus=False)
    p.add_argument("--r-A", dest="r_A", type=float, default=1.0)
    p.add_argument("--r-B", dest="r_B", type=float, default=1.0)
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--methods", type=_methods, default=METHODS, help="comma-separated subset of SP,CR")
    p.add_argument("--workers", type=int, default=1)
    return parser, subs


def _parse(argv: Sequence[str]) -> argparse.Namespace:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        raise UsageError("a subcommand is required")
    if args.config:
        sp = subs[args.command]
        known = {a.dest for a in sp._actions}
        values = read_config(args.config)
        unknown = set(values) - known - {"config", "out"}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        # string defaults pass through each option's type conversion on reparse
        sp.set_defaults(**values)
        args = parser.parse_args(argv)
    return args


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _parse(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except (UsageError, OSError) as exc:
        print(f"splitplot: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"splitplot: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, EstimationError, EnumerationTooLarge, OSError) as exc:
        print(f"splitplot: error: {exc}", file=sys.stderr)
        return EXIT_FAILED


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
