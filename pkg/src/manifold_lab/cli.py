"""``manifold-lab`` command line.

Exit codes: 0 when every asserted property holds, 1 when a property fails
(the report is still written), 2 for usage, input or I/O errors.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from pathlib import Path

from .divergence import jsd, read_grid
from .experiments import EXPERIMENTS, RUNNERS, ConfigError, default_config, load_config, write_report
from .transport import SolverError, read_point_cloud, wasserstein

OUT_ENV = "MANIFOLD_LAB_OUT"
DEFAULT_OUT = "manifold_lab_out"

POINT_FORMAT = """point-cloud CSV: header x1,...,xn[,weight], then one point per row;
weights are normalised, missing weights mean uniform."""

GRID_FORMAT = """grid file: first line '# box=lo1:hi1,...;shape=s1,...', then one
cell mass per line in row-major order; masses must sum to 1."""

CONFIG_FORMAT = """config file (INI): a [{name}] section with 'key = value' lines, plus
optional [manifold NAME] sections (chart_id, k, n, domain, chart params).
Lists are comma separated; seeds accept ranges such as 0-9.  Keys and defaults:
{keys}
  seed = 0 (base seed, overridden by --seed)
  output = (directory, overridden by --out)
Outputs: <out>/<name>.csv, <out>/<name>_*.csv, <out>/<name>_verdicts.csv and,
with --svg, <out>/<name>.svg."""


def fmt(x: float) -> str:
    """Shortest round-trip repr, dropping a trailing '.0'."""
    x = float(x)
    if not math.isfinite(x):
        return repr(x)
    s = repr(x)
    return s[:-2] if s.endswith(".0") else s


def _config_help(name: str) -> str:
    from .experiments.config import _SEEDS_DEFAULT

    keys = [f"  {k} = {d}" for k, (_, d) in EXPERIMENTS[name].items()]
    keys.append(f"  seeds = {_SEEDS_DEFAULT[name]}")
    return CONFIG_FORMAT.format(name=name, keys="\n".join(keys))


def build_parser() -> argparse.ArgumentParser:
    fmt_cls = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="manifold-lab", description="Optimal transport, JSD and support-overlap experiments.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("ot", help="Wasserstein distance between two point clouds", epilog=POINT_FORMAT, formatter_class=fmt_cls)
    p.add_argument("a", help="source point-cloud CSV")
    p.add_argument("b", help="target point-cloud CSV")
    p.add_argument("--p", type=int, choices=(1, 2), default=2, help="order of the distance (default: 2)")
    p.add_argument("--ground", choices=("euclidean", "l1"), default="euclidean", help="ground metric (default: euclidean)")
    p.add_argument("--method", choices=("exact", "sinkhorn"), default="exact", help="solver (default: exact)")
    p.add_argument("--epsilon", type=float, default=None, help="Sinkhorn regularisation (default: 1%% of the median cost)")

    p = sub.add_parser("jsd", help="Jensen-Shannon divergence between two grid densities", epilog=GRID_FORMAT, formatter_class=fmt_cls)
    p.add_argument("a", help="first grid file")
    p.add_argument("b", help="second grid file")

    helps = {
        "mcs-sweep": "overlap versus JSD along a nested family",
        "translate-density": "small translations that destroy positive alignment",
        "grad-audit": "closed-form gradients against finite differences",
        "toy-train": "gradient descent on a multi-mode target",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, epilog=_config_help(name), formatter_class=fmt_cls)
        p.add_argument("--config", help="INI config file (default: built-in settings)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config field; repeatable")
        p.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./{DEFAULT_OUT})")
        p.add_argument("--seed", type=int, help="base seed; beats the config value (default: 0)")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for independent runs (default: 1)")
        p.add_argument("--svg", action="store_true", help="also write an SVG figure")
    return parser


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    return out


def _run_experiment(args) -> int:
    overrides = _overrides(args.set)
    if args.config:
        cfg = load_config(args.config, args.command, overrides)
    else:
        cfg = default_config(args.command, **overrides)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    out = Path(args.out or cfg.output or os.environ.get(OUT_ENV) or DEFAULT_OUT)
    out.mkdir(parents=True, exist_ok=True)
    report = RUNNERS[args.command](cfg, jobs=args.jobs)
    files = write_report(report, out / f"{args.command}.csv", "csv")
    if args.svg:
        files += write_report(report, out / f"{args.command}.svg", "svg")
    print(f"{args.command}  config {report.config_hash}  seed {cfg.seed}")
    for v in report.verdicts:
        print(f"{'PASS' if v.passed else 'FAIL'}  {v.property}: observed {fmt(v.observed)}, required {v.tolerance}")
    for f in files:
        print(f"wrote {f}")
    return 0 if report.passed else 1


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "ot":
            a, b = read_point_cloud(args.a), read_point_cloud(args.b)
            kw = {} if args.epsilon is None else {"epsilon": args.epsilon}
            value = wasserstein(a, b, args.p, args.ground, args.method, **kw)
            print(f"W{args.p} = {fmt(value)}")
            return 0
        if args.command == "jsd":
            print(f"JSD = {fmt(jsd(read_grid(args.a), read_grid(args.b)))}")
            return 0
        return _run_experiment(args)
    except (ValueError, OSError, SolverError) as exc:
        print(f"manifold-lab {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
