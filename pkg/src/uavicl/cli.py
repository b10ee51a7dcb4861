"""Command-line front end.

Subcommands mirror the experiment kinds: ``solve``, ``baseline``,
``sweep``, ``crlb-grid``, ``region``. Exit codes: 0 on success, 2 when the
scenario is infeasible, 1 on internal error.
"""

from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

from . import harness
from .gibbs import ScenarioInfeasibleError

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_INFEASIBLE = 2


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--scenario",
        default=str(harness.paper_scenario_path()),
        help="scenario JSON (default: bundled reference scenario)",
    )
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.add_argument("--trace", action="store_true", help="emit per-iteration trace CSV")
    p.add_argument("--threads", type=int, default=1, help="parallel sweep workers")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uavicl",
        description="Joint UAV placement and communication/positioning resource allocation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="run the annealed joint solver")
    _add_common(p)
    p.add_argument("--repetitions", type=int, default=1)

    p = sub.add_parser("baseline", help="run a benchmark method")
    p.add_argument("name", choices=["pso", "epa", "ucd"])
    _add_common(p)

    p = sub.add_parser("sweep", help="parameter sweeps")
    p.add_argument("what", choices=["pmax", "zeta", "users"])
    _add_common(p)
    p.add_argument(
        "--values",
        type=float,
        nargs="+",
        default=None,
        help="sweep points (pmax/zeta sweeps)",
    )

    p = sub.add_parser("crlb-grid", help="fourth-anchor CRLB maps (both schemes)")
    _add_common(p)

    p = sub.add_parser("region", help="emit per-user feasible-ellipse boundaries")
    _add_common(p)
    p.add_argument("--altitude", type=float, default=200.0, help="slice altitude in m")
    p.add_argument(
        "--pos-power",
        type=float,
        default=harness.BOUNDS_POWER_W,
        help="per-BS positioning power in W",
    )

    return parser


def _spec_from_args(args: argparse.Namespace) -> harness.ExperimentSpec:
    kind = {
        "solve": "solve",
        "baseline": "baseline",
        "crlb-grid": "crlb_grid",
        "region": "region",
        "sweep": {"pmax": "sweep_pmax", "zeta": "sweep_zeta", "users": "sweep_users"}[
            getattr(args, "what", "pmax")
        ],
    }[args.command]
    spec = harness.ExperimentSpec(
        kind=kind,
        scenario_path=args.scenario,
        output_dir=args.out,
        seed=args.seed,
        trace=args.trace,
        threads=args.threads,
        repetitions=getattr(args, "repetitions", 1),
        baseline=getattr(args, "name", None),
        region_altitude=getattr(args, "altitude", 200.0),
        region_pos_power=getattr(args, "pos_power", harness.BOUNDS_POWER_W),
    )
    values = getattr(args, "values", None)
    if values:
        if kind == "sweep_pmax":
            spec.pmax_values = tuple(values)
        elif kind == "sweep_zeta":
            spec.zeta_values = tuple(values)
    return spec


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        records = harness.run_experiment(_spec_from_args(args))
    except ScenarioInfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (harness.SchemaError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    ok = [r for r in records if r.summary.get("status") == "ok"]
    bad = [r for r in records if r.summary.get("status") != "ok"]
    for rec in records:
        print(rec.summary)
    if not ok and bad:
        return EXIT_INFEASIBLE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
