"""
CLI entrypoint for the Lorenz time-average bounds project.

Commands:
- bound       verified bound on one mean moment
- certify     build and check a built-in certificate (z2, z3, xy3)
- verify      exact check of a certificate file
- average     chaotic long-time averages
- orbit       periodic orbit ("+-" or "++-") and its averages
- relations   exact relations between mean moments
- region      where the built-in certificates exist
- report      summary table of means and bounds

Examples:
    python src/main.py bound --moment y2 --degree 4

    python src/main.py certify z3 --at-r 28 --certificate-out data/results/z3_r28.json

    python src/main.py verify data/results/z3_r28.json

    python src/main.py average --moments z y4 --t-total 1e5

    python src/main.py region --beta-min 0.02 --beta-max 11 --count 40 --csv data/results/region.csv
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict

from dotenv import load_dotenv

from cli_utils import default_output_path, fail, format_table, ok, progress_line, validate_setup, warn
from lorenz import BUILTIN_CERTIFICATES, STANDARD_MOMENTS, parse_moment
from polyalg import as_rational
from utils import DEFAULT_CONFIG_PATH, DEFAULT_REPORT_CONFIG_PATH, load_config, load_yaml, results_dir, write_report


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Bounds on long-time averages in the Lorenz system.")
    subparsers = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config",
        type=Path,
        default=None,
        help=f"YAML file merged over {DEFAULT_CONFIG_PATH}.",
    )
    common.add_argument(
        "--output",
        type=Path,
        default=None,
        help="Report JSON path. Defaults to $LORENZ_BOUNDS_RESULTS_DIR/<command>_<timestamp>.json",
    )
    common.add_argument("--beta", type=str, default=None, help="Override beta, e.g. 8/3.")
    common.add_argument("--sigma", type=str, default=None, help="Override sigma.")
    common.add_argument("--r", type=str, default=None, help="Override r ('symbolic' keeps it a variable).")
    common.add_argument("--log-level", type=str, default=None, help="DEBUG, INFO, WARNING, ...")
    common.add_argument("-v", "--verbose", action="store_true", help="Same as --log-level INFO.")
    common.add_argument(
        "--dry-run",
        action="store_true",
        help="Validate packages and config, then exit without computing anything.",
    )

    p_bound = subparsers.add_parser("bound", parents=[common], help="Verified bound on one mean moment.")
    p_bound.add_argument("--moment", type=str, required=True, help="Moment such as z, y2, x2z, xy3.")
    p_bound.add_argument("--degree", type=int, required=True, help="Degree of V (0 for no V).")
    p_bound.add_argument("--sense", choices=["upper", "lower"], default="upper")
    p_bound.add_argument("--rescale", type=str, default=None, help="State scale s in x = s x' (default from config).")
    p_bound.add_argument("--export-problem", type=Path, default=None, help="Write the SDP as problem.json.")
    p_bound.add_argument("--solution-out", type=Path, default=None, help="Write the solver result with its trace.")
    p_bound.add_argument("--certificate-out", type=Path, default=None, help="Write the rational certificate.")

    p_certify = subparsers.add_parser("certify", parents=[common], help="Build and verify a built-in certificate.")
    p_certify.add_argument("name", choices=list(BUILTIN_CERTIFICATES))
    p_certify.add_argument("--gamma", type=str, nargs=2, default=None, help="z3 free entries gamma1 gamma2.")
    p_certify.add_argument("--at-r", type=str, default=None, help="Specialise the certificate at this r.")
    p_certify.add_argument("--certificate-out", type=Path, default=None)

    p_verify = subparsers.add_parser("verify", parents=[common], help="Exact check of a certificate file.")
    p_verify.add_argument("certificate", type=Path)

    p_average = subparsers.add_parser("average", parents=[common], help="Chaotic long-time averages.")
    p_average.add_argument("--moments", nargs="+", default=None, help="Defaults to the eighteen standard moments.")
    p_average.add_argument("--t-total", type=float, default=None)

    p_orbit = subparsers.add_parser("orbit", parents=[common], help="Periodic orbit and its averages.")
    p_orbit.add_argument("--symbols", choices=["+-", "++-"], default="+-")
    p_orbit.add_argument("--moments", nargs="+", default=None)
    p_orbit.add_argument("--csv", type=Path, default=None, help="Write the sampled orbit as CSV.")

    p_rel = subparsers.add_parser("relations", parents=[common], help="Exact relations between mean moments.")
    p_rel.add_argument("--averages", type=Path, default=None, help="average/orbit report to check the relations on.")
    p_rel.add_argument("--param", choices=["r", "rho"], default="r")

    p_region = subparsers.add_parser("region", parents=[common], help="Where the built-in certificates exist.")
    p_region.add_argument("--beta-min", type=str, default="1/10")
    p_region.add_argument("--beta-max", type=str, default="11")
    p_region.add_argument("--count", type=int, default=12)
    p_region.add_argument("--csv", type=Path, default=None)
    p_region.add_argument("--limits", action="store_true", help="Also locate the z3 beta limits and gamma2 range.")

    p_report = subparsers.add_parser("report", parents=[common], help="Summary table of means and bounds.")
    p_report.add_argument(
        "--report-config",
        type=Path,
        default=DEFAULT_REPORT_CONFIG_PATH,
        help="Rows, degrees and horizon for the table.",
    )

    return parser


def configure_logging(args: argparse.Namespace) -> None:
    level = args.log_level or os.environ.get("LORENZ_BOUNDS_LOG_LEVEL") or ("INFO" if args.verbose else "WARNING")
    logging.basicConfig(stream=sys.stderr, level=level.upper(), format="[%(name)s] %(message)s")


def resolve_output_path(output: Path | None, label: str) -> Path:
    if output is not None:
        return output
    base = results_dir()
    base.mkdir(parents=True, exist_ok=True)
    return default_output_path(base, label)


def preflight(config_path: Path) -> bool:
    problems = validate_setup(config_path)
    if problems:
        print(fail("Preflight checks failed:"), file=sys.stderr)
        for p in problems:
            print(f"  - {p}", file=sys.stderr)
        return False
    print(ok("Preflight checks passed (packages + config)."))
    return True


def run_config(args: argparse.Namespace):
    from run_bounds import RunConfig

    cfg = load_config(args.config)
    system = dict(cfg.get("system") or {})
    for key in ("beta", "sigma", "r"):
        if getattr(args, key, None) is not None:
            system[key] = getattr(args, key)
    cfg["system"] = system
    return RunConfig.from_config(cfg)


def _moments(names):
    return [parse_moment(m) for m in names] if names else list(STANDARD_MOMENTS)


def dispatch(args: argparse.Namespace) -> Dict[str, Any]:
    import run_bounds

    if args.command == "verify":
        return run_bounds.cmd_verify(args.certificate)

    cfg = run_config(args)
    if args.command == "bound":
        return run_bounds.cmd_bound(
            cfg,
            parse_moment(args.moment),
            args.degree,
            args.sense,
            as_rational(args.rescale) if args.rescale else None,
            args.export_problem,
            args.solution_out,
            args.certificate_out,
        )
    if args.command == "certify":
        return run_bounds.cmd_certify(
            cfg,
            args.name,
            [as_rational(g) for g in args.gamma] if args.gamma else None,
            as_rational(args.at_r) if args.at_r else None,
            args.certificate_out,
        )
    if args.command == "average":
        return run_bounds.cmd_average(cfg, _moments(args.moments), args.t_total)
    if args.command == "orbit":
        return run_bounds.cmd_orbit(cfg, args.symbols, _moments(args.moments), args.csv)
    if args.command == "relations":
        return run_bounds.cmd_relations(cfg, args.averages, args.param)
    if args.command == "region":
        betas = run_bounds.beta_grid(as_rational(args.beta_min), as_rational(args.beta_max), args.count)
        return run_bounds.cmd_region(cfg, betas, None, args.csv, args.limits)
    if args.command == "report":
        from report_tables import cmd_report_tables, render_report

        def _progress(current: int, total: int, label: str, status: str) -> None:
            print(progress_line(current, total, label, status), flush=True)

        record = cmd_report_tables(cfg, load_yaml(args.report_config), _progress)
        print()
        print(render_report(record))
        return record

    raise ValueError(f"Unknown command: {args.command}")


def summarize(record: Dict[str, Any]) -> bool:
    """Print a one-line verdict; True when everything requested passed."""
    kind = record.get("record_type")
    if kind == "bound":
        if record["verified"]:
            print(ok(f"{record['sense']} bound on {record['moment']}: {record['verified_bound']} "
                     f"(normalised {record['normalized_bound']})"))
            return True
        print(fail(f"no verified bound on {record['moment']} (solver status {record['solver_status']})"), file=sys.stderr)
        return False
    if kind in ("certify", "verify"):
        if record["ok"]:
            print(ok(f"certificate {record['name']} verified"))
            return True
        print(fail(f"certificate {record['name']} rejected: {record['reason']}"), file=sys.stderr)
        return False
    if kind == "relations" and "residuals" in record:
        rows = [{"relation": k, "residual": v} for k, v in record["residuals"].items()]
        print(format_table(rows, ("relation", "residual"), title="=== Relation residuals ==="))
    if kind == "region":
        print(format_table(record["rows"], ("beta", "z2", "xy3", "z3", "gamma1", "gamma2")))
    if kind == "report" and record["unavailable"]:
        print(warn(f"{len(record['unavailable'])} cell(s) unavailable"))
    return True


def main() -> None:
    load_dotenv(override=True)
    parser = build_parser()
    args = parser.parse_args()
    configure_logging(args)

    if args.dry_run:
        if not preflight(args.config or DEFAULT_CONFIG_PATH):
            sys.exit(1)
        print(warn("Dry-run: skipping computation."))
        return

    from run_bounds import StageError

    try:
        record = dispatch(args)
    except StageError as e:
        print(fail(str(e)), file=sys.stderr)
        sys.exit(1)
    except (ValueError, KeyError, FileNotFoundError) as e:
        print(fail(str(e)), file=sys.stderr)
        sys.exit(1)

    output_path = resolve_output_path(args.output, args.command)
    write_report(output_path, record)
    print(ok(f"Wrote report to {output_path}"))
    if not summarize(record):
        sys.exit(1)


if __name__ == "__main__":
    main()
