"""Command-line interface.

    mlfreeway simulate  SCENARIO --out DIR
    mlfreeway calibrate SCENARIO --targets FILE --out DIR [--max-outer N] [--tol FRAC]
    mlfreeway validate  SCENARIO
    mlfreeway metrics   RESULTS_DIR

Failures print one line ``error: <kind>: <message>`` to stderr and exit
with status 1.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .calibration import DEFAULT_TOL, CalibrationError, MonotonicityError, run_calibration_loop
from .export import export_contours, read_results
from .metrics import DELAY_THRESHOLD_MPH, compute_metrics, metrics_from_results
from .network import check_cfl, lint_network, validate_network
from .scenario import ScenarioError, load_scenario, load_targets
from .simulation import SimulationError, simulate_model

log = logging.getLogger("mlfreeway")


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _write_text(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="\n")


def cmd_simulate(args) -> int:
    sc = load_scenario(args.scenario)
    for w in sc.warnings:
        log.warning(w)
    model = sc.model()
    out, _ = simulate_model(model)
    export_contours(out, sc.network, args.out, interval_minutes=sc.config.interval_minutes)
    summary = compute_metrics(out, sc.network, args.threshold)
    _write_text(Path(args.out) / "metrics.csv", summary.to_csv())
    print(summary.table())
    return 0


def cmd_calibrate(args) -> int:
    sc = load_scenario(args.scenario)
    for w in sc.warnings:
        log.warning(w)
    targets = load_targets(args.targets, sc.config.interval_minutes)
    model = sc.model()
    report = run_calibration_loop(model, targets, max_outer=args.max_outer, tol=args.tol)
    out_dir = Path(args.out)
    export_contours(report.output, sc.network, out_dir, targets=targets,
                    interval_minutes=sc.config.interval_minutes)
    spi = sc.config.steps_per_interval
    lines = []
    for k in range(report.beta.shape[1]):
        for q in sorted(range(len(report.offramps)), key=lambda q: report.offramps[q]):
            lines.append(f"{k * spi * sc.config.dt_seconds:g},{report.offramps[q]},{float(report.beta[q, k])!r},"
                         f"{int(report.starved[q, k])},{int(report.clamped[q, k])}")
    _write_text(out_dir / "beta.csv", "time_s,offramp,beta,starved,clamped\n" + "".join(l + "\n" for l in lines))
    summary = compute_metrics(report.output, sc.network, args.threshold)
    _write_text(out_dir / "metrics.csv", summary.to_csv())
    text = report.summary() + "\n\n" + summary.table() + "\n"
    _write_text(out_dir / "report.txt", text)
    print(text, end="")
    return 0 if report.converged else 3


def cmd_validate(args) -> int:
    sc = load_scenario(args.scenario, validate=False)
    problems = [str(v) for v in validate_network(sc.network)]
    if not problems:
        problems += [str(v) for v in check_cfl(sc.network, sc.config.dt)]
    for w in lint_network(sc.network):
        print(f"warning: {w}")
    for p in problems:
        print(f"violation: {p}")
    if problems:
        raise CliError("invalid", f"{len(problems)} violation(s) in {args.scenario}")
    print("ok")
    return 0


def cmd_metrics(args) -> int:
    out, links = read_results(args.results)
    print(metrics_from_results(out, links, args.threshold).table())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mlfreeway", description="Managed lane-freeway simulation and calibration.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a scenario and export contours")
    s.add_argument("scenario")
    s.add_argument("--out", required=True)
    s.add_argument("--threshold", type=float, default=DELAY_THRESHOLD_MPH, help="delay speed threshold, mph")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("calibrate", help="identify offramp split ratios from offramp flows")
    c.add_argument("scenario")
    c.add_argument("--targets", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--max-outer", type=int, default=2)
    c.add_argument("--tol", type=float, default=DEFAULT_TOL, help="relative offramp flow tolerance")
    c.add_argument("--threshold", type=float, default=DELAY_THRESHOLD_MPH, help="delay speed threshold, mph")
    c.set_defaults(func=cmd_calibrate)

    v = sub.add_parser("validate", help="check a scenario")
    v.add_argument("scenario")
    v.set_defaults(func=cmd_validate)

    m = sub.add_parser("metrics", help="VMT/VHT/delay of an exported run")
    m.add_argument("results")
    m.add_argument("--threshold", type=float, default=DELAY_THRESHOLD_MPH)
    m.set_defaults(func=cmd_metrics)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        kind, msg = exc.kind, str(exc)
    except ScenarioError as exc:
        kind, msg = "scenario", str(exc)
    except MonotonicityError as exc:
        kind, msg = "calibration", str(exc)
    except CalibrationError as exc:
        kind, msg = "calibration", str(exc)
    except SimulationError as exc:
        kind, msg = "simulation", str(exc)
    except (OSError, ValueError) as exc:
        kind, msg = "input", str(exc)
    print(f"error: {kind}: {msg}".replace("\n", " "), file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
