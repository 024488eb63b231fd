"""Command-line interface: run simulations, certify the theory, synthesize
profiles, and validate input files.

Exit codes: 0 success, 1 validation failure, 2 runtime/usage error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .network import FeederError, load_feeder
from .runner import ConfigError, load_config, run_simulation, write_summary, write_trajectory
from .scenario import SynthParams, TimeSeriesError, load_timeseries, synth_profiles, write_timeseries


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feederloop", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a closed-loop simulation from a config file")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", default=None, help="output directory (overrides [output] dir)")

    p_an = sub.add_parser("analyze", help="numerical certification suite on a frozen instance")
    p_an.add_argument("--config", required=True)
    p_an.add_argument("--out", default=None, help="directory for report files (default: stdout only)")
    p_an.add_argument("--freeze-step", type=int, default=None)
    p_an.add_argument("--pairs", type=int, default=2000)
    p_an.add_argument("--tracking-steps", type=int, default=120)

    p_sy = sub.add_parser("synth", help="generate synthetic load/PV profiles")
    p_sy.add_argument("--feeder", required=True)
    p_sy.add_argument("--fleet", required=True)
    p_sy.add_argument("--duration", type=int, required=True)
    p_sy.add_argument("--seed", type=int, default=1)
    p_sy.add_argument("--out", required=True, help="output CSV path")

    p_va = sub.add_parser("validate", help="check a feeder file (and optional time series)")
    p_va.add_argument("feeder")
    p_va.add_argument("--timeseries", default=None)
    return parser


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    out_dir = Path(args.out) if args.out else cfg.out_dir
    if out_dir is None:
        raise ConfigError("no output directory: pass --out or set [output] dir")
    out_dir.mkdir(parents=True, exist_ok=True)
    result = run_simulation(cfg)
    write_trajectory(out_dir / "trajectory.csv", result)
    write_summary(out_dir / "summary.txt", result.summary)
    for key in sorted(result.summary):
        print(f"{key}={result.summary[key]}")
    return 0


def _cmd_analyze(args) -> int:
    from .certify import run_certification

    cfg = load_config(args.config)
    report = run_certification(
        cfg, freeze_step=args.freeze_step, n_pairs=args.pairs, tracking_steps=args.tracking_steps
    )
    for line in report.lines:
        print(line)
    for line in report.machine_lines():
        print(line)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "certification.txt").write_text("\n".join(report.lines) + "\n")
        (out_dir / "certification_summary.txt").write_text("\n".join(report.machine_lines()) + "\n")
    return 0 if report.values["all_satisfied"] else 1


def _cmd_synth(args) -> int:
    from .devices import load_fleet

    feeder = load_feeder(args.feeder)
    fleet = load_fleet(args.fleet)
    ts = synth_profiles(feeder, fleet, args.duration, args.seed, SynthParams())
    write_timeseries(args.out, ts)
    print(f"wrote {ts.n_steps} steps for {ts.n_nodes} nodes to {args.out}")
    return 0


def _cmd_validate(args) -> int:
    try:
        feeder = load_feeder(args.feeder)
    except FeederError as exc:
        print(f"invalid feeder: {exc}", file=sys.stderr)
        return 1
    print(f"feeder ok: {feeder.n_nodes} load nodes, v_sub={feeder.v_sub}")
    if args.timeseries:
        try:
            ts = load_timeseries(args.timeseries)
        except TimeSeriesError as exc:
            print(f"invalid time series: {exc}", file=sys.stderr)
            return 1
        if ts.n_nodes != feeder.n_nodes:
            print(
                f"invalid pair: time series covers {ts.n_nodes} nodes, feeder has {feeder.n_nodes}",
                file=sys.stderr,
            )
            return 1
        print(f"time series ok: {ts.n_steps} steps, {len(ts.pv_nodes)} PV columns")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "run": _cmd_run,
        "analyze": _cmd_analyze,
        "synth": _cmd_synth,
        "validate": _cmd_validate,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, FeederError, TimeSeriesError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
