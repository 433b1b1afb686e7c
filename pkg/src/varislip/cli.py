"""Command line interface.

Exit status: 0 success, 2 verification failure, 1 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import logging
import sys
from pathlib import Path

from .config import CHECK_NAMES, SimulationConfig, load_config
from .errors import VarislipError

log = logging.getLogger(__name__)

EXIT_OK, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2

# sweepable parameter -> (section, key)
SWEEP_KEYS = {
    "tau": ("step", "dt_tau"),
    "dt_tau": ("step", "dt_tau"),
    "h": ("step", "h_delay"),
    "h_delay": ("step", "h_delay"),
    "kappa": ("step", "kappa"),
    "slip_coefficient": ("fluid", "slip_coefficient"),
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="varislip", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="INI configuration file")
        sp.add_argument("--scenario", help="built-in scenario name when no --config is given")
        sp.add_argument("--output", type=Path, help="output directory")
        sp.add_argument("--steps", type=int, help="override the number of steps")
        sp.add_argument("--check", action="append", choices=("all",) + CHECK_NAMES, help="checks to run (repeatable)")
        sp.add_argument("--seed", type=int, help="random seed recorded with the run")

    common(sub.add_parser("run", help="simulate and verify one configuration"))
    v = sub.add_parser("verify", help="re-run diagnostics on a stored run directory")
    v.add_argument("directory", type=Path, nargs="?", help="run directory (or use --output)")
    v.add_argument("--output", type=Path, help="run directory")
    v.add_argument("--check", action="append", choices=("all",) + CHECK_NAMES)
    s = sub.add_parser("sweep", help="run a parameter grid")
    common(s)
    s.add_argument(
        "--vary", action="append", default=[], metavar="NAME=V1,V2,...", help=f"grid axis; NAME in {sorted(SWEEP_KEYS)}"
    )
    sub.add_parser("scenarios", help="list built-in scenarios")
    return p


def _checks(arg):
    if not arg or "all" in arg:
        return CHECK_NAMES
    return tuple(dict.fromkeys(arg))


def _load(args) -> SimulationConfig:
    from .scenarios import scenario_config

    if args.config is not None:
        config = load_config(args.config)
    else:
        config = scenario_config(args.scenario or "falling_disc")
    run = {}
    if args.steps is not None:
        run["steps"] = args.steps
    if args.seed is not None:
        run["seed"] = args.seed
    if args.check:
        run["checks"] = _checks(args.check)
    return config.with_values(run=run) if run else config


def _output_dir(args, config) -> Path:
    from .io import default_output_root

    if args.output is not None:
        return args.output
    if config.run.output:
        return Path(config.run.output)
    return default_output_root() / config.run.scenario


def execute(config: SimulationConfig, out: Path, extra: dict | None = None):
    """Run, verify and write one configuration. Returns ``(status, report)``."""
    from . import driver
    from .io import write_outputs
    from .scenarios import SCENARIOS

    if SCENARIOS[config.run.scenario].kind == "kinematic":
        report = driver.kinematic_report(config)
        write_outputs(out, config, None, report, extra)
        return (EXIT_OK if report.passed else EXIT_VERIFY), report, None
    traj, model, cfg, init = driver.simulate(config)
    report = driver.verify_trajectory(config, traj, model, cfg, init, config.run.checks)
    write_outputs(out, config, traj, report, extra)
    if traj.abort_reason and not traj.abort_reason.startswith("ContactImminent"):
        print(f"error: run aborted at step {len(traj.records) - 1}: {traj.abort_reason}", file=sys.stderr)
        return EXIT_RUNTIME, report, traj
    if traj.abort_reason:
        print(f"note: {traj.abort_reason}", file=sys.stderr)
    return (EXIT_OK if report.passed else EXIT_VERIFY), report, traj


def _report_status(report) -> int:
    print(report.summary())
    failed = [c.name for c in report.checks if not c.passed]
    if failed:
        print(f"verification failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_run(args) -> int:
    config = _load(args)
    out = _output_dir(args, config)
    status, report, _ = execute(config, out)
    print(report.summary())
    if status == EXIT_VERIFY:
        print(f"verification failed: {', '.join(c.name for c in report.checks if not c.passed)}", file=sys.stderr)
    print(f"outputs written to {out}")
    return status


def cmd_verify(args) -> int:
    from .driver import verify_directory

    d = args.directory or args.output
    if d is None:
        print("error: verify needs a run directory", file=sys.stderr)
        return EXIT_RUNTIME
    if not (Path(d) / "metadata.json").exists():
        print(f"error: {d}: not a run directory (no metadata.json)", file=sys.stderr)
        return EXIT_RUNTIME
    report = verify_directory(d, _checks(args.check) if args.check else None)
    return _report_status(report)


def _parse_axis(text):
    name, _, vals = text.partition("=")
    name = name.strip()
    if name not in SWEEP_KEYS or not vals:
        raise ValueError(f"bad --vary {text!r}; expected NAME=V1,V2 with NAME in {sorted(SWEEP_KEYS)}")
    return name, [float(v) for v in vals.split(",")]


def cmd_sweep(args) -> int:
    config = _load(args)
    axes = [_parse_axis(a) for a in args.vary]
    if not axes:
        print("error: sweep needs at least one --vary axis", file=sys.stderr)
        return EXIT_RUNTIME
    root = _output_dir(args, config)
    names = [n for n, _ in axes]
    rows, worst = [], EXIT_OK
    # runs are independent; each writes its own directory
    for i, combo in enumerate(itertools.product(*(v for _, v in axes))):
        over: dict = {}
        for name, val in zip(names, combo):
            sec, key = SWEEP_KEYS[name]
            over.setdefault(sec, {})[key] = val
        try:
            cfg_i = config.with_values(**over)
        except VarislipError as exc:
            print(f"error: sweep point {dict(zip(names, combo))}: {exc}", file=sys.stderr)
            rows.append(list(combo) + ["", "invalid", ""])
            worst = EXIT_RUNTIME
            continue
        sub = f"run_{i:03d}"
        status, report, _ = execute(cfg_i, root / sub, {"sweep": dict(zip(names, combo))})
        jump = next((c.value for c in report.checks if c.name == "tangential_jump_mean"), float("nan"))
        rows.append(list(combo) + [sub, "pass" if report.passed else "fail", repr(float(jump))])
        print(f"{sub} {dict(zip(names, combo))}: {'pass' if report.passed else 'FAIL'}")
        worst = EXIT_RUNTIME if EXIT_RUNTIME in (worst, status) else max(worst, status)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "sweep.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names + ["directory", "verification", "tangential_jump_mean"])
        w.writerows(rows)
    print(f"sweep summary written to {root / 'sweep.csv'}")
    return worst


def cmd_scenarios(args) -> int:
    from .scenarios import list_scenarios

    for info in list_scenarios():
        print(f"{info.name:26s} {info.kind:10s} {info.description}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "verify": cmd_verify, "sweep": cmd_sweep, "scenarios": cmd_scenarios}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_RUNTIME if exc.code else EXIT_OK
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)], format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
    except (VarislipError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
    return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
