"""Command line: ``gridsim run|validate|oracle``."""

from __future__ import annotations

import argparse
import logging
import sys

from ..engine import SimulationAbort
from .config import ConfigError, parse_value
from .oracle import load_trace, timestep_oracle
from .runner import build_config, run_all

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2


def _kv(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return key.strip(), value


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gridsim", description="Flow-level grid simulator")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and write CSV outputs")
    run.add_argument("scenario", help="scenario file, or the name of a shipped preset")
    run.add_argument("--seed", type=int)
    run.add_argument("--duration", type=float, help="simulated seconds")
    run.add_argument("--metrics-interval", type=float, help="seconds per metrics window")
    run.add_argument("--out", default="out", help="output directory (default: out)")
    run.add_argument("--set", type=_kv, action="append", default=[], metavar="KEY=VALUE",
                     help="override a config value by dotted path; VALUE is parsed as YAML")
    run.add_argument("--sweep", type=_kv, action="append", default=[], metavar="KEY=V1,V2,...",
                     help="run once per value; several --sweep flags form a grid")
    run.add_argument("--jobs", type=int, default=1, help="sweep points to run at once")

    val = sub.add_parser("validate", help="check a scenario file")
    val.add_argument("scenario")

    orc = sub.add_parser("oracle", help="fixed-step completion times for a claim trace")
    orc.add_argument("trace")
    orc.add_argument("--dt", type=float, required=True)
    return ap


def _overrides(args) -> dict:
    ov = {k: parse_value(v) for k, v in args.set}
    if args.seed is not None:
        ov["seed"] = args.seed
    if args.duration is not None:
        ov["duration"] = args.duration
    if args.metrics_interval is not None:
        ov["metrics_interval"] = args.metrics_interval
    return ov


def cmd_run(args) -> int:
    sweeps = [(k, [parse_value(x) for x in v.split(",")]) for k, v in args.sweep]
    results = run_all(args.scenario, _overrides(args), sweeps, args.out, args.jobs)
    for outdir, info in results:
        r = info["report"]
        print(f"{outdir}: clock={r['clock']:.6f} events={r['events_processed']} "
              f"stale={r['stale_dropped']} audit_violations={info['violations']}")
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = build_config(args.scenario, {})
    print(f"{args.scenario}: ok ({cfg.scenario}, seed {cfg.seed}, {cfg.duration:g} s)")
    if cfg.topology is not None:
        topo = cfg.topology.build()
        for c in sorted(cfg.centers):
            rtts = ", ".join(f"{d} {topo.rtt(c, d) * 1000:g} ms" for d in sorted(cfg.centers) if d != c)
            print(f"  {c}: {rtts}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    for cid, t in timestep_oracle(load_trace(args.trace), args.dt).items():
        print(f"{cid} {t:.6f}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return {"run": cmd_run, "validate": cmd_validate, "oracle": cmd_oracle}[args.command](args)
    except ConfigError as exc:
        print(f"configuration error:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, OSError) as exc:
        if args.command == "oracle":
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        raise
    except SimulationAbort as exc:
        print(f"simulation aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
