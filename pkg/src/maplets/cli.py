"""Command-line scenario runner.

    maplets run two-agent-loop --out out/
    maplets run my_scenario.yaml --seed 3 --no-comms
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ConfigError, MapletError
from .scenario import BUNDLED, load_config, run_scenario

log = logging.getLogger("maplets")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="maplets", description="Multi-agent maplet mapping simulator.")
    ap.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="simulate a scenario and write its reports")
    run.add_argument("config", help=f"YAML file or bundled scenario ({', '.join(BUNDLED)})")
    run.add_argument("--seed", type=int, help="override the scenario seed")
    run.add_argument("--out", type=Path, help="output directory (default: out/<scenario name>)")
    run.add_argument("--no-comms", action="store_true", help="agents never talk: single-agent mapping")
    run.add_argument("--emit-frames", action="store_true", help="also dump keyframe depth images")
    return ap


def _fmt(v, spec=".3f", unit=""):
    return "n/a" if v is None or isinstance(v, str) else format(v, spec) + unit


def _report(summary: dict, out: Path) -> str:
    lines = [f"scenario {summary['scenario']} (seed {summary['seed']}) -> {out}"]
    for aid, a in summary["agents"].items():
        lines.append(
            f"  agent {aid}: {a['keyframes']} keyframes, {a['maplets']} maplets, "
            f"{a['known_closures']} closures, max origin error {_fmt(a['max_error_m'])} m"
        )
    lines.append(
        f"  raw point clouds {summary['raw_point_cloud_bytes']} B, maplets {summary['maplet_bytes']} B, "
        f"compression {_fmt(summary['compression_ratio'], '.1f', 'x')}"
    )
    lines.append(
        f"  protocol {summary['protocol_bytes']} B over {summary['encounters']} encounters, "
        f"pipeline ratio {_fmt(summary['pipeline_ratio'], '.1f', 'x')}, "
        f"{summary['inter_agent_closures']} inter-agent closures"
    )
    return "\n".join(lines)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be non-negative")
            cfg = cfg.model_copy(update={"seed": args.seed})
        out = args.out or Path(cfg.output or Path("out") / cfg.name)
        res = run_scenario(cfg, out, no_comms=args.no_comms, emit_frames=args.emit_frames)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, MapletError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(_report(res.summary, out))
    return 0


if __name__ == "__main__":
    sys.exit(main())
