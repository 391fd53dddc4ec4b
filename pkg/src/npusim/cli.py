"""Command-line front end: `npusim simulate ...` and `npusim make-model ...`."""

from __future__ import annotations

import argparse
import json
import sys

from .config import load_config, load_preset, preset_path
from .engine import run_simulation
from .errors import SimError
from .graph import serialize_graph
from .models import build_synthetic_model
from .report import build_report, emit_report, report_json
from .workload import load_workload


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="npusim",
                                description="Cycle-level multi-core NPU simulator")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a workload to completion")
    sim.add_argument("--config", required=True,
                     help="config JSON path, or preset name 'mobile'/'server'")
    sim.add_argument("--workload", required=True, help="workload JSON path")
    sim.add_argument("--model", action="append", default=[],
                     help="register a model file (repeatable)")
    sim.add_argument("--trace", action="store_true",
                     help="collect a per-instruction issue/retire trace")
    sim.add_argument("--report", default=None,
                     help="output directory for report.json, CSVs and figures")
    sim.add_argument("--timeline-window", type=int, default=None,
                     help="cycles per utilization-timeline window")
    sim.add_argument("--override", action="append", default=[],
                     help="config override key.path=value (repeatable)")
    sim.add_argument("--no-plots", action="store_true",
                     help="skip figure rendering")
    sim.add_argument("--no-event-jump", action="store_true",
                     help="force strictly cycle-by-cycle advancement")

    mk = sub.add_parser("make-model", help="write a synthetic model graph file")
    mk.add_argument("--kind", required=True,
                    choices=["gemm", "mlp", "conv_block", "transformer_block"])
    mk.add_argument("--param", action="append", default=[],
                    help="builder parameter name=int (repeatable)")
    mk.add_argument("--out", required=True, help="output JSON path")
    return p


def _load_cfg(spec: str, overrides: list[str]):
    if spec in ("mobile", "server"):
        return load_config(preset_path(spec), overrides)
    return load_config(spec, overrides)


def _cmd_simulate(args) -> int:
    cfg = _load_cfg(args.config, args.override)
    if args.timeline_window is not None:
        cfg.timeline_window = args.timeline_window
    if args.no_event_jump:
        cfg.event_jump = False
    cfg.validate()
    requests = load_workload(args.workload, args.model)
    sim = run_simulation(cfg, requests, trace=args.trace)
    if args.report:
        report = emit_report(sim, args.report, plots=not args.no_plots)
        if args.trace and sim.trace is not None:
            import os
            with open(os.path.join(args.report, "trace.txt"), "w",
                      encoding="utf-8") as fh:
                for cyc, core, tile, idx, op, ev in sim.trace:
                    fh.write(f"{cyc} core{core} tile{tile} i{idx} {op} {ev}\n")
    else:
        report = build_report(sim)
        print(report_json(report))
    print(f"simulated {sim.total_cycles()} cycles; "
          f"{len(report['requests'])} request(s) retired", file=sys.stderr)
    return 0


def _cmd_make_model(args) -> int:
    params = {}
    for spec in args.param:
        if "=" not in spec:
            raise SimError(f"--param '{spec}' must look like name=value")
        k, _, v = spec.partition("=")
        try:
            params[k] = int(v)
        except ValueError:
            params[k] = v
    g = build_synthetic_model(args.kind, **params)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(serialize_graph(g))
        fh.write("\n")
    print(f"wrote {args.out} ({len(g.nodes)} nodes)", file=sys.stderr)
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            return _cmd_simulate(args)
        return _cmd_make_model(args)
    except (SimError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
