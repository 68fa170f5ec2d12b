"""Command-line entry points.

Exit status: 0 on success, 2 on a usage or configuration error (nothing
is executed), 1 on a runtime error (records already written are kept).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from .core import ConfigError, NatpenError, ip, jsonable
from .detect import measure_and_calibrate, sweep_private_range
from .orchestrator import (
    ResultSink,
    check_capabilities,
    cluster_report,
    dump_trace,
    format_report,
    iter_replay_runs,
    iter_sim_runs,
    load_scan_config,
    network_seed,
    read_records,
    scanner_rng,
)
from .probe import ProbeParams, Prober
from .scenario import load_scenario
from .simnet import Network, load_events
from .transport import SimTransport


def _overrides(args: argparse.Namespace, config):
    changes = {}
    if args.seed is not None:
        changes["rng_seed"] = args.seed
    if args.port is not None:
        changes["target_port"] = args.port
    if args.rate is not None:
        changes["max_rate_pps_per_host"] = args.rate
    if args.noise_threshold is not None:
        changes["noise_threshold_pps"] = args.noise_threshold
    if args.concurrency is not None:
        changes["concurrency_limit"] = args.concurrency
    try:
        return dataclasses.replace(config, **changes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _scenario(args: argparse.Namespace):
    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        scenario = dataclasses.replace(scenario, rng_seed=args.seed)
    return scenario


def _preflight(config) -> None:
    try:
        check_capabilities(config)
    except NatpenError as exc:
        raise ConfigError(f"scan config: {exc}") from None


def _write_runs(runs, out: Path, resume: bool, trace: Optional[Path]) -> int:
    sink = ResultSink(out, resume)
    tfh = open(trace, "a" if resume else "w") if trace else None
    n = 0
    try:
        skip = sink.done
        for run in runs(skip):
            sink.write(run.records)
            if tfh:
                dump_trace(run, tfh)
            n += len(run.records)
    finally:
        sink.close()
        if tfh:
            tfh.close()
    print(f"wrote {n} records to {out}" + (f" ({len(skip)} targets already done)" if skip else ""))
    return 0


def cmd_sim_scan(args: argparse.Namespace) -> int:
    scenario = _scenario(args)
    config = _overrides(args, load_scan_config(args.config))
    _preflight(config)
    return _write_runs(lambda skip: iter_sim_runs(scenario, config, skip), Path(args.out), args.resume,
                       Path(args.trace) if args.trace else None)


def cmd_replay(args: argparse.Namespace) -> int:
    config = _overrides(args, load_scan_config(args.config))
    _preflight(config)
    p = Path(args.trace_file)
    if not p.is_file():
        raise ConfigError(f"{p}: no such file")
    with p.open() as fh:
        try:
            events = load_events(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from None
    scanner = args.scanner_ip
    return _write_runs(lambda skip: iter_replay_runs(events, scanner, config, skip), Path(args.out),
                       args.resume, None)


def _sim_handle(args: argparse.Namespace, target):
    scenario = _scenario(args)
    net = Network(scenario.restricted_to(target), seed=network_seed(scenario.rng_seed, target))
    seed = 0 if args.seed is None else args.seed
    port = 80 if args.port is None else args.port
    return Prober(SimTransport(net), port, scanner_rng(seed, target))


def cmd_probe(args: argparse.Namespace) -> int:
    target = ip(args.target)
    params = ProbeParams(args.n, args.t, min(1.0, args.t))
    prober = _sim_handle(args, target)
    series = prober.series(target, params)
    print(json.dumps(series.to_dict()))
    return 0


def cmd_detect(args: argparse.Namespace) -> int:
    outpost = ip(args.outpost)
    prober = _sim_handle(args, outpost)
    schedule = measure_and_calibrate(prober, outpost)
    print(json.dumps({"schedule": schedule.to_dict()}))
    for addr, v in sweep_private_range(prober, outpost, args.subnet, schedule=schedule):
        print(json.dumps({"private_ip": str(addr), "verdict": v.status.value,
                          "attempts": jsonable(v.evidence.get("attempts", []))}))
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    records = read_records(args.result_file)
    other = read_records(args.compare) if args.compare else None
    report = cluster_report(records, other)
    if args.json:
        print(json.dumps(report, indent=2, sort_keys=True))
    else:
        print(format_report(report))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="override both the scenario and the scan seed")
    common.add_argument("--port", type=int, help="target TCP port")
    common.add_argument("--rate", type=float, help="per-host politeness rate in packets/s")
    common.add_argument("--noise-threshold", type=float, help="IPID noise ceiling in packets/s")
    common.add_argument("--concurrency", type=int, help="target pipelines in flight")
    common.add_argument("--resume", action="store_true", help="skip targets already finished in the result file")

    parser = argparse.ArgumentParser(prog="natpen", description="Shared-IPID NAT-penetration scanner (simulated).")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sim-scan", parents=[common], help="run the full pipeline against a scenario")
    p.add_argument("scenario")
    p.add_argument("config")
    p.add_argument("out")
    p.add_argument("--trace", help="also write the per-target simulator event log here")
    p.set_defaults(func=cmd_sim_scan)

    p = sub.add_parser("probe", parents=[common], help="collect one IPID series from a simulated host")
    p.add_argument("scenario")
    p.add_argument("target")
    p.add_argument("-n", type=int, default=10)
    p.add_argument("-t", type=int, default=1)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("detect", parents=[common], help="sweep a private subnet through one outpost")
    p.add_argument("scenario")
    p.add_argument("outpost")
    p.add_argument("subnet")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("report", help="cluster qualified outposts by /24, /20, /16")
    p.add_argument("result_file")
    p.add_argument("--compare", help="second result file for the intersection table")
    p.add_argument("--json", action="store_true", help="machine-readable summary")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("replay", parents=[common], help="re-run the scanner against a recorded trace")
    p.add_argument("trace_file")
    p.add_argument("config")
    p.add_argument("out")
    p.add_argument("--scanner-ip", default="203.0.113.10")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    try:
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"natpen: error: {exc}", file=sys.stderr)
        return 2
    except NatpenError as exc:
        print(f"natpen: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
