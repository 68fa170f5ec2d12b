"""Pipeline driver: prefilter, outpost selection and detection per target.

Every target runs against its own transport.  With the simulator backend
each target gets a fresh network restricted to that target's ground truth,
seeded from (scenario seed, target address), and the scanner gets its own
RNG seeded from (scan seed, target address).  A target's records therefore
do not depend on which other targets are in the run, their order or the
concurrency level, which is what makes resume and byte-identical reruns
work.
"""

from __future__ import annotations

import ipaddress
import json
import math
import os
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Any, Iterable, Iterator, Optional, Sequence, Union

import numpy as np

from .configfile import check_keys, expect, load_toml, loads_toml
from .core import (
    ConfigError,
    Ipv4Addr,
    NatpenError,
    NoResponse,
    OutpostStatus,
    PenetrationStatus,
    SpoofUnsupported,
    ip,
    is_private,
    jsonable,
)
from .detect import DetectionParams, detect_address, measure_and_calibrate
from .outpost import DEFAULT_PRIVATE_SRC, DEFAULT_PUBLIC_SRC, SelectionParams, select_outpost
from .prefilter import prefilter
from .probe import Prober
from .ratelimit import RateLimiter
from .scenario import ScenarioConfig
from .simnet import Network
from .transport import ReplayTransport, SimTransport, TransportCaps

SCHEMA_VERSION = 1
STAGES = ("prefilter", "outpost", "detect")


@dataclass(frozen=True)
class ScanConfig:
    targets: tuple[Ipv4Addr, ...] = ()  # empty: every outpost in the scenario
    target_port: int = 80
    max_rate_pps_per_host: float = 0.6
    burst: int = 10
    rate_window_s: float = 60.0
    noise_threshold_pps: float = 6.0
    private_probe_addr: Ipv4Addr = DEFAULT_PRIVATE_SRC
    public_spoof_addr: Ipv4Addr = DEFAULT_PUBLIC_SRC
    sweep_subnet: Optional[ipaddress.IPv4Network] = None
    concurrency_limit: int = 1
    rng_seed: int = 0
    max_attempts: int = 3
    can_spoof_source: bool = True
    accepts_unsolicited_synack: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "targets", tuple(ip(t) for t in self.targets))
        object.__setattr__(self, "private_probe_addr", ip(self.private_probe_addr))
        object.__setattr__(self, "public_spoof_addr", ip(self.public_spoof_addr))
        if self.sweep_subnet is not None:
            object.__setattr__(self, "sweep_subnet", ipaddress.IPv4Network(self.sweep_subnet, strict=False))
        if not self.max_rate_pps_per_host > 0:
            raise ConfigError("max_rate_pps_per_host must be positive")
        if self.burst < 1 or self.rate_window_s < 0:
            raise ConfigError("burst must be >= 1 and rate_window_s >= 0")
        if not 0 < self.target_port < 65536:
            raise ConfigError("target_port must be in 1..65535")
        if not self.noise_threshold_pps >= 0:
            raise ConfigError("noise_threshold_pps must be non-negative")
        if self.concurrency_limit < 1 or self.max_attempts < 1:
            raise ConfigError("concurrency_limit and max_attempts must be positive")
        if not is_private(self.private_probe_addr):
            raise ConfigError(f"private_probe_addr {self.private_probe_addr} is not a private address")
        if is_private(self.public_spoof_addr):
            raise ConfigError(f"public_spoof_addr {self.public_spoof_addr} is a private address")
        if self.sweep_subnet is not None and not is_private(self.sweep_subnet.network_address):
            raise ConfigError(f"sweep_subnet {self.sweep_subnet} is not private address space")
        if len(set(self.targets)) != len(self.targets):
            raise ConfigError("duplicate targets")

    @property
    def caps(self) -> TransportCaps:
        return TransportCaps(self.can_spoof_source, self.accepts_unsolicited_synack)

    def limiter(self) -> RateLimiter:
        return RateLimiter(self.max_rate_pps_per_host, self.burst, self.rate_window_s)

    def selection_params(self) -> SelectionParams:
        return SelectionParams(noise_threshold_pps=self.noise_threshold_pps, public_src=self.public_spoof_addr,
                               private_src=self.private_probe_addr)

    def detection_params(self) -> DetectionParams:
        return DetectionParams(noise_threshold_pps=self.noise_threshold_pps, max_attempts=self.max_attempts)

    def to_dict(self) -> dict[str, Any]:
        return {
            "targets": [str(t) for t in self.targets],
            "target_port": self.target_port,
            "max_rate_pps_per_host": self.max_rate_pps_per_host,
            "burst": self.burst,
            "rate_window_s": self.rate_window_s,
            "noise_threshold_pps": self.noise_threshold_pps,
            "private_probe_addr": str(self.private_probe_addr),
            "public_spoof_addr": str(self.public_spoof_addr),
            "sweep_subnet": None if self.sweep_subnet is None else str(self.sweep_subnet),
            "concurrency_limit": self.concurrency_limit,
            "rng_seed": self.rng_seed,
            "max_attempts": self.max_attempts,
            "can_spoof_source": self.can_spoof_source,
            "accepts_unsolicited_synack": self.accepts_unsolicited_synack,
        }


_NUM = (int, float)
_SCAN_KEYS = {
    "targets": list, "target_port": int, "max_rate_pps_per_host": _NUM, "burst": int,
    "rate_window_s": _NUM, "noise_threshold_pps": _NUM, "private_probe_addr": str,
    "public_spoof_addr": str, "sweep_subnet": str, "concurrency_limit": int, "rng_seed": int,
    "max_attempts": int, "can_spoof_source": bool, "accepts_unsolicited_synack": bool,
}


def scan_config_from_dict(d: dict[str, Any]) -> ScanConfig:
    check_keys(d, _SCAN_KEYS, "scan config")
    kw = {k: expect(v, _SCAN_KEYS[k], f"scan config key {k!r}") for k, v in d.items()}
    try:
        if "targets" in kw:
            kw["targets"] = tuple(ip(expect(t, str, "targets entry")) for t in kw["targets"])
        if "sweep_subnet" in kw:
            kw["sweep_subnet"] = ipaddress.IPv4Network(kw["sweep_subnet"], strict=False)
        return ScanConfig(**kw)
    except ValueError as exc:
        raise ConfigError(f"scan config: {exc}") from None


def load_scan_config(path: Union[str, Path]) -> ScanConfig:
    return scan_config_from_dict(load_toml(path))


def loads_scan_config(text: str) -> ScanConfig:
    return scan_config_from_dict(loads_toml(text))


@dataclass(frozen=True)
class ScanRecord:
    target: Ipv4Addr
    stage: str
    verdict: str
    payload: dict[str, Any] = field(default_factory=dict)
    start_ms: int = 0
    end_ms: int = 0
    packet_count_sent: int = 0
    private_ip: Optional[Ipv4Addr] = None
    final: bool = False  # last record of this target's pipeline

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "target": str(self.target),
            "stage": self.stage,
            "private_ip": None if self.private_ip is None else str(self.private_ip),
            "verdict": self.verdict,
            "start_ms": self.start_ms,
            "end_ms": self.end_ms,
            "packet_count_sent": self.packet_count_sent,
            "final": self.final,
            "payload": jsonable(self.payload),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ScanRecord":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {d.get('schema_version')!r}")
        if d["stage"] not in STAGES:
            raise ValueError(f"unknown stage {d['stage']!r}")
        return cls(ip(d["target"]), d["stage"], d["verdict"], d.get("payload", {}), int(d["start_ms"]),
                   int(d["end_ms"]), int(d["packet_count_sent"]),
                   None if d.get("private_ip") is None else ip(d["private_ip"]), bool(d.get("final", False)))


def network_seed(scenario_seed: int, target: Ipv4Addr) -> int:
    return int(np.random.SeedSequence([scenario_seed, int(target)]).generate_state(1, dtype=np.uint64)[0])


def scanner_rng(scan_seed: int, target: Ipv4Addr) -> random.Random:
    return random.Random(f"{scan_seed}/{target}")


class _Stage:
    """Bookkeeping for one record: start time, packets sent, politeness cool-down."""

    def __init__(self, transport, rate_pps: float):
        self.tr = transport
        self.rate = rate_pps
        self.start = transport.now_ms
        self.sent0 = transport.sent_count

    def close(self, target: Ipv4Addr, stage: str, verdict: str, payload: dict[str, Any],
              private_ip: Optional[Ipv4Addr] = None) -> ScanRecord:
        count = self.tr.sent_count - self.sent0
        # stretch the record so its own average rate stays inside the budget
        end = max(self.tr.now_ms, self.start + math.ceil(count * 1000 / self.rate))
        self.tr.wait_until(end)
        return ScanRecord(target, stage, verdict, payload, self.start, end, count, private_ip)


def run_target(transport, target: Union[str, Ipv4Addr], config: ScanConfig) -> list[ScanRecord]:
    """The full staged pipeline for one target on its own transport."""
    target = ip(target)
    prober = Prober(transport, config.target_port, scanner_rng(config.rng_seed, target))
    rate = config.max_rate_pps_per_host
    records: list[ScanRecord] = []

    st = _Stage(transport, rate)
    pf = prefilter(prober, target)
    if not pf.alive:
        verdict = OutpostStatus.NOT_ALIVE.value
    elif not pf.rst_seen:
        verdict = OutpostStatus.NO_RST_RESPONSE.value
    elif pf.first_ipid == 0:
        verdict = OutpostStatus.ZERO_IPID.value
    else:
        verdict = "Passed"
    records.append(st.close(target, "prefilter", verdict, pf.to_dict()))
    if not pf.passed:
        return records

    st = _Stage(transport, rate)
    ov = select_outpost(prober, target, config.selection_params())
    records.append(st.close(target, "outpost", ov.status.value, ov.evidence))
    if not ov.qualified or config.sweep_subnet is None:
        return records

    params = config.detection_params()
    st = _Stage(transport, rate)
    try:
        schedule = measure_and_calibrate(prober, target, params)
    except NoResponse as exc:
        records.append(st.close(target, "detect", "NoResponse", {"detail": str(exc)}))
        return records
    label = "Calibrated" if schedule.calibrated else "Uncalibrated"
    records.append(st.close(target, "detect", label, {"schedule": schedule}))

    net = config.sweep_subnet
    for addr in list(net.hosts()) or [net.network_address]:
        st = _Stage(transport, rate)
        try:
            v = detect_address(prober, target, addr, schedule, params)
            verdict, evidence = v.status.value, v.evidence
        except NatpenError as exc:
            verdict, evidence = PenetrationStatus.INCONCLUSIVE.value, {"error": type(exc).__name__,
                                                                       "detail": str(exc)}
        records.append(st.close(target, "detect", verdict, evidence, addr))
    return records


def _finalize(records: list[ScanRecord]) -> list[ScanRecord]:
    last = records[-1]
    records[-1] = ScanRecord(last.target, last.stage, last.verdict, last.payload, last.start_ms, last.end_ms,
                             last.packet_count_sent, last.private_ip, True)
    return records


@dataclass
class TargetRun:
    """A finished target: its records plus the transport it ran on (for audits and traces)."""

    target: Ipv4Addr
    records: list[ScanRecord]
    transport: Any


def check_capabilities(config: ScanConfig) -> None:
    """Refuse a run whose transport cannot perform the outpost stage, before any packet."""
    if not config.can_spoof_source:
        raise SpoofUnsupported("the outpost stage needs a transport that can spoof source addresses")
    if not config.accepts_unsolicited_synack:
        raise NatpenError("the probe module needs a transport that can send unsolicited SYN-ACKs")


def resolve_targets(config: ScanConfig, scenario: Optional[ScenarioConfig] = None) -> list[Ipv4Addr]:
    if config.targets:
        return list(config.targets)
    if scenario is None:
        raise ConfigError("no targets configured")
    return [o.public_ip for o in scenario.outposts]


def _sim_target(scenario: ScenarioConfig, config: ScanConfig, target: Ipv4Addr) -> TargetRun:
    net = Network(scenario.restricted_to(target), seed=network_seed(scenario.rng_seed, target))
    tr = SimTransport(net, config.caps, config.limiter())
    return TargetRun(target, _finalize(run_target(tr, target, config)), tr)


def iter_sim_runs(scenario: ScenarioConfig, config: ScanConfig,
                  skip: Iterable[Ipv4Addr] = ()) -> Iterator[TargetRun]:
    """Run every pending target, yielding results in target order."""
    check_capabilities(config)
    done = set(skip)
    todo = [t for t in resolve_targets(config, scenario) if t not in done]
    if config.concurrency_limit == 1:
        for t in todo:
            yield _sim_target(scenario, config, t)
        return
    with ThreadPoolExecutor(max_workers=config.concurrency_limit) as pool:
        yield from pool.map(lambda t: _sim_target(scenario, config, t), todo)


def run_pipeline(scenario: ScenarioConfig, config: ScanConfig) -> Iterator[ScanRecord]:
    """Stream of records for every target of a simulated scan."""
    for run in iter_sim_runs(scenario, config):
        yield from run.records


def dump_trace(run: TargetRun, fh: IO[str]) -> None:
    run.transport.net.dump_log(fh, {"target": str(run.target)})


def iter_replay_runs(events: Sequence[dict[str, Any]], scanner_ip: Union[str, Ipv4Addr],
                     config: ScanConfig, skip: Iterable[Ipv4Addr] = ()) -> Iterator[TargetRun]:
    """Re-run the scanner against recorded per-target event logs."""
    check_capabilities(config)
    by_target: dict[Ipv4Addr, list[dict[str, Any]]] = {}
    for e in events:
        if "target" not in e:
            raise ConfigError("trace events must carry a 'target' field")
        by_target.setdefault(ip(e["target"]), []).append(e)
    targets = list(config.targets) or list(by_target)
    done = set(skip)
    for t in targets:
        if t in done:
            continue
        tr = ReplayTransport(by_target.get(t, []), scanner_ip, config.caps, config.limiter())
        yield TargetRun(t, _finalize(run_target(tr, t, config)), tr)


def read_records(path: Union[str, Path]) -> list[ScanRecord]:
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(ScanRecord.from_dict(json.loads(line)))
            except (ValueError, KeyError) as exc:
                raise ConfigError(f"{path}:{n}: bad record: {exc}") from None
    return out


def completed_prefix(path: Union[str, Path]) -> tuple[list[str], set[Ipv4Addr]]:
    """Lines of fully finished targets in a possibly truncated result file."""
    lines: list[str] = []
    pending: list[str] = []
    done: set[Ipv4Addr] = set()
    with open(path) as fh:
        for line in fh:
            if not line.endswith("\n"):
                break  # torn final write
            try:
                rec = ScanRecord.from_dict(json.loads(line))
            except (ValueError, KeyError):
                break
            pending.append(line)
            if rec.final:
                lines.extend(pending)
                pending = []
                done.add(rec.target)
    return lines, done


class ResultSink:
    """Append-only result file; the single place records are serialized."""

    def __init__(self, path: Union[str, Path], resume: bool = False):
        self.path = Path(path)
        self.done: set[Ipv4Addr] = set()
        if resume and self.path.exists():
            lines, self.done = completed_prefix(self.path)
            tmp = self.path.with_name(self.path.name + ".tmp")
            tmp.write_text("".join(lines))
            os.replace(tmp, self.path)
            self.fh = open(self.path, "a")
        else:
            self.fh = open(self.path, "w")

    def write(self, records: Iterable[ScanRecord]) -> None:
        for r in records:
            self.fh.write(r.to_json() + "\n")
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()

    def __enter__(self) -> "ResultSink":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()


# -- reporting ------------------------------------------------------------------

PREFIXES = (24, 20, 16)


def qualified_outposts(records: Iterable[ScanRecord]) -> set[Ipv4Addr]:
    return {r.target for r in records if r.stage == "outpost" and r.verdict == OutpostStatus.QUALIFIED.value}


def prefix_counts(addrs: Iterable[Ipv4Addr]) -> dict[str, int]:
    addrs = set(addrs)
    out = {"ips": len(addrs)}
    for p in PREFIXES:
        out[f"/{p}"] = len({ipaddress.IPv4Network((a, p), strict=False) for a in addrs})
    return out


def cluster_report(records: Iterable[ScanRecord], other: Optional[Iterable[ScanRecord]] = None) -> dict[str, Any]:
    """QualifiedOutpost counts by /24, /20 and /16; with ``other``, the two-run comparison."""
    records = list(records)
    u1 = qualified_outposts(records)
    report: dict[str, Any] = {"run": prefix_counts(u1)}
    holes: dict[str, list[str]] = {}
    for r in records:
        if r.stage == "detect" and r.private_ip is not None and r.verdict == PenetrationStatus.HOLE_PRESENT.value:
            holes.setdefault(str(r.target), []).append(str(r.private_ip))
    report["reachable_private"] = holes
    if other is not None:
        u2 = qualified_outposts(other)
        report["other"] = prefix_counts(u2)
        report["intersection"] = prefix_counts(u1 & u2)
    return report


def format_report(report: dict[str, Any]) -> str:
    cols = ["ips"] + [f"/{p}" for p in PREFIXES]
    rows = [("U1", report["run"])]
    if "other" in report:
        rows += [("U2", report["other"]), ("U1&U2", report["intersection"])]
    lines = ["{:<8}".format("set") + "".join(f"{c:>8}" for c in ["#IP", "#/24", "#/20", "#/16"])]
    for name, counts in rows:
        lines.append(f"{name:<8}" + "".join(f"{counts[c]:>8}" for c in cols))
    for outpost, addrs in sorted(report.get("reachable_private", {}).items()):
        lines.append(f"{outpost}: reachable {', '.join(addrs)}")
    return "\n".join(lines)
