"""Ground-truth topology descriptions for the simulator.

A scenario is one scanner plus a list of outposts (public hosts that are
also NAT gateways), each with its IPID policy, SYN-ACK retransmission
behaviour, ingress filter, penetration hole flag, background noise and
the private hosts behind it.  Scenarios are loaded from TOML; see
``docs/config-schema.md`` for the key reference.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional, Union

from .configfile import check_keys, expect, load_toml, loads_toml
from .core import ConfigError, Ipv4Addr, ip, is_private


@dataclass(frozen=True)
class GlobalCounter:
    initial: int = 0


@dataclass(frozen=True)
class PerFlowCounter:
    initial: int = 0


@dataclass(frozen=True)
class RandomIpid:
    seed: int = 0


@dataclass(frozen=True)
class ConstantIpid:
    value: int = 0


IpidPolicy = Union[GlobalCounter, PerFlowCounter, RandomIpid, ConstantIpid]

_POLICY_KINDS = {
    "GlobalCounter": (GlobalCounter, "initial"),
    "PerFlowCounter": (PerFlowCounter, "initial"),
    "Random": (RandomIpid, "seed"),
    "Constant": (ConstantIpid, "value"),
}


def policy_to_dict(p: IpidPolicy) -> dict[str, Any]:
    for kind, (cls, attr) in _POLICY_KINDS.items():
        if type(p) is cls:
            return {"kind": kind, attr: getattr(p, attr)}
    raise TypeError(p)


def policy_from_dict(d: dict[str, Any], where: str) -> IpidPolicy:
    kind = d.get("kind")
    if kind not in _POLICY_KINDS:
        raise ConfigError(f"{where}.kind: expected one of {sorted(_POLICY_KINDS)}, got {kind!r}")
    cls, attr = _POLICY_KINDS[kind]
    check_keys(d, {"kind", attr}, where)
    value = expect(d.get(attr, 0), int, f"{where}.{attr}")
    if cls is not RandomIpid and not 0 <= value < 65536:
        raise ConfigError(f"{where}.{attr}: {value} is not a 16-bit value")
    return cls(value)


class FilterPolicy(enum.Enum):
    BLOCK_ALL_SPOOFED = "BlockAllSpoofed"
    BLOCK_PRIVATE_SOURCE_ONLY = "BlockPrivateSourceOnly"
    NO_FILTERING = "NoFiltering"


@dataclass(frozen=True)
class RetransBehavior:
    first_interval_s: int = 1
    count: int = 5
    doubling: bool = True

    def __post_init__(self) -> None:
        if self.first_interval_s <= 0:
            raise ConfigError("retrans.first_interval_s must be positive")
        if not 3 <= self.count <= 5:
            raise ConfigError("retrans.count must be in [3, 5]")

    def offsets(self) -> list[int]:
        """Retransmission times in seconds after the first SYN-ACK."""
        if self.doubling:
            return [self.first_interval_s * ((1 << i) - 1) for i in range(1, self.count + 1)]
        return [self.first_interval_s * i for i in range(1, self.count + 1)]


@dataclass(frozen=True)
class InternalHost:
    private_ip: Ipv4Addr
    alive: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "private_ip", ip(self.private_ip))


@dataclass(frozen=True)
class OutpostSpec:
    public_ip: Ipv4Addr
    open_ports: tuple[int, ...] = (80,)
    ipid_policy: IpidPolicy = GlobalCounter()
    retrans: RetransBehavior = RetransBehavior()
    filter_policy: FilterPolicy = FilterPolicy.NO_FILTERING
    hole_present: bool = False
    noise_rate_pps: float = 0.0
    internal_hosts: tuple[InternalHost, ...] = ()
    # hosts that break the "normal TCP state machine" assumption
    answers_synack: bool = True
    drops_syn: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "public_ip", ip(self.public_ip))
        object.__setattr__(self, "open_ports", tuple(self.open_ports))
        object.__setattr__(self, "internal_hosts", tuple(self.internal_hosts))
        if self.noise_rate_pps < 0:
            raise ConfigError("noise_rate_pps must be non-negative")


@dataclass(frozen=True)
class ScenarioConfig:
    outposts: tuple[OutpostSpec, ...]
    scanner_ip: Ipv4Addr = ip("203.0.113.10")
    link_loss_prob: float = 0.0
    rng_seed: int = 0
    latency_ms: int = 10
    jitter_ms: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "scanner_ip", ip(self.scanner_ip))
        object.__setattr__(self, "outposts", tuple(self.outposts))
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.link_loss_prob < 1.0:
            raise ConfigError("link_loss_prob must be in [0, 1)")
        if not 0 <= self.rng_seed < (1 << 64):
            raise ConfigError("rng_seed must be a 64-bit unsigned integer")
        if self.latency_ms < 0 or self.jitter_ms < 0:
            raise ConfigError("latency_ms and jitter_ms must be non-negative")
        if is_private(self.scanner_ip):
            raise ConfigError(f"scanner_ip {self.scanner_ip} must be public")
        seen: set[Ipv4Addr] = {self.scanner_ip}
        for o in self.outposts:
            if is_private(o.public_ip):
                raise ConfigError(f"outpost address {o.public_ip} is private")
            if o.public_ip in seen:
                raise ConfigError(f"duplicate address {o.public_ip}")
            seen.add(o.public_ip)
            inner: set[Ipv4Addr] = set()
            for h in o.internal_hosts:
                if not is_private(h.private_ip):
                    raise ConfigError(f"internal host {h.private_ip} behind {o.public_ip} is not private")
                if h.private_ip in inner:
                    raise ConfigError(f"duplicate internal host {h.private_ip} behind {o.public_ip}")
                inner.add(h.private_ip)

    def outpost(self, addr: Union[str, Ipv4Addr]) -> Optional[OutpostSpec]:
        a = ip(addr)
        for o in self.outposts:
            if o.public_ip == a:
                return o
        return None

    def restricted_to(self, addr: Union[str, Ipv4Addr]) -> "ScenarioConfig":
        """Same topology with only the outpost at ``addr`` (none if unknown)."""
        o = self.outpost(addr)
        return replace(self, outposts=(o,) if o else ())

    def to_dict(self) -> dict[str, Any]:
        return {
            "scanner_ip": str(self.scanner_ip),
            "link_loss_prob": self.link_loss_prob,
            "rng_seed": self.rng_seed,
            "latency_ms": self.latency_ms,
            "jitter_ms": self.jitter_ms,
            "outposts": [
                {
                    "public_ip": str(o.public_ip),
                    "open_ports": list(o.open_ports),
                    "ipid_policy": policy_to_dict(o.ipid_policy),
                    "retrans": {
                        "first_interval_s": o.retrans.first_interval_s,
                        "count": o.retrans.count,
                        "doubling": o.retrans.doubling,
                    },
                    "filter_policy": o.filter_policy.value,
                    "hole_present": o.hole_present,
                    "noise_rate_pps": o.noise_rate_pps,
                    "answers_synack": o.answers_synack,
                    "drops_syn": o.drops_syn,
                    "internal_hosts": [
                        {"private_ip": str(h.private_ip), "alive": h.alive} for h in o.internal_hosts
                    ],
                }
                for o in self.outposts
            ],
        }


_TOP_KEYS = {"scanner_ip", "link_loss_prob", "rng_seed", "latency_ms", "jitter_ms", "outposts"}
_OUTPOST_KEYS = {
    "public_ip", "open_ports", "ipid_policy", "retrans", "filter_policy", "hole_present",
    "noise_rate_pps", "internal_hosts", "answers_synack", "drops_syn",
}


def _addr(value: Any, where: str) -> Ipv4Addr:
    try:
        return ip(expect(value, str, where))
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def scenario_from_dict(d: dict[str, Any]) -> ScenarioConfig:
    check_keys(d, _TOP_KEYS, "scenario", required={"outposts"})
    outposts = []
    for i, od in enumerate(expect(d["outposts"], list, "scenario.outposts")):
        where = f"outposts[{i}]"
        expect(od, dict, where)
        check_keys(od, _OUTPOST_KEYS, where, required={"public_ip"})
        rd = expect(od.get("retrans", {}), dict, f"{where}.retrans")
        check_keys(rd, {"first_interval_s", "count", "doubling"}, f"{where}.retrans")
        try:
            filt = FilterPolicy(od.get("filter_policy", "NoFiltering"))
        except ValueError:
            raise ConfigError(
                f"{where}.filter_policy: expected one of {[f.value for f in FilterPolicy]}"
            ) from None
        hosts = []
        for j, hd in enumerate(expect(od.get("internal_hosts", []), list, f"{where}.internal_hosts")):
            hw = f"{where}.internal_hosts[{j}]"
            check_keys(hd, {"private_ip", "alive"}, hw, required={"private_ip"})
            hosts.append(InternalHost(_addr(hd["private_ip"], hw), bool(expect(hd.get("alive", True), bool, hw))))
        ports = expect(od.get("open_ports", [80]), list, f"{where}.open_ports")
        for p in ports:
            if not isinstance(p, int) or isinstance(p, bool) or not 0 < p < 65536:
                raise ConfigError(f"{where}.open_ports: invalid port {p!r}")
        outposts.append(
            OutpostSpec(
                public_ip=_addr(od["public_ip"], f"{where}.public_ip"),
                open_ports=tuple(ports),
                ipid_policy=policy_from_dict(
                    expect(od.get("ipid_policy", {"kind": "GlobalCounter"}), dict, f"{where}.ipid_policy"),
                    f"{where}.ipid_policy",
                ),
                retrans=RetransBehavior(
                    expect(rd.get("first_interval_s", 1), int, f"{where}.retrans.first_interval_s"),
                    expect(rd.get("count", 5), int, f"{where}.retrans.count"),
                    expect(rd.get("doubling", True), bool, f"{where}.retrans.doubling"),
                ),
                filter_policy=filt,
                hole_present=expect(od.get("hole_present", False), bool, f"{where}.hole_present"),
                noise_rate_pps=float(expect(od.get("noise_rate_pps", 0.0), (int, float), f"{where}.noise_rate_pps")),
                internal_hosts=tuple(hosts),
                answers_synack=expect(od.get("answers_synack", True), bool, f"{where}.answers_synack"),
                drops_syn=expect(od.get("drops_syn", False), bool, f"{where}.drops_syn"),
            )
        )
    return ScenarioConfig(
        outposts=tuple(outposts),
        scanner_ip=_addr(d.get("scanner_ip", "203.0.113.10"), "scanner_ip"),
        link_loss_prob=float(expect(d.get("link_loss_prob", 0.0), (int, float), "link_loss_prob")),
        rng_seed=expect(d.get("rng_seed", 0), int, "rng_seed"),
        latency_ms=expect(d.get("latency_ms", 10), int, "latency_ms"),
        jitter_ms=expect(d.get("jitter_ms", 0), int, "jitter_ms"),
    )


def load_scenario(path: Union[str, Path]) -> ScenarioConfig:
    return scenario_from_dict(load_toml(path))


def loads_scenario(text: str) -> ScenarioConfig:
    return scenario_from_dict(loads_toml(text))
