"""Shared value types: addresses, TCP packets, IPID series and verdicts."""

from __future__ import annotations

import enum
import ipaddress
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional, Sequence, Union

IPID_MOD = 1 << 16
HALF_RANGE = 1 << 15

Ipv4Addr = ipaddress.IPv4Address

PRIVATE_NETWORKS = (
    ipaddress.IPv4Network("10.0.0.0/8"),
    ipaddress.IPv4Network("172.16.0.0/12"),
    ipaddress.IPv4Network("192.168.0.0/16"),
)


def ip(value: Union[str, int, Ipv4Addr]) -> Ipv4Addr:
    """Coerce a dotted quad, integer or address into an IPv4Address."""
    if isinstance(value, ipaddress.IPv4Address):
        return value
    return ipaddress.IPv4Address(value)


def is_private(addr: Union[str, int, Ipv4Addr]) -> bool:
    """True for RFC 1918 addresses only.

    ``IPv4Address.is_private`` also covers loopback, link-local and other
    special-purpose blocks, which are public for our purposes.
    """
    a = ip(addr)
    return any(a in net for net in PRIVATE_NETWORKS)


class Flag(enum.Flag):
    SYN = enum.auto()
    ACK = enum.auto()
    RST = enum.auto()


SYN = Flag.SYN
SYNACK = Flag.SYN | Flag.ACK
RST = Flag.RST
RSTACK = Flag.RST | Flag.ACK
ALLOWED_FLAGS = (SYN, SYNACK, RST, RSTACK)

_FLAG_NAMES = {SYN: "S", SYNACK: "SA", RST: "R", RSTACK: "RA"}
_FLAG_PARSE = {v: k for k, v in _FLAG_NAMES.items()}


def flag_str(flags: Flag) -> str:
    return _FLAG_NAMES[flags]


def parse_flags(text: str) -> Flag:
    try:
        return _FLAG_PARSE[text]
    except KeyError:
        raise ValueError(f"unsupported TCP flag combination {text!r}") from None


class NatpenError(Exception):
    """Base class for scanner errors."""


class SpoofUnsupported(NatpenError):
    pass


class InsufficientData(NatpenError):
    pass


class MissingSamples(NatpenError):
    pass


class NoResponse(NatpenError):
    pass


class NoisySeriesAbort(NatpenError):
    pass


class ConfigError(NatpenError):
    pass


@dataclass(frozen=True)
class Packet:
    src_ip: Ipv4Addr
    dst_ip: Ipv4Addr
    src_port: int
    dst_port: int
    flags: Flag
    seq: int = 0
    ack: int = 0
    ipid: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "src_ip", ip(self.src_ip))
        object.__setattr__(self, "dst_ip", ip(self.dst_ip))
        if self.flags not in ALLOWED_FLAGS:
            raise ValueError(f"flag set {self.flags!r} is not one of SYN, SYN-ACK, RST, RST-ACK")
        for name, bits in (("src_port", 16), ("dst_port", 16), ("ipid", 16), ("seq", 32), ("ack", 32)):
            v = getattr(self, name)
            if not 0 <= v < (1 << bits):
                raise ValueError(f"{name}={v} out of range for {bits}-bit field")

    def reply(self, flags: Flag, *, seq: int = 0, ack: int = 0, ipid: int = 0) -> "Packet":
        """Packet travelling the opposite way on the same flow."""
        return Packet(self.dst_ip, self.src_ip, self.dst_port, self.src_port, flags, seq, ack, ipid)

    def to_dict(self) -> dict[str, Any]:
        return {
            "src": str(self.src_ip),
            "dst": str(self.dst_ip),
            "sport": self.src_port,
            "dport": self.dst_port,
            "flags": flag_str(self.flags),
            "seq": self.seq,
            "ack": self.ack,
            "ipid": self.ipid,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Packet":
        return cls(
            ip(d["src"]), ip(d["dst"]), int(d["sport"]), int(d["dport"]),
            parse_flags(d["flags"]), int(d.get("seq", 0)), int(d.get("ack", 0)), int(d.get("ipid", 0)),
        )


def ipid_delta(a: int, b: int) -> int:
    """Forward distance from ``a`` to ``b`` on the 16-bit counter."""
    return (b - a) % IPID_MOD


def is_forward_step(a: int, b: int) -> bool:
    # serial-number comparison: half the ring counts as "ahead"
    return 0 < ipid_delta(a, b) < HALF_RANGE


@dataclass(frozen=True)
class IpidSample:
    offset_s: int
    value: Optional[int]


@dataclass(frozen=True)
class IpidSeries:
    """IPID values harvested at a fixed cadence; ``None`` marks a timeout."""

    interval_s: int
    samples: tuple[IpidSample, ...]

    def __post_init__(self) -> None:
        if self.interval_s <= 0:
            raise ValueError("interval_s must be positive")
        for i, s in enumerate(self.samples):
            if s.offset_s != i * self.interval_s:
                raise ValueError(f"sample {i} has offset {s.offset_s}, expected {i * self.interval_s}")
            if s.value is not None and not 0 <= s.value < IPID_MOD:
                raise ValueError(f"IPID {s.value} out of range")

    @classmethod
    def from_values(cls, values: Iterable[Optional[int]], interval_s: int = 1) -> "IpidSeries":
        return cls(interval_s, tuple(IpidSample(i * interval_s, v) for i, v in enumerate(values)))

    @property
    def values(self) -> list[Optional[int]]:
        return [s.value for s in self.samples]

    @property
    def n(self) -> int:
        return len(self.samples)

    def none_count(self) -> int:
        return sum(1 for s in self.samples if s.value is None)

    def present(self) -> list[tuple[int, int]]:
        """(index, value) for every answered probe."""
        return [(i, s.value) for i, s in enumerate(self.samples) if s.value is not None]

    def adjacent_pairs(self) -> list[tuple[int, int, int, int]]:
        """Consecutive answered samples as (i, a, j, b), possibly bridging gaps."""
        p = self.present()
        return [(i, a, j, b) for (i, a), (j, b) in zip(p, p[1:])]

    def to_dict(self) -> dict[str, Any]:
        return {"interval_s": self.interval_s, "values": self.values}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "IpidSeries":
        return cls.from_values(d["values"], d["interval_s"])


class OutpostStatus(enum.Enum):
    NOT_ALIVE = "NotAlive"
    NO_RST_RESPONSE = "NoRstResponse"
    ZERO_IPID = "ZeroIpid"
    TOO_NOISY = "TooNoisy"
    NOT_SHARED_IPID = "NotSharedIpid"
    SPOOFED_PUBLIC_FILTERED = "SpoofedPublicFiltered"
    SPOOFED_PRIVATE_FILTERED = "SpoofedPrivateFiltered"
    INCONCLUSIVE = "Inconclusive"
    QUALIFIED = "QualifiedOutpost"


class PenetrationStatus(enum.Enum):
    HOLE_PRESENT = "HolePresent"
    HOLE_ABSENT = "HoleAbsent"
    INCONCLUSIVE = "Inconclusive"


@dataclass(frozen=True)
class OutpostVerdict:
    status: OutpostStatus
    evidence: dict[str, Any] = field(default_factory=dict)

    @property
    def qualified(self) -> bool:
        return self.status is OutpostStatus.QUALIFIED


@dataclass(frozen=True)
class PenetrationVerdict:
    status: PenetrationStatus
    probed_private_ip: Ipv4Addr
    evidence: dict[str, Any] = field(default_factory=dict)


def jsonable(obj: Any) -> Any:
    """Recursively turn evidence payloads into plain JSON values."""
    if isinstance(obj, (IpidSeries, Packet)) or hasattr(obj, "to_dict"):
        return jsonable(obj.to_dict())
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, ipaddress.IPv4Address):
        return str(obj)
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    return obj


def as_values(series: Union[IpidSeries, Sequence[Optional[int]]]) -> list[Optional[int]]:
    return series.values if isinstance(series, IpidSeries) else list(series)
