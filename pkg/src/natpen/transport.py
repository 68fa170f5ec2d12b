"""What the scanner sees of the network.

Two backends share one duck-typed surface: :class:`SimTransport` drives
the simulator, :class:`ReplayTransport` answers from a recorded event log.
Both keep virtual time in integer milliseconds; "waiting" just moves the
clock.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Any, Iterable, Iterator, Optional, Union

from .core import (
    SYNACK,
    Flag,
    Ipv4Addr,
    NatpenError,
    Packet,
    SpoofUnsupported,
    ip,
)
from .ratelimit import RateLimiter
from .simnet import FlowKey, Network


@dataclass(frozen=True)
class TransportCaps:
    can_spoof_source: bool = True
    accepts_unsolicited_synack: bool = True


@dataclass(frozen=True)
class FlowMatch:
    """Filter for inbound packets: remote ip/port, our local port, allowed flag sets.

    Sequence numbers are deliberately ignored; a SYN-ACK probe is stateless
    and only the IPID of the RST matters.
    """

    remote_ip: Ipv4Addr
    remote_port: int
    local_port: int
    flags: tuple[Flag, ...] = ()

    def matches(self, pkt: Packet) -> bool:
        return (
            pkt.src_ip == self.remote_ip
            and pkt.src_port == self.remote_port
            and pkt.dst_port == self.local_port
            and (not self.flags or pkt.flags in self.flags)
        )

    @property
    def key(self) -> FlowKey:
        return (self.remote_ip, self.remote_port, self.local_port)


class TraceMismatch(NatpenError):
    """The scanner tried to send something the recorded trace does not contain."""


class _TransportBase:
    scanner_ip: Ipv4Addr
    caps: TransportCaps
    limiter: Optional[RateLimiter]
    sent_count: int

    @property
    def now_ms(self) -> int:
        raise NotImplementedError

    def wait_until(self, t_ms: int) -> None:
        raise NotImplementedError

    def sleep(self, seconds: float) -> None:
        self.wait_until(self.now_ms + int(round(seconds * 1000)))

    def require(self, *, spoof: bool = False, synack: bool = False) -> None:
        if spoof and not self.caps.can_spoof_source:
            raise SpoofUnsupported("transport cannot send packets with a foreign source address")
        if synack and not self.caps.accepts_unsolicited_synack:
            raise NatpenError("transport cannot send unsolicited SYN-ACK probes")

    def reserve(self, target: Union[str, Ipv4Addr], n_packets: int) -> int:
        """Wait until ``n_packets`` to ``target`` fit the politeness budget back to back.

        Returns how many milliseconds that took.
        """
        if self.limiter is None:
            return 0
        before = self.now_ms
        self.wait_until(self.limiter.earliest(ip(target), before, n_packets))
        return self.now_ms - before

    def _pace(self, pkt: Packet) -> None:
        if pkt.src_ip != self.scanner_ip and not self.caps.can_spoof_source:
            raise SpoofUnsupported(f"cannot send from {pkt.src_ip}: spoofing unsupported")
        self.sent_count += 1
        if self.limiter is not None:
            self.wait_until(self.limiter.acquire(pkt.dst_ip, self.now_ms))


class SimTransport(_TransportBase):
    def __init__(self, network: Network, caps: TransportCaps = TransportCaps(), limiter: Optional[RateLimiter] = None):
        self.net = network
        self.scanner_ip = network.scanner_ip
        self.caps = caps
        self.limiter = limiter
        self.sent_count = 0
        self._taken: set[int] = set()

    @property
    def now_ms(self) -> int:
        return self.net.now_ms

    def wait_until(self, t_ms: int) -> None:
        if t_ms > self.net.now_ms:
            self.net.advance_to(t_ms)

    def send(self, pkt: Packet) -> None:
        self._pace(pkt)
        self.net.inject(pkt)

    def _find(self, match: FlowMatch, start: int = 0) -> Optional[int]:
        inbox = self.net.inbox
        for i in range(start, len(inbox)):
            if i not in self._taken and match.matches(inbox[i][1]):
                return i
        return None

    def recv_match(self, match: FlowMatch, timeout_s: float) -> Optional[Packet]:
        """First matching packet arriving within ``timeout_s``, else ``None``."""
        if timeout_s <= 0:
            raise ValueError("timeout_s must be positive")
        deadline = self.now_ms + int(round(timeout_s * 1000))
        scanned = 0
        found: list[int] = []

        def hit() -> bool:
            nonlocal scanned
            if scanned == len(self.net.inbox):
                return False
            i = self._find(match, scanned)
            scanned = len(self.net.inbox)
            if i is not None:
                found.append(i)
                return True
            return False

        if self.net.run_until(deadline, hit):
            i = found[0]
            self._taken.add(i)
            return self.net.inbox[i][1]
        return None

    def collect(self, match: FlowMatch, until_ms: int) -> list[tuple[int, Packet]]:
        """Every matching arrival up to ``until_ms``, with arrival times."""
        self.wait_until(until_ms)
        out = []
        for i in range(len(self.net.inbox)):
            t, pkt = self.net.inbox[i]
            if i not in self._taken and match.matches(pkt):
                self._taken.add(i)
                out.append((t, pkt))
        return out

    @contextlib.contextmanager
    def suppress_local_rst(self, flow: Union[FlowMatch, FlowKey]) -> Iterator[None]:
        """Keep the scanner kernel quiet about SYN-ACKs on ``flow`` while held."""
        key = flow.key if isinstance(flow, FlowMatch) else flow
        self.net.suppressed.add(key)
        try:
            yield
        finally:
            self.net.suppressed.discard(key)

    def stimulus_log(self) -> list[Packet]:
        return [e.packet for e in self.net.log if e.kind == "send"]


class ReplayTransport(_TransportBase):
    """Answers a deterministic scanner from a recorded simulator event log.

    Every ``send`` must match the next recorded stimulus (same packet, same
    time); responses are the recorded ``recv`` events.  Any divergence
    raises :class:`TraceMismatch`.
    """

    def __init__(self, events: Iterable[dict[str, Any]], scanner_ip: Union[str, Ipv4Addr],
                 caps: TransportCaps = TransportCaps(), limiter: Optional[RateLimiter] = None):
        self.scanner_ip = ip(scanner_ip)
        self.caps = caps
        self.limiter = limiter
        self.sent_count = 0
        self._now = 0
        evs = list(events)
        self._sends = [(int(e["time_ms"]), Packet.from_dict(e)) for e in evs if e["kind"] == "send"]
        self._recvs = [(int(e["time_ms"]), Packet.from_dict(e)) for e in evs if e["kind"] == "recv"]
        self._next_send = 0
        self._taken: set[int] = set()

    @property
    def now_ms(self) -> int:
        return self._now

    def wait_until(self, t_ms: int) -> None:
        self._now = max(self._now, t_ms)

    def send(self, pkt: Packet) -> None:
        self._pace(pkt)
        if self._next_send >= len(self._sends):
            raise TraceMismatch(f"trace exhausted; scanner sent {pkt} at {self._now} ms")
        t, rec = self._sends[self._next_send]
        if rec != pkt or t != self._now:
            raise TraceMismatch(f"expected {rec} at {t} ms, scanner sent {pkt} at {self._now} ms")
        self._next_send += 1

    def recv_match(self, match: FlowMatch, timeout_s: float) -> Optional[Packet]:
        if timeout_s <= 0:
            raise ValueError("timeout_s must be positive")
        deadline = self._now + int(round(timeout_s * 1000))
        for i, (t, pkt) in enumerate(self._recvs):
            if t > deadline:
                break
            if i not in self._taken and match.matches(pkt):
                self._taken.add(i)
                self._now = max(self._now, t)
                return pkt
        self._now = deadline
        return None

    def collect(self, match: FlowMatch, until_ms: int) -> list[tuple[int, Packet]]:
        out = []
        for i, (t, pkt) in enumerate(self._recvs):
            if t > until_ms:
                break
            if i not in self._taken and match.matches(pkt):
                self._taken.add(i)
                out.append((t, pkt))
        self.wait_until(until_ms)
        return out

    @contextlib.contextmanager
    def suppress_local_rst(self, flow: Union[FlowMatch, FlowKey]) -> Iterator[None]:
        yield  # the recorded trace already reflects the suppression

    def exhausted(self) -> bool:
        return self._next_send == len(self._sends)


def synack_match(target: Ipv4Addr, port: int, local_port: int) -> FlowMatch:
    return FlowMatch(target, port, local_port, (SYNACK,))
