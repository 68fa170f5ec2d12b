"""Cheap first-stage screens: SYN liveness and the SYN-ACK/RST IPID check."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Optional, Union

from .core import RST, RSTACK, SYN, SYNACK, Ipv4Addr, Packet, ip
from .probe import Prober
from .transport import FlowMatch


@dataclass(frozen=True)
class PrefilterResult:
    target: Ipv4Addr
    alive: bool
    rst_seen: bool
    first_ipid: Optional[int]

    @property
    def passed(self) -> bool:
        # a shared counter sitting at exactly zero is a 1-in-65536 event
        return self.alive and self.rst_seen and self.first_ipid is not None and self.first_ipid != 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "target": str(self.target),
            "alive": self.alive,
            "rst_seen": self.rst_seen,
            "first_ipid": self.first_ipid,
            "passed": self.passed,
        }


def syn_probe(prober: Prober, target: Union[str, Ipv4Addr], port: Optional[int] = None,
              timeout_s: float = 1.0) -> bool:
    """Alive iff a SYN to ``port`` draws a SYN-ACK; the half-open flow is reset right away."""
    target = ip(target)
    port = prober.port if port is None else port
    tr = prober.transport
    lport = prober.local_port()
    flow = FlowMatch(target, port, lport, (SYNACK, RST, RSTACK))
    with tr.suppress_local_rst(flow):
        tr.send(Packet(prober.scanner_ip, target, lport, port, SYN, prober.seq()))
        resp = tr.recv_match(flow, timeout_s)
        if resp is None or resp.flags != SYNACK:
            return False
        tr.send(resp.reply(RST, seq=resp.ack))
    return True


def synack_probe(prober: Prober, target: Union[str, Ipv4Addr], port: Optional[int] = None,
                 timeout_s: float = 1.0) -> tuple[bool, Optional[int]]:
    ipid = prober.probe_once(target, timeout_s, port)
    return ipid is not None, ipid


def prefilter(prober: Prober, target: Union[str, Ipv4Addr], port: Optional[int] = None,
              timeout_s: float = 1.0) -> PrefilterResult:
    target = ip(target)
    alive = syn_probe(prober, target, port, timeout_s)
    rst_seen, first = synack_probe(prober, target, port, timeout_s)
    return PrefilterResult(target, alive, rst_seen, first)
