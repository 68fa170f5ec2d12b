"""Deterministic discrete-event network simulator.

The simulator plays every role the scanner cannot observe directly: the
outposts (public hosts that double as NAT gateways), the private hosts
behind them, the links between everything, and the scanner's own kernel.
Time is virtual, in integer milliseconds, and only moves when events are
processed.  Given the same scenario, seed and stimulus the event log is
bit-identical between runs.
"""

from __future__ import annotations

import heapq
import itertools
import json
from dataclasses import dataclass, replace
from typing import Any, Callable, IO, Iterable, Optional, Union

import numpy as np

from .core import (
    IPID_MOD,
    RST,
    RSTACK,
    SYN,
    SYNACK,
    Ipv4Addr,
    Packet,
    flag_str,
    ip,
    is_private,
)
from .scenario import (
    ConstantIpid,
    FilterPolicy,
    GlobalCounter,
    IpidPolicy,
    OutpostSpec,
    PerFlowCounter,
    RandomIpid,
    ScenarioConfig,
)

LAN_LATENCY_MS = 1
NOISE_PEER = ip("0.0.0.0")

FlowKey = tuple[Ipv4Addr, int, int]  # (remote ip, remote port, local port)


@dataclass(frozen=True)
class Event:
    """One line of the simulator's event log.

    ``kind`` is one of ``send`` (scanner stimulus entering the network),
    ``emit`` (a host transmitted a packet), ``noise`` (cross-traffic
    emission that only advances the IPID counter), ``accept`` (a host
    received a packet), ``drop`` (a packet vanished, see ``reason``),
    ``recv`` (a packet reached the scanner) and ``liveness``.
    """

    time_ms: int
    kind: str
    node: str
    packet: Optional[Packet] = None
    ipid: Optional[int] = None
    spoofed: bool = False
    reason: str = ""

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"time_ms": self.time_ms, "kind": self.kind, "node": self.node}
        if self.packet is not None:
            d.update(self.packet.to_dict())
        else:
            d.update({"src": self.node, "dst": "", "flags": ""})
            d["ipid"] = self.ipid
        d["spoofed"] = self.spoofed
        if self.reason:
            d["reason"] = self.reason
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Event":
        pkt = Packet.from_dict(d) if d.get("flags") else None
        return cls(
            int(d["time_ms"]), d["kind"], d["node"], pkt,
            None if pkt is not None else d.get("ipid"),
            bool(d.get("spoofed", False)), d.get("reason", ""),
        )


class IpidSource:
    """Stamps IPIDs on a host's outgoing packets according to its policy."""

    def __init__(self, policy: IpidPolicy):
        self.policy = policy
        self.counter = getattr(policy, "initial", 0)
        self.per_flow: dict[Ipv4Addr, int] = {}
        self.emitted = 0
        self._rng = np.random.default_rng(policy.seed) if isinstance(policy, RandomIpid) else None

    def next(self, remote: Ipv4Addr) -> int:
        self.emitted += 1
        p = self.policy
        if isinstance(p, GlobalCounter):
            self.counter = (self.counter + 1) % IPID_MOD
            return self.counter
        if isinstance(p, PerFlowCounter):
            v = (self.per_flow.get(remote, p.initial) + 1) % IPID_MOD
            self.per_flow[remote] = v
            return v
        if isinstance(p, RandomIpid):
            return int(self._rng.integers(0, IPID_MOD))
        if isinstance(p, ConstantIpid):
            return p.value
        raise TypeError(p)


@dataclass
class _Flow:
    packet: Packet  # the SYN-ACK as first sent, replayed on retransmission
    first_ms: int
    index: int = 0


@dataclass
class _Wire:
    packet: Packet
    origin: str
    spoofed: bool


class _Outpost:
    def __init__(self, spec: OutpostSpec, noise_rng: np.random.Generator):
        self.spec = spec
        self.addr = spec.public_ip
        self.ipids = IpidSource(spec.ipid_policy)
        self.flows: dict[FlowKey, _Flow] = {}
        self.alive = {h.private_ip: h.alive for h in spec.internal_hosts}
        self.host_ipids = {h.private_ip: IpidSource(GlobalCounter(0)) for h in spec.internal_hosts}
        self.noise_rng = noise_rng
        self.noise_clock_s = 0.0
        self.retrans_offsets_ms = [o * 1000 for o in spec.retrans.offsets()]


class Network:
    """Virtual-time network built from a :class:`ScenarioConfig`."""

    def __init__(self, config: ScenarioConfig, seed: Optional[int] = None):
        self.config = config
        self.seed = config.rng_seed if seed is None else seed
        self.scanner_ip = config.scanner_ip
        self.now_ms = 0
        self.log: list[Event] = []
        self.inbox: list[tuple[int, Packet]] = []
        self.suppressed: set[FlowKey] = set()
        self._heap: list[tuple[int, int, Callable[..., None], tuple]] = []
        self._tiebreak = itertools.count()
        self._link_rng = np.random.default_rng([self.seed, 0])
        self._isn_rng = np.random.default_rng([self.seed, 1])
        self.outposts: dict[Ipv4Addr, _Outpost] = {}
        self._gateway_of: dict[Ipv4Addr, _Outpost] = {}
        for spec in config.outposts:
            op = _Outpost(spec, np.random.default_rng([self.seed, 2, int(spec.public_ip)]))
            self.outposts[spec.public_ip] = op
            for h in spec.internal_hosts:
                self._gateway_of[h.private_ip] = op
            if spec.noise_rate_pps > 0:
                self._schedule_noise(op)

    # -- event loop -------------------------------------------------------

    def schedule(self, at_ms: int, action: Callable[..., None], *args: Any) -> None:
        if at_ms < self.now_ms:
            raise ValueError(f"cannot schedule in the past ({at_ms} < {self.now_ms})")
        heapq.heappush(self._heap, (at_ms, next(self._tiebreak), action, args))

    def next_event_time(self) -> Optional[int]:
        return self._heap[0][0] if self._heap else None

    def step(self) -> None:
        t, _, action, args = heapq.heappop(self._heap)
        self.now_ms = t
        action(*args)

    def advance_to(self, t_ms: int) -> list[Event]:
        """Process every event stamped ``<= t_ms``; return the log entries produced."""
        if t_ms < self.now_ms:
            raise ValueError(f"clock cannot run backwards ({t_ms} < {self.now_ms})")
        mark = len(self.log)
        while self._heap and self._heap[0][0] <= t_ms:
            self.step()
        self.now_ms = t_ms
        return self.log[mark:]

    def run_until(self, t_ms: int, stop: Callable[[], bool]) -> bool:
        """Advance towards ``t_ms`` but return early once ``stop()`` holds."""
        if stop():
            return True
        while self._heap and self._heap[0][0] <= t_ms:
            self.step()
            if stop():
                return True
        self.now_ms = max(self.now_ms, t_ms)
        return False

    # -- stimulus ---------------------------------------------------------

    def inject(self, pkt: Packet, at_ms: Optional[int] = None) -> None:
        """Scanner-originated packet entering the network (possibly spoofed)."""
        if at_ms is not None and at_ms != self.now_ms:
            self.schedule(at_ms, self.inject, pkt)
            return
        spoofed = pkt.src_ip != self.scanner_ip
        self._record("send", str(self.scanner_ip), pkt, spoofed=spoofed)
        self._route_public(_Wire(pkt, str(self.scanner_ip), spoofed))

    def run_script(self, script: Iterable[tuple[int, Packet]], until_ms: int) -> list[Event]:
        """Replay a stimulus script of ``(time_ms, packet)`` pairs."""
        for at, pkt in script:
            self.schedule(at, self.inject, pkt)
        return self.advance_to(until_ms)

    def deliver(self, pkt: Packet, at_ms: Optional[int] = None, horizon_ms: int = 2000) -> list[tuple[int, Packet]]:
        """Inject ``pkt`` and return what reaches the scanner within ``horizon_ms``."""
        start = self.now_ms if at_ms is None else at_ms
        mark = len(self.inbox)
        if start == self.now_ms:
            self.inject(pkt)
        else:
            self.schedule(start, self.inject, pkt)
        self.advance_to(start + horizon_ms)
        return list(self.inbox[mark:])

    # -- ground-truth controls ---------------------------------------------

    def set_alive(self, private_ip: Union[str, Ipv4Addr], alive: bool, at_ms: Optional[int] = None) -> None:
        addr = ip(private_ip)
        if at_ms is not None and at_ms != self.now_ms:
            self.schedule(at_ms, self.set_alive, addr, alive)
            return
        op = self._gateway_of[addr]
        op.alive[addr] = alive
        self._record("liveness", str(addr), reason="up" if alive else "down")

    def inject_noise(self, public_ip: Union[str, Ipv4Addr], count: int, at_ms: Optional[int] = None) -> None:
        """Emit ``count`` cross-traffic packets from an outpost in one burst."""
        op = self.outposts[ip(public_ip)]
        if at_ms is not None and at_ms != self.now_ms:
            self.schedule(at_ms, self.inject_noise, op.addr, count)
            return
        for _ in range(count):
            self._record("noise", str(op.addr), ipid=op.ipids.next(NOISE_PEER))

    # -- introspection ------------------------------------------------------

    def counter(self, public_ip: Union[str, Ipv4Addr]) -> int:
        return self.outposts[ip(public_ip)].ipids.counter

    def emitted(self, public_ip: Union[str, Ipv4Addr]) -> int:
        return self.outposts[ip(public_ip)].ipids.emitted

    def pending_flows(self, public_ip: Union[str, Ipv4Addr]) -> dict[FlowKey, int]:
        """Half-open flows that still have retransmissions queued, with the count left."""
        op = self.outposts[ip(public_ip)]
        n = len(op.retrans_offsets_ms)
        return {k: n - f.index for k, f in op.flows.items() if f.index < n}

    def dump_log(self, fh: IO[str], extra: Optional[dict[str, Any]] = None) -> None:
        for ev in self.log:
            d = ev.to_dict()
            if extra:
                d.update(extra)
            fh.write(json.dumps(d, sort_keys=True) + "\n")

    # -- internals ----------------------------------------------------------

    def _record(self, kind: str, node: str, pkt: Optional[Packet] = None, *, ipid: Optional[int] = None,
                spoofed: bool = False, reason: str = "") -> None:
        self.log.append(Event(self.now_ms, kind, node, pkt, ipid, spoofed, reason))

    def _transmit(self, wire: _Wire, latency_ms: int, on_arrive: Callable[[_Wire], None]) -> None:
        loss = self.config.link_loss_prob
        if loss > 0 and self._link_rng.random() < loss:
            self._record("drop", wire.origin, wire.packet, spoofed=wire.spoofed, reason="loss")
            return
        delay = latency_ms
        if self.config.jitter_ms > 0:
            delay += int(self._link_rng.integers(0, self.config.jitter_ms + 1))
        self.schedule(self.now_ms + delay, on_arrive, wire)

    def _route_public(self, wire: _Wire) -> None:
        dst = wire.packet.dst_ip
        if dst == self.scanner_ip:
            self._transmit(wire, self.config.latency_ms, self._arrive_scanner)
        elif dst in self.outposts:
            self._transmit(wire, self.config.latency_ms, self._arrive_outpost)
        else:
            self._record("drop", wire.origin, wire.packet, spoofed=wire.spoofed, reason="unroutable")

    def _emit(self, op: _Outpost, pkt: Packet) -> None:
        pkt = replace(pkt, ipid=op.ipids.next(pkt.dst_ip))
        self._record("emit", str(op.addr), pkt)
        wire = _Wire(pkt, str(op.addr), False)
        if is_private(pkt.dst_ip):
            if not op.spec.hole_present:
                self._record("drop", str(op.addr), pkt, reason="no_hole")
            else:
                self._transmit(wire, LAN_LATENCY_MS, self._arrive_internal)
        else:
            self._route_public(wire)

    def _arrive_outpost(self, wire: _Wire) -> None:
        op = self.outposts[wire.packet.dst_ip]
        pkt = wire.packet
        from_inside = ip(wire.origin) in op.alive
        if not from_inside:
            policy = op.spec.filter_policy
            if policy is not FilterPolicy.NO_FILTERING and is_private(pkt.src_ip):
                self._record("drop", str(op.addr), pkt, spoofed=wire.spoofed, reason="filter")
                return
            if policy is FilterPolicy.BLOCK_ALL_SPOOFED and wire.spoofed:
                self._record("drop", str(op.addr), pkt, spoofed=wire.spoofed, reason="filter")
                return
        if pkt.flags == SYN and op.spec.drops_syn:
            self._record("drop", str(op.addr), pkt, spoofed=wire.spoofed, reason="host_filter")
            return
        self._record("accept", str(op.addr), pkt, spoofed=wire.spoofed)
        self._outpost_state_machine(op, pkt)

    def _outpost_state_machine(self, op: _Outpost, pkt: Packet) -> None:
        key: FlowKey = (pkt.src_ip, pkt.src_port, pkt.dst_port)
        if pkt.flags == SYN:
            if pkt.dst_port not in op.spec.open_ports:
                self._emit(op, pkt.reply(RSTACK, ack=(pkt.seq + 1) % (1 << 32)))
                return
            flow = op.flows.get(key)
            if flow is not None:
                # duplicated SYN: answer again, but no second retransmission timer
                self._emit(op, replace(flow.packet, ack=(pkt.seq + 1) % (1 << 32)))
                return
            isn = int(self._isn_rng.integers(0, 1 << 32))
            synack = pkt.reply(SYNACK, seq=isn, ack=(pkt.seq + 1) % (1 << 32))
            op.flows[key] = _Flow(synack, self.now_ms)
            self._emit(op, synack)
            self.schedule(self.now_ms + op.retrans_offsets_ms[0], self._retransmit, op, key, op.flows[key])
        elif pkt.flags == SYNACK:
            if op.spec.answers_synack:
                self._emit(op, pkt.reply(RST, seq=pkt.ack))
        else:  # RST / RST-ACK tear down any half-open flow
            op.flows.pop(key, None)

    def _retransmit(self, op: _Outpost, key: FlowKey, flow: _Flow) -> None:
        if op.flows.get(key) is not flow:
            return  # reset in the meantime
        self._emit(op, flow.packet)
        flow.index += 1
        if flow.index < len(op.retrans_offsets_ms):
            self.schedule(flow.first_ms + op.retrans_offsets_ms[flow.index], self._retransmit, op, key, flow)
        else:
            del op.flows[key]

    def _arrive_internal(self, wire: _Wire) -> None:
        pkt = wire.packet
        op = self._gateway_of.get(pkt.dst_ip)
        if op is None or not op.alive.get(pkt.dst_ip, False):
            self._record("drop", str(pkt.dst_ip), pkt, reason="host_down")
            return
        self._record("accept", str(pkt.dst_ip), pkt)
        if pkt.flags == SYNACK:
            resp = pkt.reply(RST, seq=pkt.ack)
        elif pkt.flags == SYN:
            resp = pkt.reply(RSTACK, ack=(pkt.seq + 1) % (1 << 32))
        else:
            return
        resp = replace(resp, ipid=op.host_ipids[pkt.dst_ip].next(resp.dst_ip))
        self._record("emit", str(pkt.dst_ip), resp)
        self._transmit(_Wire(resp, str(pkt.dst_ip), False), LAN_LATENCY_MS, self._arrive_outpost)

    def _arrive_scanner(self, wire: _Wire) -> None:
        pkt = wire.packet
        self._record("recv", str(self.scanner_ip), pkt)
        self.inbox.append((self.now_ms, pkt))
        key: FlowKey = (pkt.src_ip, pkt.src_port, pkt.dst_port)
        if pkt.flags == SYNACK and key not in self.suppressed:
            # the scanner kernel resets connections it never opened
            rst = pkt.reply(RST, seq=pkt.ack)
            self._record("emit", str(self.scanner_ip), rst, reason="kernel")
            self._route_public(_Wire(rst, str(self.scanner_ip), False))

    def _schedule_noise(self, op: _Outpost) -> None:
        op.noise_clock_s += float(op.noise_rng.exponential(1.0 / op.spec.noise_rate_pps))
        at = int(op.noise_clock_s * 1000)
        self.schedule(max(at, self.now_ms), self._noise, op)

    def _noise(self, op: _Outpost) -> None:
        self._record("noise", str(op.addr), ipid=op.ipids.next(NOISE_PEER))
        self._schedule_noise(op)


def load_events(lines: Iterable[str]) -> list[dict[str, Any]]:
    return [json.loads(line) for line in lines if line.strip()]
