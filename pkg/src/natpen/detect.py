"""NAT-penetration detection through a qualified outpost.

Steps per outpost: time its SYN-ACK retransmissions, calibrate the
measured schedule, then per private address send K spoofed SYNs and
watch whether the outpost's counter jumps by K+1 exactly when the
retransmissions are due (no hole) or only ticks along with our probes
(an internal host answered and cancelled them).
"""

from __future__ import annotations

import ipaddress
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional, Sequence, Union

from .core import (
    RST,
    SYN,
    SYNACK,
    InsufficientData,
    Ipv4Addr,
    IpidSeries,
    MissingSamples,
    NatpenError,
    NoisySeriesAbort,
    NoResponse,
    Packet,
    PenetrationStatus,
    PenetrationVerdict,
    ip,
    ipid_delta,
)
from .outpost import choose_m, pick_band, send_spoofed_syns
from .probe import NoiseEstimate, ProbeParams, Prober, estimate_noise, lost_allowance, noise_allowance
from .transport import FlowMatch


@dataclass(frozen=True)
class RetransSchedule:
    offsets_s: tuple[int, ...]
    calibrated: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "offsets_s", tuple(self.offsets_s))
        if any(o <= 0 for o in self.offsets_s):
            raise ValueError("retransmission offsets must be positive")
        if any(b <= a for a, b in zip(self.offsets_s, self.offsets_s[1:])):
            raise ValueError("retransmission offsets must be strictly increasing")

    def to_dict(self) -> dict[str, Any]:
        return {"offsets_s": list(self.offsets_s), "calibrated": self.calibrated}


def is_doubling(offsets: Sequence[int]) -> bool:
    """Each retransmission gap is twice the previous; the first gap is the first offset."""
    if not offsets or offsets[0] <= 0:
        return False
    gaps = [offsets[0]] + [b - a for a, b in zip(offsets, offsets[1:])]
    return all(g2 == 2 * g1 for g1, g2 in zip(gaps, gaps[1:]))


def calibrate(r: RetransSchedule) -> RetransSchedule:
    """Repair a schedule read one second early or late by a uniform +-1 shift."""
    if not r.offsets_s:
        raise ValueError("cannot calibrate an empty schedule")
    if is_doubling(r.offsets_s):
        return RetransSchedule(r.offsets_s, True)
    shifted = [tuple(o + d for o in r.offsets_s) for d in (1, -1)]
    fits = [s for s in shifted if is_doubling(s)]
    if len(fits) == 1:
        return RetransSchedule(fits[0], True)
    return RetransSchedule(r.offsets_s, False)


@dataclass(frozen=True)
class DetectionParams:
    k: Optional[int] = None  # None: sized from the pre-series noise
    # floor on the noise-derived K: with K=2 one lost spoofed SYN mimics the hole-present signal
    min_k: int = 3
    observe_window_s: int = 25
    post_send_delay_ms: int = 500
    neighbor_extension: bool = True
    pre_series: ProbeParams = ProbeParams(10, 1)
    checked_offsets: Optional[int] = None  # None: every offset inside the window
    min_checked: int = 2
    noise_threshold_pps: float = 6.0
    max_attempts: int = 3
    timeout_s: float = 1.0

    def __post_init__(self) -> None:
        if self.k is not None and self.k < 1:
            raise ValueError("k must be positive")
        if self.min_checked < 1 or (self.checked_offsets is not None and self.checked_offsets < self.min_checked):
            raise ValueError("checked_offsets must be >= min_checked >= 1")


def measure_retrans(prober: Prober, outpost: Union[str, Ipv4Addr], observe_window_s: int = 25,
                    timeout_s: float = 1.0, port: Optional[int] = None) -> RetransSchedule:
    """Open a half connection, stay silent, and time the SYN-ACK retransmissions."""
    outpost = ip(outpost)
    port = prober.port if port is None else port
    tr = prober.transport
    lport = prober.local_port()
    flow = FlowMatch(outpost, port, lport, (SYNACK,))
    with tr.suppress_local_rst(flow):
        tr.send(Packet(prober.scanner_ip, outpost, lport, port, SYN, prober.seq()))
        first = tr.recv_match(flow, timeout_s)
        if first is None:
            raise NoResponse(f"{outpost}:{port} sent no SYN-ACK")
        t0 = tr.now_ms
        arrivals = tr.collect(flow, t0 + observe_window_s * 1000)
    tr.send(first.reply(RST, seq=first.ack))
    offsets = sorted({round((t - t0) / 1000) for t, _ in arrivals} - {0})
    return RetransSchedule(tuple(offsets), False)


@dataclass(frozen=True)
class PenetrationRound:
    private_ip: Ipv4Addr
    k: int
    pre: IpidSeries
    post: IpidSeries
    pre_noise: NoiseEstimate

    def to_dict(self) -> dict[str, Any]:
        return {
            "private_ip": str(self.private_ip),
            "k": self.k,
            "ipids5": self.pre.to_dict(),
            "ipids6": self.post.to_dict(),
            "pre_noise_pps": self.pre_noise.rate_pps,
        }


def _checked(schedule: RetransSchedule, params: DetectionParams) -> tuple[int, ...]:
    offs = tuple(o for o in schedule.offsets_s if o <= params.observe_window_s)
    return offs if params.checked_offsets is None else offs[: params.checked_offsets]


def penetration_probe(prober: Prober, outpost: Union[str, Ipv4Addr], private_ip: Union[str, Ipv4Addr],
                      schedule: RetransSchedule, params: DetectionParams = DetectionParams()) -> PenetrationRound:
    """Bracket K spoofed private-source SYNs with two IPID series, then reset the K flows."""
    outpost, private_ip = ip(outpost), ip(private_ip)
    tr = prober.transport
    tr.require(spoof=True, synack=True)
    checked = _checked(schedule, params)
    if len(checked) < params.min_checked:
        raise InsufficientData(f"schedule {schedule.offsets_s} has fewer than {params.min_checked} offsets")

    tr.reserve(outpost, params.pre_series.n)
    pre = prober.series(outpost, params.pre_series)
    try:
        noise = estimate_noise(pre)
    except InsufficientData:
        raise MissingSamples("pre-series has fewer than two answered probes") from None
    if noise.rate_pps > params.noise_threshold_pps:
        raise NoisySeriesAbort(f"{outpost} noise {noise.rate_pps:.2f} pps above threshold")
    k = params.k if params.k is not None else max(params.min_k, choose_m(noise))

    n_post = checked[-1] + 2
    tr.reserve(outpost, 2 * k + n_post)
    syns = send_spoofed_syns(prober, outpost, private_ip, k, duplicated=False)
    start = tr.now_ms + params.post_send_delay_ms
    post = prober.series(outpost, ProbeParams(n_post, 1, params.timeout_s), start_ms=start)
    for syn in syns:
        tr.send(Packet(syn.src_ip, syn.dst_ip, syn.src_port, syn.dst_port, RST, (syn.seq + 1) % (1 << 32)))
    return PenetrationRound(private_ip, k, pre, post, noise)


def _window_class(inc: int, window_s: int, k: int, rate: float) -> Optional[str]:
    budget = noise_allowance(rate, window_s)
    expected_noise = rate * window_s
    return pick_band(inc, [
        ("present", 1, window_s + budget, window_s + expected_noise),
        ("absent", k + 1 - lost_allowance(k), k + window_s + budget, k + window_s + expected_noise),
    ])


def decide(ipids6: IpidSeries, r: RetransSchedule, k: int, noise: NoiseEstimate, *,
           neighbor_extension: bool = True, private_ip: Union[str, Ipv4Addr] = "0.0.0.0",
           min_checked: int = 2, max_checked: Optional[int] = None) -> PenetrationVerdict:
    """Read the counter jumps at the retransmission times.

    Every checked offset showing K+1 means the K flows kept retransmitting
    (HoleAbsent); every checked offset showing only our own probe means
    something inside reset them (HolePresent); anything else is
    Inconclusive.
    """
    vals = ipids6.values
    n = len(vals)
    offsets = [t for t in r.offsets_s if 1 <= t <= n - 1]
    if max_checked is not None:
        offsets = offsets[:max_checked]
    evidence: dict[str, Any] = {"schedule": r, "k": k, "noise_pps": noise.rate_pps, "ipids6": ipids6, "checks": []}
    addr = ip(private_ip)
    if len(offsets) < min_checked:
        evidence["reason"] = "too few offsets in span"
        return PenetrationVerdict(PenetrationStatus.INCONCLUSIVE, addr, evidence)

    def inc(a: int, b: int) -> Optional[int]:
        if 0 <= a < n and 0 <= b < n and vals[a] is not None and vals[b] is not None:
            return ipid_delta(vals[a], vals[b])
        return None

    labels = []
    for t in offsets:
        strict = inc(t - 1, t)
        label = None if strict is None else _window_class(strict, 1, k, noise.rate_pps)
        check: dict[str, Any] = {"offset": t, "strict": strict, "label": label}
        if label is None and neighbor_extension:
            ext = {"after": inc(t - 1, t + 1), "before": inc(t - 2, t)}
            check.update(ext)
            if strict is None and ext["after"] is None and ext["before"] is None:
                raise MissingSamples(f"no usable samples around offset {t}")
            found = {_window_class(v, 2, k, noise.rate_pps) for v in ext.values() if v is not None} - {None}
            # both widened windows conforming but disagreeing is no answer
            label = found.pop() if len(found) == 1 else None
            check["label"] = label
        elif strict is None:
            raise MissingSamples(f"sample missing at offset {t}")
        evidence["checks"].append(check)
        labels.append(label)

    if all(lbl == "absent" for lbl in labels):
        status = PenetrationStatus.HOLE_ABSENT
    elif all(lbl == "present" for lbl in labels):
        status = PenetrationStatus.HOLE_PRESENT
    else:
        status = PenetrationStatus.INCONCLUSIVE
    return PenetrationVerdict(status, addr, evidence)


def quiet_noise(pre: IpidSeries, post: IpidSeries, offsets: Iterable[int]) -> NoiseEstimate:
    """Noise pooled from the pre-series and the parts of the post-series no retransmission can touch."""
    offs = list(offsets)
    noise = 0
    seconds = 0
    pairs = 0
    for series, skip in ((pre, False), (post, True)):
        for i, a, j, b in series.adjacent_pairs():
            if skip and any(i < t + 1 and j > t - 2 for t in offs):
                continue
            g = j - i
            noise += ipid_delta(a, b) - g
            seconds += g * series.interval_s
            pairs += 1
    if not pairs:
        raise InsufficientData("no quiet sample pairs")
    return NoiseEstimate(max(0.0, noise / seconds), pairs)


def detect_address(prober: Prober, outpost: Union[str, Ipv4Addr], private_ip: Union[str, Ipv4Addr],
                   schedule: RetransSchedule, params: DetectionParams = DetectionParams()) -> PenetrationVerdict:
    """Probe one private address, retrying inconclusive rounds up to ``params.max_attempts``."""
    private_ip = ip(private_ip)
    verdict = PenetrationVerdict(PenetrationStatus.INCONCLUSIVE, private_ip, {"reason": "no attempt"})
    attempts = []
    for _ in range(params.max_attempts):
        try:
            rnd = penetration_probe(prober, outpost, private_ip, schedule, params)
            noise = quiet_noise(rnd.pre, rnd.post, schedule.offsets_s)
            verdict = decide(rnd.post, schedule, rnd.k, noise, neighbor_extension=params.neighbor_extension,
                             private_ip=private_ip, min_checked=params.min_checked,
                             max_checked=params.checked_offsets)
            verdict.evidence["round"] = rnd
        except (NoisySeriesAbort, MissingSamples, InsufficientData) as exc:
            verdict = PenetrationVerdict(PenetrationStatus.INCONCLUSIVE, private_ip,
                                         {"error": type(exc).__name__, "detail": str(exc)})
        attempts.append(verdict.status.value)
        if verdict.status is not PenetrationStatus.INCONCLUSIVE:
            break
    verdict.evidence["attempts"] = attempts
    return verdict


def measure_and_calibrate(prober: Prober, outpost: Union[str, Ipv4Addr], params: DetectionParams = DetectionParams(),
                          attempts: int = 3) -> RetransSchedule:
    """Measure until two readings agree (at most ``attempts``), then calibrate.

    One lost retransmission can turn a true [1,3,7,15] into [3,7,15], whose
    -1 shift happens to fit the doubling pattern; an agreeing second reading
    guards against calibrating such a hole into a wrong schedule.  Without
    agreement the reading with the most retransmissions wins.
    """
    readings: list[RetransSchedule] = []
    failures = 0
    last: Optional[NatpenError] = None
    while len(readings) + failures < attempts:
        try:
            r = measure_retrans(prober, outpost, params.observe_window_s, params.timeout_s)
        except NoResponse as exc:
            failures += 1
            last = exc
            continue
        if r in readings:
            return calibrate(r)
        readings.append(r)
    if not readings:
        assert last is not None
        raise last
    return calibrate(max(readings, key=lambda r: len(r.offsets_s)))


def sweep_private_range(prober: Prober, outpost: Union[str, Ipv4Addr], subnet: Union[str, ipaddress.IPv4Network],
                        params: DetectionParams = DetectionParams(),
                        schedule: Optional[RetransSchedule] = None) -> list[tuple[Ipv4Addr, PenetrationVerdict]]:
    """Test every host address in ``subnet`` through ``outpost``."""
    net = ipaddress.IPv4Network(subnet, strict=False)
    addrs = list(net.hosts()) or [net.network_address]
    if schedule is None:
        try:
            schedule = measure_and_calibrate(prober, outpost, params)
        except NoResponse as exc:
            return [(a, PenetrationVerdict(PenetrationStatus.INCONCLUSIVE, a, {"error": "NoResponse", "detail": str(exc)}))
                    for a in addrs]
    results = []
    for a in addrs:
        try:
            v = detect_address(prober, outpost, a, schedule, params)
        except NatpenError as exc:
            v = PenetrationVerdict(PenetrationStatus.INCONCLUSIVE, a, {"error": type(exc).__name__, "detail": str(exc)})
        results.append((a, v))
    return results
