"""Outpost selection: IPID checker, spoofability checker, local checker."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence, Union

from .core import (
    RST,
    SYN,
    Ipv4Addr,
    IpidSeries,
    MissingSamples,
    OutpostStatus,
    OutpostVerdict,
    Packet,
    ip,
    ipid_delta,
)
from .probe import (
    DEFAULT_MAX_NONE,
    NoiseEstimate,
    ProbeParams,
    Prober,
    ShareClass,
    classify_shared_ipid,
    estimate_noise,
    lost_allowance,
    noise_allowance,
)

DEFAULT_PRIVATE_SRC = ip("192.168.1.1")
DEFAULT_PUBLIC_SRC = ip("198.51.100.7")


class SpoofResult(enum.Enum):
    RECEIVED = "SpoofReceived"
    FILTERED = "SpoofFiltered"
    INCONCLUSIVE = "Inconclusive"


@dataclass(frozen=True)
class SpoofCheckParams:
    m: int
    pre_series: ProbeParams = ProbeParams(4, 1)
    post_series: ProbeParams = ProbeParams(4, 1)
    slack: int = 1
    noise_pps: float = 0.0
    # gap between the spoof burst and the first post-series probe
    post_delay_s: float = 0.25
    # likelihood ratio a decision needs where the two bands overlap
    min_odds: float = 3.0

    def __post_init__(self) -> None:
        if self.m < 2:
            raise ValueError("m must be at least 2")


@dataclass(frozen=True)
class SpoofCheck:
    result: SpoofResult
    increment: int
    spoofed_src: Ipv4Addr
    m: int
    pre: IpidSeries
    post: IpidSeries
    pre_start_ms: int
    post_start_ms: int
    span_s: float
    expected_noise: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "result": self.result.value,
            "increment": self.increment,
            "spoofed_src": str(self.spoofed_src),
            "m": self.m,
            "pre": self.pre.to_dict(),
            "post": self.post.to_dict(),
            "span_s": self.span_s,
            "expected_noise": self.expected_noise,
        }


def choose_m(noise: NoiseEstimate) -> int:
    """Spoofed packets needed to stand clear of the observed noise."""
    return max(2, 2 * math.ceil(noise.rate_pps))


def pick_band(value: int, bands: Sequence[tuple[str, int, int, float]]) -> Optional[str]:
    """Name of the band ``(name, lo, hi, expected)`` holding ``value``.

    Where bands overlap the value goes to the band whose expected value is
    strictly nearer; an exact tie is no decision.
    """
    hits = [(abs(value - exp), name) for name, lo, hi, exp in bands if lo <= value <= hi]
    if not hits:
        return None
    hits.sort()
    if len(hits) > 1 and hits[0][0] == hits[1][0]:
        return None
    return hits[0][1]


def poisson_odds(value: int, base: int, lam: float, shift: int, lost: int = 0, loss_prob: float = 0.0) -> float:
    """Likelihood ratio of "base + shift + Poisson(lam)" over "base + Poisson(lam)" at ``value``.

    Up to ``lost`` of the ``shift`` extra steps may be missing, each lost
    independently with ``loss_prob``.  Infinite when only the shifted
    hypothesis can produce ``value``, zero when only the unshifted one can.
    """
    lam = max(lam, 1e-3)

    def pmf(x: int) -> float:
        return 0.0 if x < 0 else math.exp(x * math.log(lam) - lam - math.lgamma(x + 1))

    hi = sum(math.comb(shift, d) * loss_prob ** d * (1 - loss_prob) ** (shift - d) * pmf(value - base - shift + d)
             for d in range(lost + 1))
    lo = pmf(value - base)
    if lo == 0:
        return math.inf if hi > 0 else 1.0
    return hi / lo


def _loss_estimate(*series: IpidSeries) -> float:
    """One-way loss rate implied by unanswered probes (two links each), Laplace-smoothed."""
    n = sum(s.n for s in series)
    nones = sum(s.none_count() for s in series)
    return (nones + 1) / (2 * (n + 2))


def send_spoofed_syns(prober: Prober, target: Ipv4Addr, src: Ipv4Addr, count: int, *, duplicated: bool,
                      port: Optional[int] = None) -> list[Packet]:
    """``count`` SYNs with a forged source.

    Duplicated SYNs share one 4-tuple (only the first opens a retransmitting
    flow); otherwise each SYN gets its own port, sequence number and IPID.
    """
    port = prober.port if port is None else port
    sport = prober.local_port()
    sent = []
    for k in range(count):
        if not duplicated and k:
            sport = prober.local_port()
        pkt = Packet(src, target, sport, port, SYN, prober.seq(), 0, prober.rng.getrandbits(16))
        prober.transport.send(pkt)
        sent.append(pkt)
    return sent


def _boundary(pre: IpidSeries, pre_start: int, post: IpidSeries, post_start: int):
    if not pre.present() or not post.present():
        raise MissingSamples("a bracketing series has no answered probe")
    i, a = pre.present()[-1]
    j, b = post.present()[0]
    span_ms = (post_start + j * post.interval_s * 1000) - (pre_start + i * pre.interval_s * 1000)
    # probes that may have landed between the two samples, the later one included
    slots = (pre.n - 1 - i) + (j + 1)
    return ipid_delta(a, b), span_ms / 1000, slots


def spoof_check(prober: Prober, target: Union[str, Ipv4Addr], spoofed_src: Union[str, Ipv4Addr],
                params: SpoofCheckParams, pre: Optional[IpidSeries] = None,
                pre_start_ms: Optional[int] = None) -> SpoofCheck:
    """Does a burst of M spoofed SYNs show up on the target's IPID counter?

    Passing ``pre``/``pre_start_ms`` reuses an earlier series as the
    "before" measurement, which is how the local checker chains onto the
    spoofability checker.  If the politeness budget forces a wait first,
    the reused series is stale and a fresh one is collected instead.
    """
    target, spoofed_src = ip(target), ip(spoofed_src)
    tr = prober.transport
    tr.require(spoof=True, synack=True)
    tail = params.m + params.post_series.n + 1
    if pre is not None:
        if pre_start_ms is None:
            raise ValueError("pre_start_ms is required with an explicit pre-series")
        if tr.reserve(target, tail):
            pre = None
    if pre is None:
        tr.reserve(target, params.pre_series.n + tail)
        pre_start_ms = tr.now_ms
        pre = prober.series(target, params.pre_series)
    syns = send_spoofed_syns(prober, target, spoofed_src, params.m, duplicated=True)
    post_start = tr.now_ms + int(round(params.post_delay_s * 1000))
    post = prober.series(target, params.post_series, start_ms=post_start)
    first = syns[0]
    # end the one half-open flow the burst created so it stops retransmitting
    tr.send(Packet(first.src_ip, first.dst_ip, first.src_port, first.dst_port, RST, (first.seq + 1) % (1 << 32)))
    inc, span_s, slots = _boundary(pre, pre_start_ms, post, post_start)
    expected_noise = noise_allowance(params.noise_pps, span_s, params.slack)
    centre = params.noise_pps * span_s
    verdict = pick_band(inc, [
        ("filtered", 1, slots + expected_noise, slots + centre),
        ("received", slots + params.m - lost_allowance(params.m), params.m + slots + expected_noise,
         params.m + slots + centre),
    ])
    if verdict is not None and slots + params.m - lost_allowance(params.m) <= inc <= slots + expected_noise:
        # both bands hold the value; the nearer centre must also be clearly more likely
        odds = poisson_odds(inc, slots, centre, params.m, lost_allowance(params.m), _loss_estimate(pre, post))
        support = odds if verdict == "received" else (1 / odds if odds else math.inf)
        if support < params.min_odds:
            verdict = None
    result = {"filtered": SpoofResult.FILTERED, "received": SpoofResult.RECEIVED}.get(verdict, SpoofResult.INCONCLUSIVE)
    return SpoofCheck(result, inc, spoofed_src, params.m, pre, post, pre_start_ms, post_start, span_s, expected_noise)


@dataclass(frozen=True)
class LocalCheck:
    result: SpoofResult
    runs: tuple[SpoofCheck, ...]

    def to_dict(self) -> dict[str, Any]:
        return {"result": self.result.value, "runs": [r.to_dict() for r in self.runs]}


def local_check(prober: Prober, target: Union[str, Ipv4Addr], private_src: Union[str, Ipv4Addr],
                params: SpoofCheckParams, pre: Optional[IpidSeries] = None,
                pre_start_ms: Optional[int] = None, confirm: bool = True) -> LocalCheck:
    """Spoof check with a private source; a positive result must repeat once to stand."""
    first = spoof_check(prober, target, private_src, params, pre, pre_start_ms)
    if first.result is not SpoofResult.RECEIVED or not confirm:
        return LocalCheck(first.result, (first,))
    again = spoof_check(prober, target, private_src, params, first.post, first.post_start_ms)
    result = SpoofResult.RECEIVED if again.result is SpoofResult.RECEIVED else SpoofResult.INCONCLUSIVE
    return LocalCheck(result, (first, again))


@dataclass(frozen=True)
class SelectionParams:
    ipid_series: ProbeParams = ProbeParams(10, 1)
    check_series: ProbeParams = ProbeParams(4, 1)
    max_none: int = DEFAULT_MAX_NONE
    noise_threshold_pps: float = 6.0
    slack: int = 1
    public_src: Ipv4Addr = DEFAULT_PUBLIC_SRC
    private_src: Ipv4Addr = DEFAULT_PRIVATE_SRC
    confirm: bool = True
    # floor on the noise-derived M; one lost packet out of two reads as filtering
    min_m: int = 4

    def packet_budget(self, m: int) -> int:
        """Packets the three spoof checks send when no budget wait intervenes (teardown RSTs included)."""
        n = self.check_series.n
        return (2 * n + m + 1) + (n + m + 1) + ((n + m + 1) if self.confirm else 0)


_SHARE_TO_STATUS = {
    ShareClass.TOO_MANY_NONE: OutpostStatus.NO_RST_RESPONSE,
    ShareClass.NOT_MONOTONIC: OutpostStatus.NOT_SHARED_IPID,
    ShareClass.TOO_NOISY: OutpostStatus.TOO_NOISY,
}


def select_outpost(prober: Prober, target: Union[str, Ipv4Addr],
                   params: SelectionParams = SelectionParams()) -> OutpostVerdict:
    """Run the three outpost checks in order; the first failure is the verdict."""
    target = ip(target)
    tr = prober.transport
    tr.require(spoof=True, synack=True)
    evidence: dict[str, Any] = {"params": {
        "n0": params.ipid_series.n, "t0": params.ipid_series.interval_s,
        "max_none": params.max_none, "noise_threshold_pps": params.noise_threshold_pps,
    }}

    tr.reserve(target, params.ipid_series.n)
    ipids0 = prober.series(target, params.ipid_series)
    evidence["ipids0"] = ipids0
    share = classify_shared_ipid(ipids0, params.max_none, params.noise_threshold_pps)
    evidence["ipid_class"] = share.value
    if share is not ShareClass.SHARED_MONOTONIC:
        return OutpostVerdict(_SHARE_TO_STATUS[share], evidence)

    noise = estimate_noise(ipids0)
    m = max(params.min_m, choose_m(noise))
    evidence["noise_pps"] = noise.rate_pps
    evidence["m"] = m
    sp = SpoofCheckParams(m, params.check_series, params.check_series, params.slack, noise.rate_pps)

    try:
        spoof = spoof_check(prober, target, params.public_src, sp)
    except MissingSamples:
        evidence["error"] = "MissingSamples"
        return OutpostVerdict(OutpostStatus.INCONCLUSIVE, evidence)
    evidence["spoof_check"] = spoof
    if spoof.result is SpoofResult.FILTERED:
        return OutpostVerdict(OutpostStatus.SPOOFED_PUBLIC_FILTERED, evidence)
    if spoof.result is SpoofResult.INCONCLUSIVE:
        return OutpostVerdict(OutpostStatus.INCONCLUSIVE, evidence)

    try:
        local = local_check(prober, target, params.private_src, sp, spoof.post, spoof.post_start_ms, params.confirm)
    except MissingSamples:
        evidence["error"] = "MissingSamples"
        return OutpostVerdict(OutpostStatus.INCONCLUSIVE, evidence)
    evidence["local_check"] = local
    if local.result is SpoofResult.FILTERED:
        return OutpostVerdict(OutpostStatus.SPOOFED_PRIVATE_FILTERED, evidence)
    if local.result is SpoofResult.INCONCLUSIVE:
        return OutpostVerdict(OutpostStatus.INCONCLUSIVE, evidence)
    return OutpostVerdict(OutpostStatus.QUALIFIED, evidence)
