"""IPID probe module: periodic SYN-ACK probing and series analysis."""

from __future__ import annotations

import enum
import math
import random
from dataclasses import dataclass
from typing import Optional, Union

from .core import (
    RST,
    RSTACK,
    SYNACK,
    InsufficientData,
    Ipv4Addr,
    IpidSeries,
    Packet,
    ip,
    ipid_delta,
    is_forward_step,
)
from .transport import FlowMatch

DEFAULT_MAX_NONE = 2
GAP_SLACK = 2


@dataclass(frozen=True)
class ProbeParams:
    n: int
    interval_s: int = 1
    timeout_s: float = 1.0

    def __post_init__(self) -> None:
        if self.n < 1 or self.interval_s < 1 or self.timeout_s <= 0:
            raise ValueError(f"invalid probe parameters {self}")
        if self.timeout_s > self.interval_s:
            raise ValueError("timeout_s may not exceed interval_s")


@dataclass(frozen=True)
class NoiseEstimate:
    rate_pps: float
    valid_pairs: int


class ShareClass(enum.Enum):
    SHARED_MONOTONIC = "SharedMonotonic"
    TOO_MANY_NONE = "TooManyNone"
    NOT_MONOTONIC = "NotMonotonic"
    TOO_NOISY = "TooNoisy"


class Prober:
    """Sends probes for one scan pipeline.

    Owns the transport handle and a private RNG for local ports and
    sequence numbers so that every probe is a fresh flow.
    """

    def __init__(self, transport, port: int = 80, rng: Union[random.Random, int, None] = None):
        self.transport = transport
        self.port = port
        self.rng = rng if isinstance(rng, random.Random) else random.Random(rng)

    @property
    def scanner_ip(self) -> Ipv4Addr:
        return self.transport.scanner_ip

    def local_port(self) -> int:
        return self.rng.randrange(32768, 61000)

    def seq(self) -> int:
        return self.rng.getrandbits(32)

    def probe_once(self, target: Union[str, Ipv4Addr], timeout_s: float = 1.0, port: Optional[int] = None) -> Optional[int]:
        """One unsolicited SYN-ACK; the IPID of the RST it provokes, or None."""
        target = ip(target)
        dport = self.port if port is None else port
        lport = self.local_port()
        self.transport.send(Packet(self.scanner_ip, target, lport, dport, SYNACK, self.seq(), self.seq()))
        rst = self.transport.recv_match(FlowMatch(target, dport, lport, (RST, RSTACK)), timeout_s)
        return None if rst is None else rst.ipid

    def series(self, target: Union[str, Ipv4Addr], params: ProbeParams, start_ms: Optional[int] = None) -> IpidSeries:
        t0 = self.transport.now_ms if start_ms is None else start_ms
        values: list[Optional[int]] = []
        for i in range(params.n):
            self.transport.wait_until(t0 + i * params.interval_s * 1000)
            values.append(self.probe_once(target, params.timeout_s))
        return IpidSeries.from_values(values, params.interval_s)


def probe_series(prober: Prober, target: Union[str, Ipv4Addr], params: ProbeParams) -> IpidSeries:
    """Collect ``params.n`` samples, one SYN-ACK every ``params.interval_s`` seconds."""
    return prober.series(target, params)


def estimate_noise(series: IpidSeries) -> NoiseEstimate:
    """Cross-traffic rate implied by the series, net of the probes' own RSTs.

    Each pair of consecutive answered samples ``g`` slots apart contributes
    ``delta - g`` packets of noise over ``g * interval_s`` seconds.
    """
    pairs = series.adjacent_pairs()
    if not pairs:
        raise InsufficientData("need at least two answered probes to estimate noise")
    noise = 0
    seconds = 0
    for i, a, j, b in pairs:
        g = j - i
        noise += ipid_delta(a, b) - g
        seconds += g * series.interval_s
    return NoiseEstimate(max(0.0, noise / seconds), len(pairs))


def noise_allowance(rate_pps: float, seconds: float, slack: int = 1, quantile: float = 0.999) -> int:
    """Extra counter steps cross-traffic may add in ``seconds``.

    At least ``ceil(rate * seconds) + slack``; widened to the Poisson upper
    ``quantile`` so a band stays valid when the expected count is not small.
    """
    lam = max(0.0, rate_pps * seconds)
    term = math.exp(-lam)
    cdf, x = term, 0
    while cdf < quantile:
        x += 1
        term *= lam / x
        cdf += term
    return max(math.ceil(lam) + slack, x)


def lost_allowance(sent: int) -> int:
    """How many of ``sent`` spoofed packets a band tolerates losing on the way in."""
    return sent // 4


def classify_shared_ipid(series: IpidSeries, max_none: int = DEFAULT_MAX_NONE,
                         max_noise_pps: float = 6.0) -> ShareClass:
    if series.none_count() > max_none:
        return ShareClass.TOO_MANY_NONE
    pairs = series.adjacent_pairs()
    if not pairs:
        return ShareClass.TOO_MANY_NONE
    for i, a, j, b in pairs:
        if not is_forward_step(a, b):
            return ShareClass.NOT_MONOTONIC
        g = j - i
        # a gap left by lost probes must not hide an implausible jump
        if g > 1 and ipid_delta(a, b) > g * (max_noise_pps * series.interval_s + 1) + GAP_SLACK:
            return ShareClass.NOT_MONOTONIC
    if estimate_noise(series).rate_pps > max_noise_pps:
        return ShareClass.TOO_NOISY
    return ShareClass.SHARED_MONOTONIC
