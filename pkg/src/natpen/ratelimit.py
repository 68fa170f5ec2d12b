"""Per-target politeness budget.

The limiter enforces an arrival curve on the packets sent to each target:
any window of length ``w`` may hold at most ``burst + rate * max(w, min_window_s)``
packets.  With ``min_window_s == 0`` this is exactly a token bucket of
capacity ``burst`` refilled at ``rate`` (the bucket starts full).  A positive
``min_window_s`` only constrains windows of at least that length, which is
the form the politeness audit takes, and lets one timed measurement round
run without being throttled part-way through.
"""

from __future__ import annotations

import math
from collections import defaultdict
from typing import Hashable


class RateLimiter:
    def __init__(self, rate_pps: float = 0.6, burst: int = 10, min_window_s: float = 0.0):
        if rate_pps <= 0:
            raise ValueError("rate_pps must be positive")
        if burst < 1:
            raise ValueError("burst must be at least 1")
        self.rate_pps = rate_pps
        self.burst = burst
        self.min_window_ms = int(round(min_window_s * 1000))
        self._ms_per_token = 1000.0 / rate_pps
        self._sent: dict[Hashable, list[int]] = defaultdict(list)
        # running max of s_j - j * ms_per_token; makes each query O(1)
        self._prefmax: dict[Hashable, list[float]] = defaultdict(list)

    @property
    def capacity(self) -> int:
        """Largest number of packets admissible at one instant."""
        return int(math.floor(self.burst + self.rate_pps * self.min_window_ms / 1000 + 1e-9))

    def earliest(self, target: Hashable, now_ms: int, n: int = 1) -> int:
        """First time ``>= now_ms`` at which ``n`` packets may go out together."""
        n = min(n, self.capacity)
        k = len(self._sent[target])
        # a window opening at send j binds only while k - j + n exceeds the flat part of the curve
        slack = self.burst + self.rate_pps * self.min_window_ms / 1000
        jmax = math.ceil(k + n - slack - 1e-9) - 1
        if jmax < 0 or k == 0:
            return now_ms
        base = self._prefmax[target][min(jmax, k - 1)]
        need = math.ceil(base + (k + n - self.burst) * self._ms_per_token - 1e-6)
        return max(now_ms, need)

    def acquire(self, target: Hashable, now_ms: int) -> int:
        """Reserve one send; returns the (virtual) time at which it may happen."""
        t = self.earliest(target, now_ms, 1)
        self.record(target, t)
        return t

    def record(self, target: Hashable, t_ms: int) -> None:
        sent = self._sent[target]
        if sent and t_ms < sent[-1]:
            raise ValueError("sends must be recorded in time order")
        pm = self._prefmax[target]
        v = t_ms - len(sent) * self._ms_per_token
        pm.append(max(pm[-1], v) if pm else v)
        sent.append(t_ms)

    def sent_times(self, target: Hashable) -> list[int]:
        return list(self._sent[target])


def window_violations(times_ms: list[int], rate_pps: float, burst: int, min_window_s: float) -> list[tuple[int, int, int]]:
    """Windows ``[s_i, s_k]`` that break the arrival curve, as (start, end, count)."""
    times = sorted(times_ms)
    w_min = min_window_s * 1000
    bad = []
    for i in range(len(times)):
        for k in range(i, len(times)):
            span = max(times[k] - times[i], w_min)
            if k - i + 1 > burst + rate_pps * span / 1000 + 1e-9:
                bad.append((times[i], times[k], k - i + 1))
    return bad
