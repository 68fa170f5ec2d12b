from hypothesis import given, settings, strategies as st

from natpen.ratelimit import RateLimiter, window_violations


def drain(limiter, n, target="t", start=0):
    now = start
    times = []
    for _ in range(n):
        now = limiter.acquire(target, now)
        times.append(now)
    return times


def test_hundred_sends_take_at_least_150_seconds():
    times = drain(RateLimiter(0.6, 10), 100)
    assert times[-1] - times[0] >= (100 - 10) / 0.6 * 1000 - 1


def test_burst_goes_out_immediately():
    times = drain(RateLimiter(0.6, 10), 11)
    assert times[:10] == [0] * 10
    assert times[10] >= 1000 / 0.6 - 1


def test_targets_are_independent():
    lim = RateLimiter(0.6, 10)
    drain(lim, 10, "a")
    assert lim.acquire("b", 0) == 0


def test_min_window_allows_bigger_instant_burst():
    lim = RateLimiter(0.6, 10, 60)
    assert lim.capacity == 46
    assert drain(lim, 46) == [0] * 46
    assert lim.acquire("t", 0) > 0


def test_earliest_for_group_does_not_record():
    lim = RateLimiter(0.6, 10)
    drain(lim, 10)
    t = lim.earliest("t", 0, 5)
    assert t >= 5 / 0.6 * 1000 - 1
    assert len(lim.sent_times("t")) == 10


@settings(max_examples=60, deadline=None)
@given(
    gaps=st.lists(st.integers(0, 4000), min_size=1, max_size=80),
    rate=st.sampled_from([0.6, 1.0, 2.5]),
    burst=st.integers(1, 12),
    window=st.sampled_from([0, 10, 60]),
)
def test_schedule_always_passes_the_audit(gaps, rate, burst, window):
    lim = RateLimiter(rate, burst, window)
    now = 0
    for g in gaps:
        now = lim.acquire("x", now + g)
    assert window_violations(lim.sent_times("x"), rate, burst, window) == []


def test_audit_catches_a_violation():
    assert window_violations([0] * 11, 0.6, 10, 0) == [(0, 0, 11)]
