import pytest

from natpen.probe import Prober
from natpen.ratelimit import RateLimiter
from natpen.scenario import InternalHost, OutpostSpec, ScenarioConfig
from natpen.simnet import Network
from natpen.transport import SimTransport, TransportCaps

OUTPOST = "1.2.3.4"
INSIDE = "192.168.1.1"


def scenario(*, loss=0.0, seed=0, jitter_ms=0, latency_ms=10, hosts=(INSIDE,), **outpost_kw):
    hosts = tuple(h if isinstance(h, InternalHost) else InternalHost(h) for h in hosts)
    spec = OutpostSpec(OUTPOST, internal_hosts=hosts, **outpost_kw)
    return ScenarioConfig((spec,), link_loss_prob=loss, rng_seed=seed, jitter_ms=jitter_ms, latency_ms=latency_ms)


def rig(sc=None, *, rng=1, limiter=None, caps=TransportCaps(), **kw):
    """(network, transport, prober) around a one-outpost scenario."""
    net = Network(sc if sc is not None else scenario(**kw))
    tr = SimTransport(net, caps, limiter)
    return net, tr, Prober(tr, rng=rng)


def polite():
    return RateLimiter(0.6, 10, 60)


@pytest.fixture
def simple():
    return rig()
