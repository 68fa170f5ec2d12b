"""Off-path NAT-penetration inference over a shared IPID side channel.

The scanner stages (prefilter, outpost selection, detection) talk to a
transport; the bundled discrete-event simulator provides one with
configurable ground truth so verdicts can be checked.
"""

from .core import (
    ConfigError,
    InsufficientData,
    IpidSeries,
    MissingSamples,
    NatpenError,
    NoisySeriesAbort,
    NoResponse,
    OutpostStatus,
    OutpostVerdict,
    Packet,
    PenetrationStatus,
    PenetrationVerdict,
    SpoofUnsupported,
    ipid_delta,
    is_forward_step,
)
from .scenario import (
    ConstantIpid,
    FilterPolicy,
    GlobalCounter,
    InternalHost,
    OutpostSpec,
    PerFlowCounter,
    RandomIpid,
    RetransBehavior,
    ScenarioConfig,
    load_scenario,
)
from .simnet import Network
from .transport import ReplayTransport, SimTransport, TransportCaps
from .ratelimit import RateLimiter
from .probe import ProbeParams, Prober, classify_shared_ipid, estimate_noise, probe_series
from .prefilter import prefilter
from .outpost import choose_m, select_outpost, spoof_check
from .detect import DetectionParams, RetransSchedule, calibrate, decide, measure_retrans, sweep_private_range

__version__ = "0.1.0"
