"""Watch a shared IPID counter give away what happens behind a NAT.

We probe a simulated gateway, send it one SYN that claims to come from a
private address, then probe again.  If an internal host answers the
gateway's SYN-ACK with a RST, the gateway sends one packet and stops.  If
nobody answers, it keeps retransmitting, and every retransmission shows up
on the counter we read from outside.
"""

from natpen import InternalHost, OutpostSpec, Prober, RetransBehavior, ScenarioConfig, SimTransport
from natpen.core import SYN, Packet, ipid_delta
from natpen.simnet import Network

GATEWAY = "93.184.20.14"
INSIDE = "192.168.178.17"


def run(hole: bool) -> None:
    spec = OutpostSpec(GATEWAY, hole_present=hole, retrans=RetransBehavior(1, 3),
                       internal_hosts=(InternalHost(INSIDE),))
    tr = SimTransport(Network(ScenarioConfig((spec,))))
    prober = Prober(tr, rng=1)

    before = prober.probe_once(GATEWAY)
    tr.send(Packet(INSIDE, GATEWAY, 5555, 80, SYN, 1))
    tr.sleep(8)  # long enough for the last retransmission at +7 s
    after = prober.probe_once(GATEWAY)

    label = "hole present" if hole else "hole absent "
    print(f"{label}: IPID {before} -> {after}, increase {ipid_delta(before, after)}")


if __name__ == "__main__":
    print("One spoofed SYN from a private source, bracketed by two probes.")
    run(hole=True)   # our probe's RST + one SYN-ACK
    run(hole=False)  # our probe's RST + four SYN-ACKs
