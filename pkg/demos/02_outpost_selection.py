"""Decide which hosts can serve as outposts.

Three gateways differ only in how they treat inbound packets with forged
source addresses.  The selector finds the one that lets both public and
private spoofed sources through, which is the one we can measure with.
"""

from natpen import OutpostSpec, Prober, ScenarioConfig, SimTransport, select_outpost
from natpen.outpost import SelectionParams
from natpen.scenario import FilterPolicy
from natpen.simnet import Network

for policy in FilterPolicy:
    net = Network(ScenarioConfig((OutpostSpec("1.2.3.4", filter_policy=policy),)))
    verdict = select_outpost(Prober(SimTransport(net), rng=7), "1.2.3.4", SelectionParams(min_m=5))
    spoof = verdict.evidence.get("spoof_check")
    detail = f"public-spoof increment {spoof.increment}" if spoof else ""
    print(f"{policy.value:<24} -> {verdict.status.value:<24} {detail}")
