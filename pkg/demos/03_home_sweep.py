"""Run the whole pipeline against a home gateway and sweep its LAN.

The scenario file describes a gateway with two live machines at .17 and
.23.  The scanner screens the gateway, qualifies it as an outpost, times
its SYN-ACK retransmissions, and then tests each address of a /28.  The
virtual clock makes the politely paced scan finish in well under a second
of real time.
"""

import time
from pathlib import Path

from natpen.orchestrator import ScanConfig, cluster_report, format_report, run_pipeline
from natpen.scenario import load_scenario

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

scenario = load_scenario(CONFIGS / "home_nat.toml")
config = ScanConfig(sweep_subnet="192.168.178.16/28", rng_seed=1)

t = time.perf_counter()
records = list(run_pipeline(scenario, config))
wall = time.perf_counter() - t

for r in records:
    where = f" {r.private_ip}" if r.private_ip else ""
    print(f"{r.end_ms / 1000:8.1f}s  {r.stage:<9} {r.target}{where:<16} {r.verdict}  ({r.packet_count_sent} pkts)")

sent = sum(r.packet_count_sent for r in records)
span = records[-1].end_ms / 1000
print(f"\n{sent} packets over {span:.0f} virtual seconds ({sent / span:.2f} pps), {wall:.2f}s wall clock\n")
print(format_report(cluster_report(records)))
