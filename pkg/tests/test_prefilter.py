import itertools

import pytest

from natpen.core import RST, SYN, SYNACK, ip
from natpen.prefilter import PrefilterResult, prefilter, syn_probe, synack_probe
from natpen.scenario import ConstantIpid, GlobalCounter

from conftest import OUTPOST, rig


def test_open_port_alive():
    _, _, pr = rig()
    assert syn_probe(pr, OUTPOST) is True


def test_closed_port_not_alive():
    _, _, pr = rig(open_ports=(443,))
    assert syn_probe(pr, OUTPOST) is False


def test_syn_dropping_host_not_alive():
    _, _, pr = rig(drops_syn=True)
    assert syn_probe(pr, OUTPOST) is False


def test_synack_probe_counter():
    _, _, pr = rig(ipid_policy=GlobalCounter(41))
    assert synack_probe(pr, OUTPOST) == (True, 42)


def test_constant_zero_fails_screen():
    _, _, pr = rig(ipid_policy=ConstantIpid(0))
    r = prefilter(pr, OUTPOST)
    assert (r.rst_seen, r.first_ipid, r.passed) == (True, 0, False)


def test_host_ignoring_synack():
    _, _, pr = rig(answers_synack=False)
    assert synack_probe(pr, OUTPOST) == (False, None)


def test_stimulus_counts():
    net, tr, pr = rig()
    assert prefilter(pr, OUTPOST).passed
    flags = [p.flags for p in tr.stimulus_log()]
    assert flags.count(SYN) + flags.count(SYNACK) == 2 and flags.count(RST) == 1
    # the teardown left no half-open state behind
    net.advance_to(net.now_ms + 120_000)
    assert net.pending_flows(OUTPOST) == {}

    net, tr, pr = rig(open_ports=(443,))
    prefilter(pr, OUTPOST)
    assert [p.flags for p in tr.stimulus_log()] == [SYN, SYNACK]


def test_probes_use_fresh_ports():
    _, tr, pr = rig()
    prefilter(pr, OUTPOST)
    syn, _, synack = tr.stimulus_log()
    assert syn.src_port != synack.src_port


@pytest.mark.parametrize("alive,rst,first", list(itertools.product([True, False], [True, False], [None, 0, 5])))
def test_passed_is_monotone(alive, rst, first):
    r = PrefilterResult(ip(OUTPOST), alive, rst, first)
    assert r.passed == (alive and rst and first not in (None, 0))
    if r.passed:
        assert r.to_dict()["passed"] is True
