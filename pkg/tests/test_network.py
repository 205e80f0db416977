import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridsim.engine import SimulationAbort, Simulator
from gridsim.harness.oracle import timestep_oracle
from gridsim.network import FlowNetwork, Link, NoRouteError, Topology, allocate_rates, window_cap
from oracles import maxmin_violations

GBPS = 1e9


def line_topology(cap=GBPS, rtt=0.0):
    return Topology(["A", "B", "C"], [Link("ab", "A", "B", cap, rtt), Link("bc", "B", "C", cap, rtt)])


def run_transfers(topo, specs, t_end=1e5, window=8e6):
    """specs: (start, file_id, size, src, dst); returns {file_id: finish time}."""
    sim = Simulator()
    net = FlowNetwork(sim, topo, window)
    done = {}
    for t, fid, size, src, dst in specs:
        sim.at(t, net.start_transfer, fid, size, src, dst, lambda tr: done.__setitem__(tr.file_id, sim.now))
    sim.run_until(t_end)
    return done, net, sim


def test_window_cap_value():
    assert window_cap(8e6, 0.120) == pytest.approx(533.333e6, rel=1e-5)
    assert window_cap(8e6, 0.0) == math.inf


def test_single_transfer_uses_full_link():
    done, net, _ = run_transfers(line_topology(), [(0.0, "f", 2e9, "A", "C")])
    assert done["f"] == pytest.approx(16.0, rel=1e-12)
    assert len(net.records) == 1


def test_two_simultaneous_transfers_share_link():
    done, _, _ = run_transfers(line_topology(), [(0.0, "f", 2e9, "A", "C"), (0.0, "g", 2e9, "A", "B")])
    assert done["f"] == pytest.approx(32.0, rel=1e-12)
    assert done["g"] == pytest.approx(32.0, rel=1e-12)


def test_opposite_directions_do_not_compete():
    done, _, _ = run_transfers(line_topology(), [(0.0, "f", 2e9, "A", "C"), (0.0, "g", 2e9, "C", "A")])
    assert done == {"f": pytest.approx(16.0), "g": pytest.approx(16.0)}


def test_rtt_caps_a_lone_transfer():
    topo = Topology(["X", "Y"], [Link("xy", "X", "Y", 10 * GBPS, 0.120)])
    done, _, _ = run_transfers(topo, [(0.0, "f", 1e9, "X", "Y")])
    assert done["f"] == pytest.approx(8e9 / window_cap(8e6, 0.120), rel=1e-9)


def test_rtt_capped_transfer_leaves_room_for_others():
    # path rtt is the sum over links; the capped flow's slack goes to the short flow
    topo = Topology(["X", "Y", "Z"], [Link("xy", "X", "Y", GBPS, 0.0), Link("yz", "Y", "Z", GBPS, 0.2)])
    assert topo.rtt("X", "Z") == pytest.approx(0.2)
    sim = Simulator()
    net = FlowNetwork(sim, topo)
    a = net.start_transfer("a", 1e12, "X", "Z")
    b = net.start_transfer("b", 1e12, "X", "Y")
    assert net.rate(a) == pytest.approx(320e6)
    assert net.rate(b) == pytest.approx(680e6)


def test_capacity_halving_mid_transfer():
    topo = Topology(["A", "B"], [Link("ab", "A", "B", GBPS, 0.0, schedule=[(4.0, GBPS / 2)])])
    done, _, _ = run_transfers(topo, [(0.0, "f", 1e9, "A", "B")])
    # 4 s at 1 Gbps moves 4e9 bits, the other 4e9 take 8 s
    assert done["f"] == pytest.approx(12.0, rel=1e-12)


def test_late_joiner_interrupts_earlier_transfer():
    done, _, sim = run_transfers(line_topology(), [(0.0, "f", 1e9, "A", "B"), (4.0, "g", 1e9, "A", "B")])
    # f: 4e9 bits alone, then 4e9 at half rate -> t=12; g: 4e9 by t=12, rest alone -> t=16
    assert done["f"] == pytest.approx(12.0)
    assert done["g"] == pytest.approx(16.0)
    assert sim.stale_dropped >= 1


def test_local_copy_finishes_immediately():
    done, net, _ = run_transfers(line_topology(), [(3.0, "f", 1e9, "B", "B")])
    assert done["f"] == 3.0
    assert net.bits.sum() == 0


def test_unknown_node_and_disconnected_graph_abort():
    topo = Topology(["A", "B", "Q"], [Link("ab", "A", "B", GBPS)])
    assert not topo.connected()
    with pytest.raises(NoRouteError):
        topo.path("A", "Q")
    with pytest.raises(NoRouteError):
        topo.path("A", "nowhere")


def test_invalid_links_rejected():
    with pytest.raises(ValueError, match="bad"):
        Link("bad", "A", "B", -1.0)
    with pytest.raises(ValueError):
        Topology(["A"], [Link("x", "A", "B", 1.0)])


def test_zero_size_transfer_aborts():
    sim = Simulator()
    net = FlowNetwork(sim, line_topology())
    with pytest.raises(SimulationAbort):
        net.start_transfer("f", 0, "A", "B")


def test_explicit_route_overrides_search():
    nodes = ["A", "B", "C"]
    links = [Link("ab", "A", "B", GBPS), Link("bc", "B", "C", GBPS), Link("ac", "A", "C", GBPS)]
    assert Topology(nodes, links).node_path("A", "C") == ["A", "C"]
    routed = Topology(nodes, links, routes={("A", "C"): ["A", "B", "C"]})
    assert routed.node_path("A", "C") == ["A", "B", "C"]
    assert routed.node_path("C", "A") == ["C", "B", "A"]
    assert routed.path_links("A", "C") == ["ab", "bc"]


def test_estimate_rate_matches_actual_allocation():
    sim = Simulator()
    net = FlowNetwork(sim, line_topology())
    net.start_transfer("f", 1e12, "A", "C")
    est = net.estimate_rate("A", "B")
    tr = net.start_transfer("g", 1e12, "A", "B")
    assert net.rate(tr) == pytest.approx(est)


def _random_net(rng):
    nodes = [f"n{i}" for i in range(5)]
    links = [Link(f"l{i}", nodes[i], nodes[i + 1], float(rng.uniform(1, 10)) * GBPS,
                  float(rng.choice([0.0, 0.01, 0.05]))) for i in range(4)]
    return Topology(nodes, links)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_allocation_of_random_transfer_mix_is_max_min(seed):
    rng = np.random.default_rng(seed)
    topo = _random_net(rng)
    pairs = []
    for _ in range(int(rng.integers(1, 8))):
        s, d = sorted(rng.choice(5, 2, replace=False))
        pairs.append((f"n{s}", f"n{d}"))
    paths = [topo.path(s, d) for s, d in pairs]
    caps = [window_cap(8e6, topo.rtt(s, d)) for s, d in pairs]
    rates = allocate_rates(paths, caps, topo.capacities_at(0.0))
    cap_vec = list(topo.capacities_at(0.0))
    assert maxmin_violations(list(rates), [list(p) for p in paths], caps, cap_vec) == []


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_bytes_are_conserved_per_transfer_and_link(seed):
    rng = np.random.default_rng(seed)
    topo = _random_net(rng)
    specs = []
    for i in range(20):
        s, d = rng.choice(5, 2, replace=False)
        specs.append((float(rng.uniform(0, 50)), f"f{i}", float(rng.integers(1, 5000)) * 1e6, f"n{s}", f"n{d}"))
    done, net, _ = run_transfers(topo, specs)
    assert len(done) == len(specs)
    assert net.conservation_violations == 0
    expected = np.zeros(len(topo.channels))
    for r in net.records:
        expected[topo.path(r.src, r.dst)] += r.size * 8
    np.testing.assert_allclose(net.bits, expected, rtol=1e-9)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_finish_times_do_not_depend_on_start_order_at_same_instant(seed):
    rng = np.random.default_rng(seed)
    topo = _random_net(rng)
    specs = []
    for i in range(8):
        s, d = rng.choice(5, 2, replace=False)
        specs.append((0.0, f"f{i}", float(rng.integers(1, 5000)) * 1e6, f"n{s}", f"n{d}"))
    a, _, _ = run_transfers(topo, specs)
    b, _, _ = run_transfers(topo, specs[::-1])
    for k in a:
        assert b[k] == pytest.approx(a[k], rel=1e-9)


def test_network_agrees_with_fixed_step_oracle():
    rng = np.random.default_rng(4)
    topo = _random_net(rng)
    specs, claims = [], []
    for i in range(15):
        s, d = rng.choice(5, 2, replace=False)
        src, dst = f"n{s}", f"n{d}"
        t0 = float(rng.uniform(0, 20))
        size = float(rng.integers(100, 3000)) * 1e6
        specs.append((t0, f"f{i}", size, src, dst))
        claims.append({"id": f"f{i}", "work": size * 8, "join": t0,
                       "cap": window_cap(8e6, topo.rtt(src, dst)),
                       "resources": [topo.channels[c] for c in topo.path(src, dst)]})
    trace = {"resources": dict(zip(topo.channels, topo.capacities_at(0.0).tolist())), "claims": claims}
    done, _, _ = run_transfers(topo, specs)
    ref = timestep_oracle(trace, dt=1e-3)
    for fid, t in done.items():
        assert t == pytest.approx(ref[fid], rel=5e-3)
