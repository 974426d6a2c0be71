import numpy as np
import pytest

from mlfreeway.network import (
    ClassKind,
    DemandProfile,
    FundamentalDiagram,
    LaneGroup,
    Link,
    LinkRole,
    Network,
)
from mlfreeway.simulation import (
    SimConfig,
    SimulationError,
    apply_gate_class_switching,
    compile_model,
    mass_balance,
    run,
    simulate_model,
    step,
)
from mlfreeway.synthetic import build_corridor, calibration_corridor, random_corridor
from oracles import TRI, chain, demand, godunov


def test_zero_demand_stays_zero():
    net = build_corridor(3, offramps=(1,), onramps=(2,))
    out = run(net, SimConfig(5.0, 500), DemandProfile(1 / 12, {}))
    assert np.all(out.density == 0.0)
    assert np.all(out.inflow == 0.0) and np.all(out.outflow == 0.0)


def test_update_example():
    fd = FundamentalDiagram(1900.0, 40.0, 12.0, 180.0)
    net = chain([1.0, 1.0], [fd, FundamentalDiagram(1900.0, 60.0, 12.0, 180.0)])
    cfg = SimConfig(5.0, 1, initial_density={"c0": {"hov": 30.0}})
    out = run(net, cfg, demand([1500.0]))
    k = out.link_ids.index("c0")
    assert out.inflow[0, k, 0] == pytest.approx(1500.0, rel=1e-12)
    assert out.outflow[0, k, 0] == pytest.approx(1200.0, rel=1e-12)
    assert out.density[1, k, 0] == pytest.approx(30.0 + 300.0 / 720.0, rel=1e-12)
    assert out.density[1, k, 0] == pytest.approx(30.4167, abs=1e-4)


def test_equilibrium_keeps_density():
    fd = FundamentalDiagram(1900.0, 40.0, 12.0, 180.0)
    net = chain([1.0, 1.0], [fd, fd])
    cfg = SimConfig(5.0, 10, initial_density={"c0": {"hov": 30.0}})
    out = run(net, cfg, demand([1200.0]))
    np.testing.assert_allclose(out.density[:, 1, 0], 30.0, rtol=1e-12)


def test_steady_state_chain():
    fd = FundamentalDiagram(1900.0, 60.0, 12.0, 180.0)
    net = chain([0.5, 0.5], [fd, fd])
    out = run(net, SimConfig(5.0, 2000), demand([1200.0]))
    for lid in ("c0", "c1"):
        k = out.link_ids.index(lid)
        assert out.outflow[-1, k, 0] == pytest.approx(1200.0, rel=1e-9)
        assert out.density[-1, k, 0] == pytest.approx(1200.0 / 60.0, rel=1e-9)


def test_origin_queue_grows_at_demand_minus_capacity():
    big = FundamentalDiagram(5400.0, 60.0, 20.0, 360.0)
    net = chain([0.5], [TRI], origin_fd=big)
    T, dt = 720, 5.0
    out = run(net, SimConfig(dt, T), demand([2500.0]))
    queue = out.density[:, 0, 0] * 1.0  # origin length 1 mile
    np.testing.assert_allclose(np.diff(queue), (2500.0 - 1800.0) * dt / 3600.0, rtol=1e-9)


def test_zero_horizon_returns_initial_condition():
    net = chain([1.0], [TRI])
    out = run(net, SimConfig(5.0, 0, initial_density={"c0": {"hov": 12.0}}), demand([100.0]))
    assert out.density.shape == (1, 2, 1)
    assert out.density[0, 1, 0] == 12.0
    assert out.inflow.shape[0] == 0 and out.speed.shape[0] == 0


def test_matches_godunov_ctm():
    n, T, dt = 10, 1000, 5.0
    lengths = np.full(n, 0.1)
    lanes = np.array([2.0] * 6 + [1.0] * 4)  # lane drop: queue spills back
    net = chain(list(lengths), [TRI] * n, lanes=list(lanes))
    links = (Link("o", LinkRole.ORIGIN, LaneGroup.GP, 1.0, 2, TRI),) + net.links[1:]
    net = Network(links, net.nodes, net.classes)
    series = [3000.0] * 6 + [1000.0] * 100  # 5-minute intervals
    out = run(net, SimConfig(dt, T), demand(series))
    ref = godunov(T, dt / 3600.0, lengths, lanes, TRI, 3600.0, lambda t: series[min(t // 60, len(series) - 1)])
    sim = out.density[:, 1:, 0]
    assert sim[:, 4].max() > 60.0  # the queue spilled back into the two-lane section
    np.testing.assert_allclose(sim, ref, rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_conservation_random_corridors(seed):
    rng = np.random.default_rng(seed)
    cor = random_corridor(rng, n_intervals=24)
    out = run(cor.network, SimConfig(5.0, 24 * 60), cor.demands, cor.offramp_splits)
    err, scale = mass_balance(out, cor.network)
    assert abs(err) <= 1e-9 * scale
    assert out.density.min() >= 0.0


def test_zero_friction_matches_disabled_path():
    cor = calibration_corridor(n_intervals=48)
    net = build_corridor(3, offramps=(1, 2), gp_lanes=(4, 4, 3), friction=0.0)
    a = run(net, SimConfig(5.0, 48 * 60, enable_friction=True), cor.demands, cor.offramp_splits)
    b = run(net, SimConfig(5.0, 48 * 60, enable_friction=False), cor.demands, cor.offramp_splits)
    for name in ("density", "inflow", "outflow", "speed", "metastate"):
        assert np.array_equal(getattr(a, name), getattr(b, name)), name


def test_friction_slows_managed_lane_in_congestion():
    cor = calibration_corridor(n_intervals=288)
    cfg = SimConfig(5.0, 288 * 60)
    on = run(cor.network, cfg, cor.demands, cor.offramp_splits)
    off = run(cor.network, SimConfig(5.0, 288 * 60, enable_friction=False), cor.demands, cor.offramp_splits)
    k = on.link_ids.index("ml0")
    assert on.speed[:, k].min() < off.speed[:, k].min()


def test_runs_are_bit_identical():
    rng = np.random.default_rng(42)
    cor = random_corridor(rng, n_intervals=12)
    cfg = SimConfig(5.0, 12 * 60)
    a = run(cor.network, cfg, cor.demands, cor.offramp_splits)
    b = run(cor.network, cfg, cor.demands, cor.offramp_splits)
    assert np.array_equal(a.density, b.density) and np.array_equal(a.outflow, b.outflow)


def test_offramp_flow_series():
    cor = calibration_corridor(n_intervals=24)
    out = run(cor.network, SimConfig(5.0, 24 * 60), cor.demands, cor.offramp_splits)
    f = out.offramp_flow("off1")
    assert f.shape == (24 * 60,) and np.all(f >= 0) and f.max() > 0


# ---------------------------------------------------------------- gate switching

def test_switching_example():
    np.testing.assert_allclose(apply_gate_class_switching([10.0, 0.0, 0.0], 0, [1, 2], [0.2, 0.1]),
                               [7.0, 2.0, 1.0], rtol=1e-15)


def test_leftover_destination_mass_relabeled():
    out = apply_gate_class_switching([0.0, 0.5, 0.0], 0, [1, 2], [0.0, 0.0])
    np.testing.assert_array_equal(out, [0.5, 0.0, 0.0])


def test_switching_without_eligible_is_noop():
    out = apply_gate_class_switching([3.0, 0.0, 0.0, 0.0], 1, [2, 3], [0.4, 0.3])
    np.testing.assert_array_equal(out, [3.0, 0.0, 0.0, 0.0])


def test_switching_conserves_and_leaves_other_classes():
    out = apply_gate_class_switching([4.0, 10.0, 0.3, 0.2], 1, [2, 3], [0.25, 0.5])
    assert out[0] == 4.0
    assert out.sum() == pytest.approx(14.5, rel=1e-15)


def test_invalid_shares():
    with pytest.raises(ValueError, match="invalid switching shares"):
        apply_gate_class_switching([10.0, 0.0, 0.0], 0, [1, 2], [0.7, 0.4])


def test_invalid_configured_shares_at_gate():
    net = build_corridor(3, gates=(0, 3), offramps=(1, 2))
    d = DemandProfile.from_totals(1 / 12, {"src": (3000.0,)}, "lov", "hov")
    with pytest.raises(ValueError, match="invalid switching shares at gate"):
        compile_model(net, SimConfig(5.0, 10, gate_shares={"n0": {1: 0.8, 2: 0.5}}), d)


def test_gated_corridor_conserves_and_uses_destination_classes():
    net = build_corridor(4, gates=(0, 4), offramps=(1, 2, 3))
    d = DemandProfile.from_totals(1 / 12, {"src": (5000.0,) * 12}, "lov", "hov", eligible_fraction=0.3)
    out = run(net, SimConfig(5.0, 720), d, {"off1": 0.1, "off2": 0.1, "off3": 0.1})
    err, scale = mass_balance(out, net)
    assert abs(err) <= 1e-9 * scale
    dest = [k for k, c in enumerate(net.classes) if c.kind == ClassKind.DESTINATION]
    k = out.link_ids.index("ml0")
    assert out.density[-1, k, dest].sum() > 0
    for s in (1, 2, 3):
        assert out.offramp_flow(f"off{s}").max() > 0


# ---------------------------------------------------------------- errors and stepping

def test_jam_exceeded_reports_link_and_step():
    fd = FundamentalDiagram(1900.0, 60.0, 12.0, 180.0)
    tiny = FundamentalDiagram(400.0, 10.0, 12.0, 180.0)
    net = chain([0.01, 0.01, 1.0], [fd, fd, tiny], lanes=[1, 1, 1])
    model = compile_model(net, SimConfig(5.0, 100), demand([1900.0]), validate=False)
    with pytest.raises(SimulationError, match="exceeds jam density") as exc:
        simulate_model(model)
    assert exc.value.link in ("c0", "c1") and exc.value.t >= 0


def test_step_returns_node_flows():
    fd = FundamentalDiagram(1900.0, 40.0, 12.0, 180.0)
    net = chain([1.0, 1.0], [fd, fd])
    model = compile_model(net, SimConfig(5.0, 5, initial_density={"c0": {"hov": 30.0}}), demand([1500.0]))
    state = model.initial_state()
    nxt, flows = step(model, state)
    assert nxt.t == 1 and state.t == 0
    assert flows["n0"][0, 0, 0] == pytest.approx(1500.0)
    assert flows["n1"][0, 0, 0] == pytest.approx(1200.0)
    assert nxt.densities[1, 0] == pytest.approx(30.0 + 300.0 / 720.0, rel=1e-12)
