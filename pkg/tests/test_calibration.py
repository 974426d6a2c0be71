import math

import numpy as np
import pytest

from mlfreeway.calibration import (
    BETA_EPS,
    MonotonicityError,
    OfframpProblem,
    generate_targets,
    relative_residual,
    run_calibration_loop,
    solve_offramp_beta_full_access,
    solve_offramp_beta_gated,
)
from mlfreeway.node_model import NodeInputs
from mlfreeway.simulation import SimConfig, compile_model
from mlfreeway.synthetic import calibration_corridor
from offramp_nodes import offramp_problem


def full_access_node(s_gp, s_ml, supplies=(1e5, 1e5, 1e5), delta=0.5):
    S = np.array([[s_gp], [s_ml]])
    beta = np.array([[[delta], [1 - delta], [0.0]], [[0.0], [1.0], [0.0]]])
    inp = NodeInputs(S, list(supplies), beta, [0.8, 0.2])
    return OfframpProblem.from_node_inputs(inp, 2, [[True], [True]], fallback=[0, 1])


def gated_node(nondest, dest, supplies=(1e5, 1e5)):
    # input GP carries a non-destination class and a destination class exiting here
    S = np.array([[nondest, dest], [0.0, 0.0]])
    beta = np.array([[[1.0, 0.0], [0.0, 1.0]], [[1.0, 1.0], [0.0, 0.0]]])
    inp = NodeInputs(S, list(supplies), beta, [0.9, 0.1])
    return OfframpProblem.from_node_inputs(inp, 1, [[True, False], [False, False]], fallback=[0, 0])


# ---------------------------------------------------------------- full access

def test_insufficient_demand_returns_one():
    sol = solve_offramp_beta_full_access(full_access_node(600.0, 200.0), 900.0)
    assert sol.beta == 1.0 and sol.starved


def test_uncongested_root_is_lower_bound():
    pr = full_access_node(800.0, 200.0)
    assert pr.offramp_flow(0.5) == pytest.approx(500.0)  # psi linear: 1000 beta - 300
    sol = solve_offramp_beta_full_access(pr, 300.0)
    assert sol.beta == pytest.approx(0.3, abs=1e-15)
    assert sol.iterations == 0 and not sol.starved


def test_zero_target_full_access():
    sol = solve_offramp_beta_full_access(full_access_node(800.0, 200.0), 0.0)
    assert sol.beta == 0.0 and not sol.starved


def test_supply_limited_offramp_starves():
    pr = full_access_node(800.0, 200.0, supplies=(1e5, 1e5, 250.0))
    sol = solve_offramp_beta_full_access(pr, 300.0)
    assert sol.beta == 1.0 and sol.starved


def test_negative_target_rejected():
    with pytest.raises(ValueError):
        solve_offramp_beta_full_access(full_access_node(800.0, 200.0), -1.0)


# ---------------------------------------------------------------- gated

def test_gated_linear_example():
    sol = solve_offramp_beta_gated(gated_node(1000.0, 100.0), 400.0)
    assert sol.beta == pytest.approx(0.3, abs=2 * BETA_EPS)
    assert abs(sol.residual) <= 1e-2


def test_gated_zero_target():
    sol = solve_offramp_beta_gated(gated_node(1000.0, 0.0), 0.0)
    assert sol.beta == 0.0 and not sol.clamped and not sol.starved


def test_gated_fixed_flow_above_target_clamps_to_zero():
    sol = solve_offramp_beta_gated(gated_node(1000.0, 100.0), 50.0)
    assert sol.beta == 0.0 and sol.clamped


def test_gated_starved():
    sol = solve_offramp_beta_gated(gated_node(1000.0, 100.0), 2000.0)
    assert sol.beta == 1.0 and sol.starved


# ---------------------------------------------------------------- bisection

def grid_root(pr, target, step=1e-4):
    grid = np.arange(0, round(1 / step) + 1) * step
    psi = np.array([pr.offramp_flow(b) for b in grid]) - target
    hit = np.nonzero(psi >= -1e-9 * max(target, 1.0))[0]
    return grid[hit[0]] if hit.size else None


def test_bisection_matches_grid_scan():
    rng = np.random.default_rng(21)
    checked = 0
    for _ in range(40):
        pr, gated = offramp_problem(rng)
        u = float(rng.uniform(0.05, 0.95))
        target = pr.offramp_flow(u)
        solve = solve_offramp_beta_gated if gated else solve_offramp_beta_full_access
        sol = solve(pr, target)
        ref = grid_root(pr, target)
        if sol.starved or sol.clamped:
            continue
        assert abs(sol.beta - ref) <= 2e-4
        checked += 1
    assert checked >= 30


def test_bisection_iteration_bound():
    rng = np.random.default_rng(22)
    for _ in range(50):
        pr, gated = offramp_problem(rng)
        target = pr.offramp_flow(float(rng.uniform(0.05, 0.95))) * 0.999
        if gated:
            sol, lo = solve_offramp_beta_gated(pr, target), 0.0
        else:
            sol = solve_offramp_beta_full_access(pr, target)
            lo = target / pr.controlled_demand if pr.controlled_demand > 0 else 0.0
        assert sol.iterations <= math.ceil(math.log2(max(1.0 - lo, BETA_EPS) / BETA_EPS)) + 3
        assert 0.0 <= sol.beta <= 1.0


def test_non_monotone_flow_is_reported(monkeypatch):
    pr = full_access_node(800.0, 200.0)
    # lower bound 0.7 undershoots, beta = 1 overshoots, the first midpoint dips below both
    monkeypatch.setattr(OfframpProblem, "offramp_flow", lambda self, b: 0.0 if b == 0.85 else 900.0 * b)
    with pytest.raises(MonotonicityError, match="node model violates monotonicity assumption"):
        solve_offramp_beta_full_access(pr, 700.0)
    monkeypatch.setattr(OfframpProblem, "offramp_flow", lambda self, b: -1.0 if b == 0.5 else 1000.0 * b)
    with pytest.raises(MonotonicityError):
        solve_offramp_beta_gated(pr, 700.0)


# ---------------------------------------------------------------- outer loop

@pytest.fixture(scope="module")
def corridor():
    cor = calibration_corridor(n_intervals=72)
    cfg = SimConfig(5.0, 72 * 60)
    return cor, cfg


def test_round_trip_short_day(corridor):
    cor, cfg = corridor
    targets = generate_targets(compile_model(cor.network, cfg, cor.demands, cor.offramp_splits))
    report = run_calibration_loop(compile_model(cor.network, cfg, cor.demands), targets)
    assert report.converged and report.iterations <= 2
    assert relative_residual(report) <= 0.005
    true = np.stack([cor.offramp_splits[o][:72] for o in report.offramps])
    ok = ~report.starved
    assert np.max(np.abs(report.beta - true)[ok]) <= 1e-2
    assert len(report.residual_norms) == report.iterations


def test_zero_targets_give_zero_beta(corridor):
    cor, cfg = corridor
    model = compile_model(cor.network, cfg, cor.demands)
    report = run_calibration_loop(model, {o: np.zeros(72) for o in model.offramps})
    assert np.all(report.beta == 0.0) and report.iterations == 1 and report.converged


def test_day_boundaries_flagged_starved(corridor):
    cor, cfg = corridor
    model = compile_model(cor.network, cfg, cor.demands)
    targets = generate_targets(compile_model(cor.network, cfg, cor.demands, cor.offramp_splits))
    targets = {o: v.copy() for o, v in targets.items()}
    for v in targets.values():
        v[:2] = 5000.0
        v[-2:] = 5000.0
    report = run_calibration_loop(model, targets)
    assert report.starved[:, :2].all() and report.starved[:, -2:].all()
    assert np.all(report.beta[:, :2] == 1.0)
    assert np.all(report.simulated[:, :2] < report.targets[:, :2])
    assert report.converged  # flagged intervals are excluded from the criterion


def test_restart_from_converged_beta_is_idempotent(corridor):
    cor, cfg = corridor
    targets = generate_targets(compile_model(cor.network, cfg, cor.demands, cor.offramp_splits))
    first = run_calibration_loop(compile_model(cor.network, cfg, cor.demands), targets)
    again = run_calibration_loop(compile_model(cor.network, cfg, cor.demands), targets, initial=first.beta)
    assert np.max(np.abs(again.beta - first.beta)) <= 0.005
    assert again.iterations == 1


def test_emitted_splits_equal_for_inputs_and_classes(corridor):
    cor, cfg = corridor
    model = compile_model(cor.network, cfg, cor.demands)
    targets = generate_targets(compile_model(cor.network, cfg, cor.demands, cor.offramp_splits))
    report = run_calibration_loop(model, targets)
    for o in report.offramps:
        values = {v for (node, i, off, c), v in report.splits.items() if off == o}
        keys = [k for k in report.splits if k[2] == o]
        assert len(keys) >= 2 * 2  # GP and managed inputs, two classes
        assert len(values) == 1


def test_targets_must_cover_every_offramp(corridor):
    cor, cfg = corridor
    model = compile_model(cor.network, cfg, cor.demands)
    with pytest.raises(ValueError, match="no offramp target"):
        run_calibration_loop(model, {"off1": np.zeros(72)})
