import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlfreeway.node_model import (
    NodeInputs,
    compute_node_flows,
    regularize_priorities,
    solve_undefined_split_ratios,
)
from oracles import NAN, random_node


# ---------------------------------------------------------------- priorities

def test_regularize_with_zero_priorities():
    np.testing.assert_allclose(regularize_priorities([0.5, 0.5, 0, 0]), [0.375, 0.375, 0.125, 0.125])


def test_regularize_positive_unchanged():
    p = np.array([0.2, 0.3, 0.5])
    np.testing.assert_array_equal(regularize_priorities(p), p)


def test_regularize_all_zero():
    np.testing.assert_allclose(regularize_priorities([0.0, 0.0]), [0.5, 0.5])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=6))
def test_regularized_priorities_positive_and_normalized(raw):
    p = np.array(raw)
    p = p / p.sum() if p.sum() > 0 else np.full(len(p), 1 / len(p))
    pt = regularize_priorities(p)
    assert np.all(pt > 0)
    assert pt.sum() == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------- split solver

def test_fully_defined_passthrough():
    beta = np.array([[[0.3], [0.7]]])
    inp = NodeInputs([[1000.0]], [500.0, 500.0], beta)
    out = solve_undefined_split_ratios(inp)
    np.testing.assert_array_equal(out, beta)


def test_supply_proportional_case():
    inp = NodeInputs([[1000.0]], [600.0, 400.0], np.full((1, 2, 1), NAN))
    out = solve_undefined_split_ratios(inp)
    assert out[0, 0, 0] == 0.6 and out[0, 1, 0] == 0.4


def test_single_remaining_output_gets_remainder():
    beta = np.array([[[0.5], [NAN]]])
    out = solve_undefined_split_ratios(NodeInputs([[1000.0]], [600.0, 400.0], beta))
    assert out[0, 1, 0] == 0.5


def test_two_inputs_balance_ratios():
    inp = NodeInputs([[1000.0], [1000.0]], [500.0, 1500.0], np.full((2, 2, 1), NAN))
    out = solve_undefined_split_ratios(inp)
    D = np.einsum("ijc,ic->j", out, inp.demands)
    ratios = D / inp.supplies
    assert ratios[0] == pytest.approx(ratios[1], rel=1e-9)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


def test_partially_defined_balancing_uses_free_share():
    # class 0 is fixed to output 0; class 1 is free and should lean to output 1
    beta = np.array([[[1.0, NAN], [0.0, NAN]]])
    inp = NodeInputs([[600.0, 600.0]], [1000.0, 1000.0], beta)
    out = solve_undefined_split_ratios(inp)
    assert out[0, 0, 0] == 1.0 and out[0, 1, 0] == 0.0
    assert out[0, 1, 1] > out[0, 0, 1]
    assert out[0, :, 1].sum() == pytest.approx(1.0, abs=1e-12)


def test_zero_demand_rows_split_uniformly():
    beta = np.full((1, 3, 1), NAN)
    out = solve_undefined_split_ratios(NodeInputs([[0.0]], [1.0, 2.0, 3.0], beta))
    np.testing.assert_allclose(out[0, :, 0], [1 / 3] * 3)


def test_subnormal_demand_does_not_overflow():
    # a nearly drained link can leave a class demand in the subnormal range
    S = np.array([[4.7038370157053775, 3.3448244223452391e-321], [0.0, 0.44653125273778016],
                  [0.37362689125682563, 0.033335751687917421]])
    beta = np.tile(np.array([[NAN, NAN], [0.0, NAN]]), (3, 1, 1))
    inp = NodeInputs(S, [7.916666666666667, 2.5], beta, [0.5352112676056338, 0.2535211267605634, 0.2112676056338028])
    out = solve_undefined_split_ratios(inp)
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(out[0, :, 1], [0.5, 0.5])


def test_invalid_inputs():
    with pytest.raises(ValueError, match="invalid node inputs"):
        solve_undefined_split_ratios(NodeInputs([[-1.0]], [1.0], np.full((1, 1, 1), NAN)))
    with pytest.raises(ValueError, match="invalid node inputs"):
        compute_node_flows(NodeInputs([[1.0]], [-1.0], np.ones((1, 1, 1))))


def test_bias_hook_is_applied():
    inp = NodeInputs([[1000.0]], [600.0, 400.0], np.full((1, 2, 1), NAN))

    def lean_left(_inputs, beta):
        out = beta.copy()
        out[0, :, 0] = [0.9, 0.1]
        return out

    np.testing.assert_allclose(solve_undefined_split_ratios(inp, bias=lean_left)[0, :, 0], [0.9, 0.1])


def test_defined_entries_unchanged_and_sums():
    rng = np.random.default_rng(3)
    for _ in range(300):
        inp = random_node(rng)
        out = solve_undefined_split_ratios(inp)
        defined = ~np.isnan(inp.splits)
        np.testing.assert_array_equal(out[defined], inp.splits[defined])
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(out >= 0)


# ---------------------------------------------------------------- flows

def test_uncongested_passthrough():
    f = compute_node_flows(NodeInputs([[1000.0]], [5000.0, 5000.0], np.array([[[0.8], [0.2]]])))
    np.testing.assert_allclose(f[0, :, 0], [800.0, 200.0])


def test_priority_allocation_with_redistribution():
    inp = NodeInputs([[1000.0], [1000.0]], [1200.0], np.ones((2, 1, 1)), priorities=[0.9, 0.1])
    f = compute_node_flows(inp)
    np.testing.assert_allclose(f[:, 0, 0], [1000.0, 200.0])


@pytest.mark.parametrize("eta, expected", [(1.0, [250.0, 250.0]), (0.0, [500.0, 250.0])])
def test_relaxed_fifo(eta, expected):
    f = compute_node_flows(NodeInputs([[1000.0]], [5000.0, 250.0], np.array([[[0.5], [0.5]]]), restriction=eta))
    np.testing.assert_allclose(f[0, :, 0], expected)


def fifo_oracle(S, beta, R, p):
    """Sequential proportional scaling written from scratch, one factor per (input, output)."""
    m, n, c = beta.shape
    oriented = np.einsum("ijc,ic->ij", beta, S)
    scale = np.ones((m, n))
    done = set()
    while True:
        demand = {j: sum(scale[i, j] * oriented[i, j] for i in range(m)) for j in range(n) if j not in done}
        binding = [(R[j] / d, j) for j, d in demand.items() if d > R[j]]
        if not binding:
            break
        _, js = min(binding)
        want = [scale[i, js] * oriented[i, js] for i in range(m)]
        give = [0.0] * m
        left = R[js]
        open_ = [i for i in range(m) if want[i] > 0]
        while open_:
            ps = sum(p[i] for i in open_)
            capped = [i for i in open_ if want[i] <= left * p[i] / ps]
            if not capped:
                for i in open_:
                    give[i] = left * p[i] / ps
                break
            for i in capped:
                give[i] = want[i]
                left -= want[i]
                open_.remove(i)
        done.add(js)
        for i in range(m):
            if want[i] > 0:
                frac = give[i] / want[i]
                scale[i, js] *= frac
                for j in range(n):
                    if j not in done:
                        scale[i, j] *= frac
    return scale[:, :, None] * beta * S[:, None, :]


def test_fifo_limit_matches_oracle():
    rng = np.random.default_rng(11)
    for _ in range(300):
        inp = random_node(rng, undefined=0.0)
        f = compute_node_flows(inp)
        ref = fifo_oracle(inp.demands, inp.splits, inp.supplies, regularize_priorities(inp.priorities))
        np.testing.assert_allclose(f, ref, rtol=1e-12, atol=1e-9)


def assert_proportional(f, inp):
    out = f.sum(axis=1)
    for i, k in itertools.product(range(inp.shape[0]), range(inp.shape[2])):
        if out[i, k] > 1e-9:
            np.testing.assert_allclose(f[i, :, k] / out[i, k], inp.splits[i, :, k], atol=1e-9)


def test_fifo_keeps_split_proportions_single_input():
    rng = np.random.default_rng(12)
    for _ in range(200):
        inp = random_node(rng, m=1, undefined=0.0)
        assert_proportional(compute_node_flows(inp), inp)


def test_fifo_keeps_split_proportions_one_binding_output():
    rng = np.random.default_rng(17)
    checked = 0
    for _ in range(600):
        inp = random_node(rng, undefined=0.0)
        D = np.einsum("ijc,ic->j", inp.splits, inp.demands)
        if np.count_nonzero(D > inp.supplies) != 1:
            continue
        # one cut, applied to every output of each cut input
        assert_proportional(compute_node_flows(inp), inp)
        checked += 1
    assert checked > 50


def test_decoupled_outputs_when_eta_zero():
    rng = np.random.default_rng(13)
    for _ in range(200):
        inp = random_node(rng, undefined=0.0, restriction=0.0)
        n = inp.shape[1]
        if n < 2:
            continue
        f0 = compute_node_flows(inp)
        j = int(rng.integers(n))
        R2 = inp.supplies.copy()
        R2[j] *= rng.uniform(0, 0.5)
        f1 = compute_node_flows(NodeInputs(inp.demands, R2, inp.splits, inp.priorities, 0.0))
        others = [k for k in range(n) if k != j]
        np.testing.assert_allclose(f1[:, others], f0[:, others], rtol=1e-12, atol=1e-9)


def test_flow_invariants():
    rng = np.random.default_rng(14)
    for _ in range(500):
        eta = float(rng.choice([0.0, 1.0, rng.random()]))
        inp = random_node(rng, undefined=0.0, restriction=eta)
        f = compute_node_flows(inp)
        S, R = inp.demands, inp.supplies
        assert np.all(f >= 0)
        assert np.all(f.sum(axis=1) <= S * (1 + 1e-12) + 1e-9)
        assert np.all(f.sum(axis=(0, 2)) <= R * (1 + 1e-12) + 1e-9)
        assert f.sum() <= min(S.sum(), R.sum()) * (1 + 1e-12) + 1e-9
        D = np.einsum("ijc,ic->j", inp.splits, S)
        if np.all(D <= R):
            np.testing.assert_allclose(f, inp.splits * S[:, None, :], rtol=1e-15)


def test_scale_invariance():
    rng = np.random.default_rng(15)
    for _ in range(200):
        inp = random_node(rng, undefined=0.0, restriction=float(rng.random()))
        lam = float(rng.uniform(0.01, 100))
        f = compute_node_flows(inp)
        g = compute_node_flows(NodeInputs(inp.demands * lam, inp.supplies * lam, inp.splits, inp.priorities,
                                          inp.restriction))
        np.testing.assert_allclose(g, lam * f, rtol=1e-9, atol=1e-9)


def test_offramp_flow_monotone_in_split():
    rng = np.random.default_rng(16)
    grid = np.arange(0, 1001) / 1000
    for _ in range(100):
        inp = random_node(rng, n=int(rng.integers(2, 4)), undefined=0.0, restriction=float(rng.random()))
        m, n, c = inp.shape
        base = inp.splits[:, :-1, :]
        base = np.where(base.sum(axis=1, keepdims=True) > 0, base / np.maximum(base.sum(axis=1, keepdims=True), 1e-300),
                        1.0 / (n - 1))
        prev = -1.0
        for b in grid:
            beta = np.concatenate([(1 - b) * base, np.full((m, 1, c), b)], axis=1)
            f = compute_node_flows(NodeInputs(inp.demands, inp.supplies, beta, inp.priorities, inp.restriction))
            off = f[:, -1, :].sum()
            assert off >= prev - 1e-9 * max(1.0, inp.demands.sum())
            prev = off
