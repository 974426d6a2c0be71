"""Offramp split-ratio identification from measured offramp flows.

For one offramp node over one target interval, the offramp flow

    psi(beta) = sum_t f_off(beta; S_t, R_t, delta_t) - target * steps

is nondecreasing in the offramp split ratio ``beta``; its root is found by
bisection. ``delta`` is the recorded distribution of non-offramp flow over
the other outputs, held fixed while ``beta`` varies.

In full-access corridors every GP and managed input exits at the same ratio
for every non-destination class. In gated corridors only GP-side inputs use
the solved ratio; destination classes keep their fixed splits.

The outer loop walks the target intervals in order. Each interval is
simulated with the current guess, ``beta`` is re-solved from the recorded
node inputs, and the interval is re-simulated until the guess stops moving.
A final forward run then checks the offramp flow residuals.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit

from .network import LaneGroup, SplitRatioSet
from .node_model import NodeInputs, _node_flows, regularize_priorities
from .simulation import (
    CONTROLLED,
    Model,
    Recorder,
    SimOutput,
    SimulationError,
    advance,
    to_output,
)

BETA_EPS = 1e-6
MAX_BISECTION = 60
DEFAULT_TOL = 0.005
INITIAL_GUESS = 0.1
MONOTONE_SLACK = 1e-9
ROUNDING = 1e-12


class MonotonicityError(RuntimeError):
    """The node model produced a decreasing offramp flow in beta."""


class CalibrationError(RuntimeError):
    def __init__(self, message: str, iteration: int):
        super().__init__(f"outer iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass
class OfframpProblem:
    """Recorded inputs of one offramp node over ``T`` steps.

    ``splits`` are fully defined splits; the entries flagged in ``controlled``
    ([i, c]) get ``beta`` to the offramp and ``(1 - beta) * delta`` elsewhere.
    ``fallback[i]`` is the output that takes the non-offramp flow of input
    ``i`` when the recorded split sent everything to the offramp.
    """

    demands: np.ndarray  # [T, M, C]
    supplies: np.ndarray  # [T, N]
    splits: np.ndarray  # [T, M, N, C]
    controlled: np.ndarray  # [M, C] bool
    offramp: int
    priorities: np.ndarray  # regularized
    restriction: np.ndarray  # [M, N, N]
    fallback: np.ndarray  # [M]

    @classmethod
    def from_node_inputs(cls, inputs: NodeInputs, offramp: int, controlled, fallback=None) -> OfframpProblem:
        """Single-step problem; undefined (NaN) splits must not appear."""
        if np.any(np.isnan(inputs.splits)):
            raise ValueError("offramp problems need fully defined split ratios")
        m, n, _ = inputs.shape
        if fallback is None:
            fallback = np.full(m, 0 if offramp != 0 else 1)
        return cls(
            demands=inputs.demands[None].copy(), supplies=inputs.supplies[None].copy(),
            splits=inputs.splits[None].copy(), controlled=np.asarray(controlled, dtype=bool),
            offramp=int(offramp), priorities=regularize_priorities(inputs.priorities),
            restriction=np.asarray(inputs.restriction, dtype=float),
            fallback=np.asarray(fallback, dtype=np.int64),
        )

    @property
    def controlled_demand(self) -> float:
        """Total demand subject to the solved ratio (S1 + S11 summed over steps)."""
        return float((self.demands * self.controlled[None]).sum())

    def offramp_flow(self, beta: float) -> float:
        return float(_offramp_total(self.demands, self.supplies, self.splits, self.controlled,
                                    self.offramp, self.fallback, self.priorities, self.restriction, float(beta)))


@njit(cache=True)
def _offramp_total(S, R, B, ctrl, off, fallback, pt, eta, beta):
    T, m, n, ncls = B.shape
    b = np.empty((m, n, ncls))
    f = np.empty((m, n, ncls))
    total = 0.0
    for t in range(T):
        for i in range(m):
            for c in range(ncls):
                if ctrl[i, c]:
                    rest = 1.0 - B[t, i, off, c]
                    for j in range(n):
                        if j == off:
                            b[i, j, c] = beta
                        elif rest > 1e-12:
                            b[i, j, c] = (1.0 - beta) * (B[t, i, j, c] / rest)
                        else:
                            b[i, j, c] = (1.0 - beta) if j == fallback[i] else 0.0
                else:
                    for j in range(n):
                        b[i, j, c] = B[t, i, j, c]
        binding = _node_flows(S[t], b, R[t], pt, eta, f)
        if binding[off]:
            # exact supply, not the rounded sum of its shares: keeps psi flat on the plateau
            total += R[t, off]
            continue
        for i in range(m):
            for c in range(ncls):
                total += f[i, off, c]
    return total


@dataclass(frozen=True)
class BetaSolution:
    beta: float
    starved: bool = False  # target above deliverable flow; beta pinned to 1
    clamped: bool = False  # target below the fixed (destination) flow; beta pinned to 0
    iterations: int = 0
    residual: float = 0.0  # psi at the returned beta


def _bisect(problem: OfframpProblem, target: float, lo: float, hi: float,
            psi_lo: float, psi_hi: float, eps: float, max_iter: int) -> BetaSolution:
    scale = max(abs(target), problem.controlled_demand, 1.0)
    slack = MONOTONE_SLACK * scale
    if psi_lo > psi_hi + slack:
        raise MonotonicityError("node model violates monotonicity assumption")
    it = 0
    while hi - lo > eps and it < max_iter:
        it += 1
        mid = 0.5 * (lo + hi)
        psi = problem.offramp_flow(mid) - target
        if psi < psi_lo - slack or psi > psi_hi + slack:
            raise MonotonicityError("node model violates monotonicity assumption")
        # psi within rounding of 0 counts as reaching the target, so on a
        # plateau the smallest ratio that delivers the target is returned
        if psi < -ROUNDING * scale:
            lo, psi_lo = mid, psi
        else:
            hi, psi_hi = mid, psi
    # the endpoint with the smaller |psi|
    if abs(psi_lo) <= abs(psi_hi):
        return BetaSolution(lo, iterations=it, residual=psi_lo)
    return BetaSolution(hi, iterations=it, residual=psi_hi)


def solve_offramp_beta_full_access(problem: OfframpProblem, target: float, eps: float = BETA_EPS,
                                   max_iter: int = MAX_BISECTION) -> BetaSolution:
    """Offramp ratio shared by the GP and managed inputs.

    ``target`` is the total offramp flow over the problem's steps, in the
    units of ``problem.demands``. The search starts at the lower bound
    target / (controlled demand), which is exact when the node is uncongested.
    """
    if target < 0:
        raise ValueError("offramp targets must be non-negative")
    demand = problem.controlled_demand
    if target > 0.0 and demand <= target:
        return BetaSolution(1.0, starved=True, residual=problem.offramp_flow(1.0) - target)
    lo = target / demand if target > 0.0 else 0.0
    psi_lo = problem.offramp_flow(lo) - target
    if psi_lo >= 0.0:
        return BetaSolution(lo, residual=psi_lo)
    psi_hi = problem.offramp_flow(1.0) - target
    if psi_hi < 0.0:
        return BetaSolution(1.0, starved=True, residual=psi_hi)
    return _bisect(problem, target, lo, 1.0, psi_lo, psi_hi, eps, max_iter)


def solve_offramp_beta_gated(problem: OfframpProblem, target: float, eps: float = BETA_EPS,
                             max_iter: int = MAX_BISECTION) -> BetaSolution:
    """Offramp ratio of non-destination classes with destination splits held fixed."""
    if target < 0:
        raise ValueError("offramp targets must be non-negative")
    psi_lo = problem.offramp_flow(0.0) - target
    if psi_lo >= 0.0:
        return BetaSolution(0.0, clamped=psi_lo > 0.0, residual=psi_lo)
    psi_hi = problem.offramp_flow(1.0) - target
    if psi_hi < 0.0:
        return BetaSolution(1.0, starved=True, residual=psi_hi)
    return _bisect(problem, target, 0.0, 1.0, psi_lo, psi_hi, eps, max_iter)


# ---------------------------------------------------------------- outer loop

@dataclass
class CalibrationReport:
    """Outcome of the calibration loop.

    ``beta``, ``residuals`` (veh/h, simulated minus target), ``starved`` and
    ``clamped`` are [offramp, interval]. ``residual_norms`` holds the max
    relative residual over unflagged intervals after each outer iteration.
    """

    offramps: tuple[str, ...]
    beta: np.ndarray
    targets: np.ndarray
    simulated: np.ndarray
    residuals: np.ndarray
    starved: np.ndarray
    clamped: np.ndarray
    iterations: int
    converged: bool
    residual_norms: list[float]
    splits: SplitRatioSet
    output: Optional[SimOutput] = field(default=None, repr=False)
    metrics: Optional[object] = None

    def summary(self) -> str:
        lines = [
            f"outer iterations: {self.iterations} ({'converged' if self.converged else 'NOT converged'})",
            "residual norm per iteration: " + ", ".join(f"{r:.3e}" for r in self.residual_norms),
        ]
        for k, o in enumerate(self.offramps):
            ok = ~(self.starved[k] | self.clamped[k])
            worst = np.max(np.abs(self.residuals[k][ok]) / np.maximum(self.targets[k][ok], 1e-9), initial=0.0)
            lines.append(
                f"offramp {o}: beta in [{self.beta[k].min():.4f}, {self.beta[k].max():.4f}], "
                f"starved intervals {int(self.starved[k].sum())}, clamped {int(self.clamped[k].sum())}, "
                f"max relative residual {worst:.3e}")
        lines.append("review: check bottleneck locations, congestion extents and VMT/VHT against field data; "
                     "adjust inputs and recalibrate if they disagree.")
        return "\n".join(lines)


def _problem(model: Model, rec: Recorder, q: int, t0: int, t1: int) -> OfframpProblem:
    a = model.arrays
    node = model.network.nodes[a.ctrl_node[q]]
    m, n = len(node.inputs), len(node.outputs)
    off = int(a.ctrl_slot[q])
    ctrl = a.split_kind[a.ctrl_node[q], :m, off, :] == CONTROLLED
    fallback = np.zeros(m, dtype=np.int64)
    groups = [model.network.link(j).lane_group for j in node.outputs]
    for s, i in enumerate(node.inputs):
        gin = model.network.link(i).lane_group
        same = [t for t, g in enumerate(groups) if t != off and g == gin]
        gp = [t for t, g in enumerate(groups) if t != off and g in (LaneGroup.GP, LaneGroup.AUXILIARY)]
        other = [t for t in range(n) if t != off]
        fallback[s] = (same or gp or other or [off])[0]
    return OfframpProblem(
        demands=rec.S[t0:t1, q, :m, :].copy(),
        supplies=rec.R[t0:t1, q, :n].copy(),
        splits=rec.beta[t0:t1, q, :m, :n, :].copy(),
        controlled=ctrl,
        offramp=off,
        priorities=a.prio[a.ctrl_node[q], :m].copy(),
        restriction=a.eta[a.ctrl_node[q], :m, :n, :n].copy(),
        fallback=fallback,
    )


def _interval_flows(model: Model, out: SimOutput) -> np.ndarray:
    """Mean simulated offramp inflow (veh/h) per offramp and interval."""
    spi = model.config.steps_per_interval
    n_int = model.config.n_intervals
    T = model.config.horizon
    res = np.zeros((len(model.offramps), n_int))
    for q, o in enumerate(model.offramps):
        flow = out.offramp_flow(o)
        for k in range(n_int):
            seg = flow[k * spi: min((k + 1) * spi, T)]
            res[q, k] = seg.mean() if seg.size else 0.0
    return res


def target_matrix(model: Model, targets: Mapping[str, object]) -> np.ndarray:
    """Targets (veh/h) as [offramp, interval]; every offramp needs a series."""
    n_int = model.config.n_intervals
    out = np.zeros((len(model.offramps), n_int))
    missing = [o for o in model.offramps if o not in targets]
    if missing:
        raise ValueError(f"no offramp target for {', '.join(missing)}")
    extra = sorted(set(targets) - set(model.offramps))
    if extra:
        raise ValueError(f"targets given for links that are not offramps: {extra}")
    for q, o in enumerate(model.offramps):
        series = np.atleast_1d(np.asarray(targets[o], dtype=float))
        if series.size < n_int:
            raise ValueError(f"target series for {o} has {series.size} intervals, {n_int} required")
        if np.any(series < 0) or not np.all(np.isfinite(series)):
            raise ValueError(f"target series for {o} must be finite and non-negative")
        out[q] = series[:n_int]
    return out


def _emit_splits(model: Model, beta: np.ndarray) -> SplitRatioSet:
    """Offramp entries of the calibrated split ratios, one value per interval.

    Keys are (node, input, offramp, class) and values tuples over intervals.
    """
    a = model.arrays
    out = SplitRatioSet()
    for q, o in enumerate(model.offramps):
        node = model.network.nodes[a.ctrl_node[q]]
        off = int(a.ctrl_slot[q])
        for s, i in enumerate(node.inputs):
            for c, cls in enumerate(model.network.classes):
                if a.split_kind[a.ctrl_node[q], s, off, c] == CONTROLLED:
                    out[(node.id, i, o, cls.id)] = tuple(float(x) for x in beta[q])
    return out


def run_calibration_loop(
    model: Model,
    targets: Mapping[str, object],
    max_outer: int = 2,
    tol: float = DEFAULT_TOL,
    initial: float | np.ndarray = INITIAL_GUESS,
    max_passes: int = 12,
) -> CalibrationReport:
    """Calibrate the offramp split ratios of ``model`` against ``targets`` (veh/h per interval)."""
    if max_outer < 1:
        raise ValueError("max_outer must be at least 1")
    if not tol > 0:
        raise ValueError("tol must be positive")
    cfg = model.config
    spi, n_int, T = cfg.steps_per_interval, cfg.n_intervals, cfg.horizon
    nq = len(model.offramps)
    tgt = target_matrix(model, targets)
    beta = np.broadcast_to(np.asarray(initial, dtype=float), (nq, n_int)).copy() if nq else np.zeros((0, n_int))
    solve = solve_offramp_beta_gated if model.gated else solve_offramp_beta_full_access

    norms: list[float] = []
    starved = np.zeros((nq, n_int), dtype=bool)
    clamped = np.zeros((nq, n_int), dtype=bool)
    out = None
    converged = False
    it = 0
    for it in range(1, max_outer + 1):
        try:
            rec = Recorder(model)
            state = model.initial_state()
            for k in range(n_int):
                t0, t1 = k * spi, min((k + 1) * spi, T)
                if t1 <= t0:
                    break
                state = _calibrate_interval(model, rec, state, k, beta, tgt, solve, starved, clamped,
                                            max_passes, tol)
            out = to_output(model, _final_run(model, beta), beta)
        except SimulationError as exc:
            raise CalibrationError(str(exc), it) from exc
        sim = _interval_flows(model, out)
        ok = ~(starved | clamped)
        rel = np.abs(sim - tgt)
        norms.append(float(np.max(rel[ok] / np.maximum(tgt[ok], 1e-9), initial=0.0)))
        if np.all(rel[ok] <= tol * tgt[ok] + 1e-9):
            converged = True
            break

    sim = _interval_flows(model, out)
    return CalibrationReport(
        offramps=model.offramps, beta=beta, targets=tgt, simulated=sim, residuals=sim - tgt,
        starved=starved, clamped=clamped, iterations=it, converged=converged,
        residual_norms=norms, splits=_emit_splits(model, beta), output=out,
    )


def _calibrate_interval(model, rec, state, k, beta, tgt, solve, starved, clamped, max_passes, tol):
    """Solve interval ``k`` in place and return the state at its end.

    Each pass simulates the interval with the current guess ``g`` and
    re-solves the offramp ratios ``h(g)`` from the recorded node inputs. The
    fixed point ``g = h(g)`` is approached with a per-offramp secant step.
    Capacity drop makes ``h`` slightly discontinuous in congestion, so the
    pass whose simulated offramp flows are closest to the targets is kept.
    """
    cfg = model.config
    spi, T = cfg.steps_per_interval, cfg.horizon
    t0, t1 = k * spi, min((k + 1) * spi, T)
    steps = t1 - t0
    nq = len(model.offramps)
    cols = [model.link_ids.index(o) for o in model.offramps]
    g = beta[:, k].copy()
    g_prev = F_prev = None
    best = None
    for _ in range(max_passes):
        beta[:, k] = g
        trial = state.copy()
        advance(model, trial, t1, rec, beta)
        h = g.copy()
        flags = np.zeros((2, nq), dtype=bool)
        for q in range(nq):
            sol = solve(_problem(model, rec, q, t0, t1), tgt[q, k] * cfg.dt * steps)
            h[q] = sol.beta
            flags[:, q] = sol.starved, sol.clamped
        sim = rec.inflow[t0:t1][:, cols, :].sum(axis=2).sum(axis=0) / (cfg.dt * steps)
        ok = ~(flags[0] | flags[1])
        err = float(np.max(np.abs(sim - tgt[:, k])[ok] / np.maximum(tgt[ok, k], 1e-9), initial=0.0))
        # flagged offramps take the solver's endpoint (1 if starved, 0 if clamped)
        keep = np.where(ok, g, h)
        if best is None or err < best[0]:
            best = (err, keep, trial, flags)
        F = np.where(ok, h - g, 0.0)
        if np.all(np.abs(F) <= BETA_EPS) or err <= 0.01 * tol:
            break
        nxt = np.where(ok, h, g)
        if g_prev is not None:
            d = F - F_prev
            step = np.abs(d) > 1e-14
            nxt[step] = g[step] - F[step] * (g[step] - g_prev[step]) / d[step]
            nxt = np.clip(nxt, 0.0, 1.0)
        g_prev, F_prev, g = g, F, nxt
    err, g, trial, flags = best
    starved[:, k], clamped[:, k] = flags
    if not np.array_equal(beta[:, k], g):
        beta[:, k] = g
        trial = state.copy()
        advance(model, trial, t1, rec, beta)
    return trial


def _final_run(model: Model, beta: np.ndarray) -> Recorder:
    rec = Recorder(model)
    advance(model, model.initial_state(), model.config.horizon, rec, beta)
    return rec


def generate_targets(model: Model, beta: Optional[np.ndarray] = None) -> dict[str, np.ndarray]:
    """Interval-mean offramp flows (veh/h) of a forward run; used to build synthetic targets."""
    b = model.beta if beta is None else beta
    out = to_output(model, _final_run(model, b), b)
    flows = _interval_flows(model, out)
    return {o: flows[q] for q, o in enumerate(model.offramps)}


def relative_residual(report: CalibrationReport) -> float:
    ok = ~(report.starved | report.clamped)
    if not ok.any():
        return 0.0
    return float(np.max(np.abs(report.residuals[ok]) / np.maximum(report.targets[ok], 1e-9)))


__all__ = [
    "BetaSolution",
    "CalibrationError",
    "CalibrationReport",
    "MonotonicityError",
    "OfframpProblem",
    "generate_targets",
    "relative_residual",
    "run_calibration_loop",
    "solve_offramp_beta_full_access",
    "solve_offramp_beta_gated",
    "target_matrix",
]
