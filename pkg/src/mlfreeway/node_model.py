"""Node model: split-ratio completion and relaxed-FIFO flow allocation.

Arrays follow one layout throughout: demands ``S[i, c]``, supplies ``R[j]``,
split ratios ``beta[i, j, c]`` (NaN marks an undefined ratio), priorities
``p[i]`` and restriction coefficients ``eta[i, j_restricting, j_restricted]``.

Flow allocation processes the most constrained output first. Its supply is
shared among the inputs in proportion to their regularized priorities, with
any share above an input's demand handed on to the others. An input that
realizes only a fraction ``alpha`` of its demand at that output has its
demand to every output ``j`` not yet processed scaled by
``1 - eta * (1 - alpha)``: ``eta = 1`` is strict FIFO, ``eta = 0`` decouples
the outputs. Flows already allocated at processed outputs stay fixed, which
keeps the offramp flow nondecreasing in the offramp split in all but rare
cases where two binding outputs are nearly tied and swap processing order.
The price is that with ``eta = 1`` an input served in full at one output and
cut later at another no longer splits exactly in proportion to its ratios.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from numba import njit

RATIO_REL_TOL = 1e-9
MAX_SOLVER_ITER = 10_000
NEGLIGIBLE = 1e-12  # demand below this fraction of the node scale counts as zero


@njit(cache=True)
def _regularize(p, out):
    m = p.shape[0]
    nz = 0
    for i in range(m):
        if p[i] <= 0.0:
            nz += 1
    if nz == 0:
        for i in range(m):
            out[i] = p[i]
        return
    for i in range(m):
        out[i] = p[i] * (m - nz) / m + nz / (m * m)


@njit(cache=True)
def _waterfill(d, pt, supply, alloc):
    """Share ``supply`` over demands ``d`` by priority, capping at demand."""
    m = d.shape[0]
    active = np.zeros(m, dtype=np.bool_)
    for i in range(m):
        alloc[i] = 0.0
        active[i] = d[i] > 0.0
    remaining = supply
    while True:
        psum = 0.0
        for i in range(m):
            if active[i]:
                psum += pt[i]
        if psum <= 0.0:
            return
        lam = remaining / psum
        freed = 0.0
        changed = False
        for i in range(m):
            if active[i] and d[i] <= lam * pt[i]:
                alloc[i] = d[i]
                freed += d[i]
                active[i] = False
                changed = True
        if not changed:
            for i in range(m):
                if active[i]:
                    alloc[i] = remaining * pt[i] / psum
            return
        remaining -= freed
        if remaining < 0.0:
            remaining = 0.0


@njit(cache=True)
def _node_flows(S, beta, R, pt, eta, f):
    """Write flows f[i, j, c] for fully defined splits; pt must be regularized.

    Returns the mask of outputs whose supply binds; their inflow totals R[j].
    """
    m, n, ncls = beta.shape
    d0 = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for c in range(ncls):
                acc += beta[i, j, c] * S[i, c]
            d0[i, j] = acc
    flow = d0.copy()
    processed = np.zeros(n, dtype=np.bool_)
    d = np.empty(m)
    alloc = np.empty(m)
    for _ in range(n):
        best = -1
        best_ratio = 0.0
        for j in range(n):
            if processed[j]:
                continue
            dj = 0.0
            for i in range(m):
                dj += flow[i, j]
            if dj > R[j]:
                ratio = R[j] / dj
                if best < 0 or ratio < best_ratio:
                    best = j
                    best_ratio = ratio
        if best < 0:
            break
        js = best
        for i in range(m):
            d[i] = flow[i, js]
        _waterfill(d, pt, R[js], alloc)
        processed[js] = True
        for i in range(m):
            if d[i] <= 0.0:
                continue
            flow[i, js] = alloc[i]
            if alloc[i] >= d[i]:
                continue
            shortfall = 1.0 - alloc[i] / d[i]
            for j in range(n):
                if not processed[j]:
                    flow[i, j] *= 1.0 - eta[i, js, j] * shortfall
    for i in range(m):
        for j in range(n):
            if flow[i, j] == d0[i, j]:
                for c in range(ncls):
                    f[i, j, c] = beta[i, j, c] * S[i, c]
            else:
                scale = flow[i, j] / d0[i, j]
                for c in range(ncls):
                    f[i, j, c] = scale * (beta[i, j, c] * S[i, c])
    return processed


@njit(cache=True)
def _complete_splits(S, beta, R, pt, out):
    """Fill undefined (NaN) split ratios; returns the number of balancing iterations.

    Demand-supply balancing: repeatedly raise the smallest oriented
    demand-supply ratio toward the largest, and once they are equal spread
    what is left in proportion to output supply.
    """
    m, n, ncls = beta.shape
    for i in range(m):
        for j in range(n):
            for c in range(ncls):
                out[i, j, c] = beta[i, j, c]
    scale = 0.0
    for j in range(n):
        scale = max(scale, R[j])
    for i in range(m):
        for c in range(ncls):
            scale = max(scale, S[i, c])

    undef = np.zeros((m, n, ncls), dtype=np.bool_)
    bbar = np.zeros((m, ncls))
    nv = np.zeros((m, ncls))
    any_active = False
    for i in range(m):
        for c in range(ncls):
            known = 0.0
            k = 0
            for j in range(n):
                if np.isnan(beta[i, j, c]):
                    k += 1
                else:
                    known += beta[i, j, c]
            if k == 0:
                continue
            rest = 1.0 - known
            if rest <= 0.0:
                for j in range(n):
                    if np.isnan(beta[i, j, c]):
                        out[i, j, c] = 0.0
                continue
            if k == 1 or S[i, c] <= NEGLIGIBLE * scale:
                for j in range(n):
                    if np.isnan(beta[i, j, c]):
                        out[i, j, c] = rest / k
                continue
            for j in range(n):
                if np.isnan(beta[i, j, c]):
                    undef[i, j, c] = True
                    out[i, j, c] = 0.0
            bbar[i, c] = rest
            nv[i, c] = k
            any_active = True
    if not any_active:
        return 0

    rfl = np.empty(n)
    for j in range(n):
        rfl[j] = max(R[j], NEGLIGIBLE * scale)

    stot = np.zeros(m)
    for i in range(m):
        for c in range(ncls):
            stot[i] += S[i, c]
    u0 = np.zeros((m, n), dtype=np.bool_)  # U_j, fixed
    for i in range(m):
        for j in range(n):
            for c in range(ncls):
                if undef[i, j, c]:
                    u0[i, j] = True
    ut = u0.copy()  # remaining U_j
    vt = np.zeros(n, dtype=np.bool_)
    for j in range(n):
        for i in range(m):
            if ut[i, j]:
                vt[j] = True

    st = np.zeros((m, n))
    pij = np.zeros((m, n))
    psum = np.zeros(n)
    ratio = np.zeros((m, n))
    it = 0
    while True:
        anyv = False
        for j in range(n):
            if vt[j]:
                anyv = True
        if not anyv:
            break
        it += 1

        for i in range(m):
            for j in range(n):
                a = 0.0
                g = 0.0
                for c in range(ncls):
                    a += out[i, j, c] * S[i, c]
                    if undef[i, j, c]:
                        g += (out[i, j, c] + bbar[i, c] / nv[i, c]) * S[i, c]
                    else:
                        g += out[i, j, c] * S[i, c]
                st[i, j] = a
                pij[i, j] = pt[i] * g / stot[i] if stot[i] > 0.0 else 0.0
        for j in range(n):
            acc = 0.0
            for i in range(m):
                if u0[i, j]:
                    acc += pij[i, j]
            psum[j] = acc
        mu_plus = 0.0
        for j in range(n):
            for i in range(m):
                if pij[i, j] > 0.0:
                    ratio[i, j] = st[i, j] / (pij[i, j] * rfl[j]) * psum[j]
                    if ratio[i, j] > mu_plus:
                        mu_plus = ratio[i, j]
                else:
                    ratio[i, j] = np.inf

        # output(s) holding the smallest oriented ratio among remaining movements
        mu_min = np.inf
        for j in range(n):
            if vt[j]:
                for i in range(m):
                    if ut[i, j] and ratio[i, j] < mu_min:
                        mu_min = ratio[i, j]
        thresh = mu_min + RATIO_REL_TOL * abs(mu_min)
        jm = -1
        jm_ratio = 0.0
        for j in range(n):
            if not vt[j]:
                continue
            inY = False
            for i in range(m):
                if ut[i, j] and ratio[i, j] <= thresh:
                    inY = True
            if not inY:
                continue
            tot = 0.0
            for i in range(m):
                tot += st[i, j]
            r = tot / rfl[j]
            if jm < 0 or r < jm_ratio:
                jm = j
                jm_ratio = r
        im = -1
        cm = -1
        sbar_min = 0.0
        for i in range(m):
            if not (ut[i, jm] and ratio[i, jm] <= thresh):
                continue
            for c in range(ncls):
                if undef[i, jm, c] and bbar[i, c] > 0.0:
                    sb = bbar[i, c] * S[i, c]
                    if im < 0 or sb < sbar_min:
                        im = i
                        cm = c
                        sbar_min = sb
        mu_minus = ratio[im, jm] if im >= 0 else mu_plus

        if im < 0 or mu_minus >= mu_plus - RATIO_REL_TOL * abs(mu_plus) or it > MAX_SOLVER_ITER:
            # balanced: distribute the rest in proportion to supply
            for i in range(m):
                for c in range(ncls):
                    if bbar[i, c] <= 0.0:
                        continue
                    denom = 0.0
                    cnt = 0
                    for j in range(n):
                        if undef[i, j, c]:
                            denom += R[j]
                            cnt += 1
                    for j in range(n):
                        if undef[i, j, c]:
                            share = R[j] / denom if denom > 0.0 else 1.0 / cnt
                            out[i, j, c] += share * bbar[i, c]
                    bbar[i, c] = 0.0
            break

        need = (mu_plus * pij[im, jm] * rfl[jm]) / (sbar_min * psum[jm]) - st[im, jm] / sbar_min
        delta = min(bbar[im, cm], need)
        if delta < 0.0:
            delta = 0.0
        out[im, jm, cm] += delta
        if delta >= bbar[im, cm]:
            bbar[im, cm] = 0.0
        else:
            bbar[im, cm] -= delta
        for j in range(n):
            if not ut[im, j]:
                continue
            keep = False
            for c in range(ncls):
                if undef[im, j, c] and bbar[im, c] > 0.0:
                    keep = True
            ut[im, j] = keep
        for j in range(n):
            if vt[j]:
                keep = False
                for i in range(m):
                    if ut[i, j]:
                        keep = True
                vt[j] = keep
    return it


def regularize_priorities(p) -> np.ndarray:
    """Give zero-priority inputs a positive share; result is positive and sums to 1."""
    p = np.asarray(p, dtype=float)
    out = np.empty_like(p)
    _regularize(p, out)
    return out


@dataclass
class NodeInputs:
    """Everything a node needs for one step."""

    demands: np.ndarray  # S[i, c]
    supplies: np.ndarray  # R[j]
    splits: np.ndarray  # beta[i, j, c], NaN = undefined
    priorities: Optional[np.ndarray] = None  # p[i]; uniform if omitted
    restriction: float | np.ndarray = 1.0  # scalar or eta[i, j', j]

    def __post_init__(self):
        self.demands = np.atleast_2d(np.asarray(self.demands, dtype=float))
        self.supplies = np.asarray(self.supplies, dtype=float).reshape(-1)
        self.splits = np.asarray(self.splits, dtype=float)
        m, ncls = self.demands.shape
        n = self.supplies.shape[0]
        if self.splits.ndim == 2:
            self.splits = self.splits[:, :, None]
        if self.splits.shape != (m, n, ncls):
            raise ValueError(f"splits shape {self.splits.shape} != {(m, n, ncls)}")
        if self.priorities is None:
            self.priorities = np.full(m, 1.0 / m)
        self.priorities = np.asarray(self.priorities, dtype=float)
        if np.isscalar(self.restriction) or np.ndim(self.restriction) == 0:
            self.restriction = np.full((m, n, n), float(self.restriction))
        self.restriction = np.asarray(self.restriction, dtype=float)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.splits.shape


def _check(inputs: NodeInputs) -> None:
    if np.any(inputs.demands < 0) or np.any(inputs.supplies < 0) or not (
        np.all(np.isfinite(inputs.demands)) and np.all(np.isfinite(inputs.supplies))
    ):
        raise ValueError("invalid node inputs: demands and supplies must be finite and non-negative")


def solve_undefined_split_ratios(
    inputs: NodeInputs,
    bias: Optional[Callable[[NodeInputs, np.ndarray], np.ndarray]] = None,
) -> np.ndarray:
    """Complete the undefined split ratios of a node.

    ``bias`` may post-process the completed ratios (hook for behavioural
    models such as inertia); it must keep every row summing to 1.
    """
    _check(inputs)
    out = np.empty_like(inputs.splits)
    _complete_splits(inputs.demands, inputs.splits, inputs.supplies,
                     regularize_priorities(inputs.priorities), out)
    if bias is not None:
        out = np.asarray(bias(inputs, out), dtype=float)
    return out


def compute_node_flows(inputs: NodeInputs) -> np.ndarray:
    """Flows f[i, j, c] through a node whose splits are fully defined."""
    _check(inputs)
    if np.any(np.isnan(inputs.splits)):
        raise ValueError("compute_node_flows needs fully defined split ratios")
    f = np.empty_like(inputs.splits)
    _node_flows(inputs.demands, inputs.splits, inputs.supplies,
                regularize_priorities(inputs.priorities), inputs.restriction, f)
    return f
