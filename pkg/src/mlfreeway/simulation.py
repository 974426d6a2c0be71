"""Discrete-time multi-class simulation of a managed lane-freeway network.

Each step runs, in order: friction adjustment of managed links, class
switching at gates, link demands, link supplies, split-ratio completion,
node flows and the density update

    rho_l^c(t+1) = rho_l^c(t) + (f_in^c - f_out^c) / L_l.

Origin links are vertical queues: they send queued vehicles plus this step's
arrivals, capped at their capacity, so unserved demand is never dropped.

The network is compiled once into flat arrays (``CompiledModel``) and stepped
by a numba kernel. Internally flows are vehicles per step and speeds miles
per step; outputs are reported in veh/h and mph.
"""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from numba import njit

from .link_model import _friction, _metastate, _receiving, _sending
from .network import (
    ClassKind,
    DemandProfile,
    LaneGroup,
    LinkRole,
    Network,
    check_cfl,
    gate_segments,
    validate_network,
)
from .node_model import _complete_splits, _node_flows, _regularize

JAM_SLACK = 1e-6
NEG_CLAMP = 1e-12
DEFAULT_OFFRAMP_SPLIT = 0.1

FIXED, UNDEFINED, CONTROLLED = 0, 1, 2
ROLE_CODES = {LinkRole.ORDINARY: 0, LinkRole.ORIGIN: 1, LinkRole.DESTINATION: 2}


class SimulationError(RuntimeError):
    def __init__(self, message: str, link: Optional[str] = None, t: Optional[int] = None):
        super().__init__(message)
        self.link = link
        self.t = t


@dataclass(frozen=True)
class SimConfig:
    """Run configuration.

    ``initial_density`` is veh/mi per lane, keyed by link then class.
    ``gate_shares`` overrides the switching share of destination position ``p``
    at gate ``g`` (``{g: {p: share}}``).
    """

    dt_seconds: float
    horizon: int
    interval_minutes: float = 5.0
    initial_density: Mapping[str, Mapping[str, float]] = field(default_factory=dict)
    enable_friction: bool = True
    gate_shares: Mapping[str, Mapping[int, float]] = field(default_factory=dict)

    @property
    def dt(self) -> float:
        """Step length in hours."""
        return self.dt_seconds / 3600.0

    @property
    def steps_per_interval(self) -> int:
        ratio = self.interval_minutes * 60.0 / self.dt_seconds
        k = int(round(ratio))
        if k < 1 or abs(ratio - k) > 1e-9:
            raise ValueError(f"interval of {self.interval_minutes} min is not a whole number of {self.dt_seconds} s steps")
        return k

    @property
    def n_intervals(self) -> int:
        return max(1, math.ceil(self.horizon / self.steps_per_interval))


class CompiledModel(NamedTuple):
    """Flat array form of a network; field layout is what the kernel expects."""

    dt: float
    spi: int
    friction_on: bool
    length: np.ndarray
    vf: np.ndarray  # mi/step
    w: np.ndarray  # mi/step
    cap: np.ndarray  # veh/step, whole lane group
    jam: np.ndarray  # veh/mi, whole lane group
    rho_minus: np.ndarray
    rho_plus: np.ndarray
    role: np.ndarray
    sigma: np.ndarray
    partner: np.ndarray
    n_in: np.ndarray
    n_out: np.ndarray
    in_links: np.ndarray  # [node, slot] -> link, -1 pad
    out_links: np.ndarray
    prio: np.ndarray  # regularized, [node, slot]
    eta: np.ndarray  # [node, i, j', j]
    split_kind: np.ndarray  # [node, i, j, c]
    split_val: np.ndarray
    split_ctrl: np.ndarray
    ctrl_node: np.ndarray  # offramp controls
    ctrl_slot: np.ndarray  # output slot of the offramp at its node
    node_ctrl: np.ndarray  # node -> control index or -1
    gate_link: np.ndarray  # managed link feeding each switching gate
    gate_ctrl: np.ndarray  # [gate, position-1] -> control or -1
    gate_override: np.ndarray  # [gate, position-1], NaN = derive from splits
    dest_class: np.ndarray  # position-1 -> class index
    elig_class: int
    demand: np.ndarray  # [interval, link, class] veh/step


@dataclass
class Model:
    """A compiled network together with the ids needed to read results back."""

    network: Network
    config: SimConfig
    arrays: CompiledModel
    offramps: tuple[str, ...]  # one per control, same order
    gates: tuple[str, ...]
    segments: dict[str, list[str]]
    beta: np.ndarray  # [control, interval] scheduled offramp split ratios
    gated: bool

    @property
    def link_ids(self) -> tuple[str, ...]:
        return tuple(l.id for l in self.network.links)

    @property
    def class_ids(self) -> tuple[str, ...]:
        return tuple(c.id for c in self.network.classes)

    def initial_state(self) -> SimState:
        net, cfg = self.network, self.config
        rho = np.zeros((len(net.links), len(net.classes)))
        for lid, by_cls in cfg.initial_density.items():
            li = net.link_index[lid]
            for cid, val in by_cls.items():
                rho[li, net.class_index[cid]] = float(val) * net.links[li].lanes
        speed = np.array([l.fd.free_flow_speed for l in net.links])
        return SimState(densities=rho, metastate=np.zeros(len(net.links), dtype=np.int64),
                        speeds=speed, t=0)


@dataclass
class SimState:
    """Densities (veh/mi per lane group), metastates and last speeds (mph) at step t."""

    densities: np.ndarray
    metastate: np.ndarray
    speeds: np.ndarray
    t: int = 0

    def copy(self) -> SimState:
        return SimState(self.densities.copy(), self.metastate.copy(), self.speeds.copy(), self.t)


@dataclass
class SimOutput:
    """Recorded trajectories.

    ``density`` has T+1 snapshots (veh/mi per lane group); ``inflow``,
    ``outflow`` (veh/h per class) and ``speed`` (mph) have T steps.
    ``metastate`` holds the metastate used at each step plus the final one.
    """

    link_ids: tuple[str, ...]
    class_ids: tuple[str, ...]
    dt: float
    density: np.ndarray
    inflow: np.ndarray
    outflow: np.ndarray
    speed: np.ndarray
    metastate: np.ndarray
    offramps: tuple[str, ...] = ()
    offramp_beta: Optional[np.ndarray] = None  # [offramp, interval] used in the run
    clamped_mass: float = 0.0

    @property
    def horizon(self) -> int:
        return self.inflow.shape[0]

    def offramp_flow(self, offramp: str) -> np.ndarray:
        """Realized offramp inflow per step, veh/h."""
        return self.inflow[:, self.link_ids.index(offramp), :].sum(axis=1)


# ---------------------------------------------------------------- compilation

def _class_targets(network: Network, segments: dict[str, list[str]]) -> dict[str, int]:
    """Offramp id -> destination position that exits there."""
    out = {}
    for offs in segments.values():
        for k, o in enumerate(offs):
            out[o] = k + 1
    return out


def _ramp_schedule(series, n_int: int, name: str) -> np.ndarray:
    if series is None:
        return np.full(n_int, DEFAULT_OFFRAMP_SPLIT)
    arr = np.atleast_1d(np.asarray(series, dtype=float))
    if arr.size == 1:
        arr = np.full(n_int, float(arr[0]))
    if arr.size < n_int:
        arr = np.concatenate([arr, np.full(n_int - arr.size, arr[-1])])
    if np.any(arr < 0) or np.any(arr > 1):
        raise ValueError(f"offramp split ratios for {name} must lie in [0, 1]")
    return arr[:n_int].copy()


def compile_model(
    network: Network,
    config: SimConfig,
    demands: DemandProfile,
    offramp_splits: Optional[Mapping[str, object]] = None,
    validate: bool = True,
) -> Model:
    """Flatten a network, its demands and offramp split schedule for the kernel."""
    if validate:
        problems = validate_network(network)
        if problems:
            raise ValueError("invalid network: " + "; ".join(map(str, problems)))
        cfl = check_cfl(network, config.dt)
        if cfl:
            raise ValueError("CFL violation: " + "; ".join(map(str, cfl)))
    if config.horizon < 0:
        raise ValueError("horizon must be non-negative")
    dt = config.dt
    spi = config.steps_per_interval
    n_int = config.n_intervals
    links, nodes, classes = network.links, network.nodes, network.classes
    nl, nn, nc = len(links), len(nodes), len(classes)
    li = network.link_index
    ci = network.class_index
    gated = len(network.classes_of(ClassKind.DESTINATION)) > 0

    gfd = [l.group_fd for l in links]
    length = np.array([l.length for l in links], dtype=float)
    vf = np.array([f.free_flow_speed * dt for f in gfd])
    w = np.array([f.congestion_wave_speed * dt for f in gfd])
    cap = np.array([f.capacity * dt for f in gfd])
    jam = np.array([f.jam_density for f in gfd])
    rho_minus = np.array([f.rho_minus for f in gfd])
    rho_plus = np.array([f.rho_plus for f in gfd])
    role = np.array([ROLE_CODES[l.role] for l in links], dtype=np.int64)
    for k, l in enumerate(links):
        if l.role == LinkRole.ORIGIN:
            jam[k] = np.inf
    sigma = np.array([l.friction if l.lane_group == LaneGroup.MANAGED else 0.0 for l in links])
    partner = np.array([li[l.gp_partner] if l.gp_partner is not None else -1 for l in links], dtype=np.int64)

    mmax = max((len(n.inputs) for n in nodes), default=1)
    nmax = max((len(n.outputs) for n in nodes), default=1)
    n_in = np.array([len(n.inputs) for n in nodes], dtype=np.int64)
    n_out = np.array([len(n.outputs) for n in nodes], dtype=np.int64)
    in_links = -np.ones((nn, mmax), dtype=np.int64)
    out_links = -np.ones((nn, nmax), dtype=np.int64)
    prio = np.zeros((nn, mmax))
    eta = np.ones((nn, mmax, nmax, nmax))
    split_kind = np.full((nn, mmax, nmax, nc), FIXED, dtype=np.int64)
    split_val = np.zeros((nn, mmax, nmax, nc))
    split_ctrl = -np.ones((nn, mmax, nmax, nc), dtype=np.int64)

    segments = gate_segments(network) if network.is_gated else {}
    targets = _class_targets(network, segments)

    offramps: list[str] = []
    ctrl_node: list[int] = []
    ctrl_slot: list[int] = []
    node_ctrl = -np.ones(nn, dtype=np.int64)
    for a, n in enumerate(nodes):
        for s, lid in enumerate(n.inputs):
            in_links[a, s] = li[lid]
        for s, lid in enumerate(n.outputs):
            out_links[a, s] = li[lid]
        p = np.asarray(network.priorities(n), dtype=float)
        _regularize(p, prio[a, : len(n.inputs)])
        for s, i in enumerate(n.inputs):
            for t1, j1 in enumerate(n.outputs):
                for t2, j2 in enumerate(n.outputs):
                    eta[a, s, t1, t2] = n.eta(i, j1, j2)

        out_groups = [network.link(j).lane_group for j in n.outputs]
        lane_choice = LaneGroup.MANAGED in out_groups and any(
            g in (LaneGroup.GP, LaneGroup.AUXILIARY) for g in out_groups)
        for t, j in enumerate(n.outputs):
            if out_groups[t] == LaneGroup.OFFRAMP:
                node_ctrl[a] = len(offramps)
                offramps.append(j)
                ctrl_node.append(a)
                ctrl_slot.append(t)
        for s, i in enumerate(n.inputs):
            gin = network.link(i).lane_group
            for t, j in enumerate(n.outputs):
                gout = out_groups[t]
                for c, cls in enumerate(classes):
                    key = (i, j, cls.id)
                    if key in n.known_splits:
                        split_val[a, s, t, c] = n.known_splits[key]
                    elif gout == LaneGroup.OFFRAMP:
                        if gin == LaneGroup.ONRAMP:
                            split_val[a, s, t, c] = 0.0
                        elif cls.kind == ClassKind.DESTINATION:
                            split_val[a, s, t, c] = 1.0 if targets.get(j) == cls.position else 0.0
                        elif gin == LaneGroup.MANAGED and gated:
                            split_val[a, s, t, c] = 0.0
                        else:
                            split_kind[a, s, t, c] = CONTROLLED
                            split_ctrl[a, s, t, c] = node_ctrl[a]
                    elif lane_choice and gout == LaneGroup.MANAGED and cls.kind != ClassKind.ELIGIBLE:
                        split_val[a, s, t, c] = 0.0
                    else:
                        split_kind[a, s, t, c] = UNDEFINED
                        split_val[a, s, t, c] = np.nan

    # gates switch eligible vehicles into destination classes on their managed
    # input; an entry gate without one switches on its managed output, whose
    # vehicles are already past the gate's own offramps
    dest = sorted(network.classes_of(ClassKind.DESTINATION), key=lambda c: c.position)
    dest_class = np.array([ci[c.id] for c in dest], dtype=np.int64)
    kpos = max(len(dest), 1)
    gates, gate_link, gate_ctrl_rows, gate_over_rows = [], [], [], []
    ctrl_of = {o: k for k, o in enumerate(offramps)}
    for n in nodes:
        if not n.is_gate:
            continue
        if not gated:
            continue
        ml_in = [i for i in n.inputs if network.link(i).lane_group == LaneGroup.MANAGED]
        ml_out = [j for j in n.outputs if network.link(j).lane_group == LaneGroup.MANAGED]
        if not ml_in and not ml_out:
            continue
        row = -np.ones(kpos, dtype=np.int64)
        over = np.full(kpos, np.nan)
        for k, o in enumerate(segments.get(n.id, [])):
            if ml_in or o not in n.outputs:
                row[k] = ctrl_of[o]
        for pos, share in config.gate_shares.get(n.id, {}).items():
            if not 1 <= int(pos) <= kpos:
                raise ValueError(f"gate {n.id}: switching share for unknown position {pos}")
            over[int(pos) - 1] = float(share)
        if np.nansum(over) > 1.0 + 1e-12:
            raise ValueError(f"invalid switching shares at gate {n.id}: sum exceeds 1")
        gates.append(n.id)
        gate_link.append(li[ml_in[0] if ml_in else ml_out[0]])
        gate_ctrl_rows.append(row)
        gate_over_rows.append(over)

    demand = np.zeros((n_int, nl, nc))
    for lid, by_cls in demands.flows.items():
        if lid not in li:
            raise ValueError(f"demand for unknown link {lid}")
        if links[li[lid]].role != LinkRole.ORIGIN:
            raise ValueError(f"demand given for non-origin link {lid}")
        for cid in by_cls:
            for k in range(n_int):
                demand[k, li[lid], ci[cid]] = demands.rate(lid, cid, k) * dt
    if np.any(demand < 0):
        raise ValueError("demands must be non-negative")

    splits = offramp_splits or {}
    unknown = set(splits) - set(offramps)
    if unknown:
        raise ValueError(f"offramp splits given for links that are not offramps: {sorted(unknown)}")
    beta = np.zeros((len(offramps), n_int))
    for k, o in enumerate(offramps):
        beta[k] = _ramp_schedule(splits.get(o), n_int, o)

    elig = network.classes_of(ClassKind.ELIGIBLE)
    arrays = CompiledModel(
        dt=float(dt), spi=int(spi), friction_on=bool(config.enable_friction),
        length=length, vf=vf, w=w, cap=cap, jam=jam, rho_minus=rho_minus, rho_plus=rho_plus,
        role=role, sigma=sigma, partner=partner,
        n_in=n_in, n_out=n_out, in_links=in_links, out_links=out_links, prio=prio, eta=eta,
        split_kind=split_kind, split_val=split_val, split_ctrl=split_ctrl,
        ctrl_node=np.array(ctrl_node, dtype=np.int64), ctrl_slot=np.array(ctrl_slot, dtype=np.int64),
        node_ctrl=node_ctrl,
        gate_link=np.array(gate_link, dtype=np.int64),
        gate_ctrl=np.array(gate_ctrl_rows, dtype=np.int64).reshape(len(gates), kpos),
        gate_override=np.array(gate_over_rows, dtype=float).reshape(len(gates), kpos),
        dest_class=dest_class,
        elig_class=int(ci[elig[0].id]) if elig else 0,
        demand=demand,
    )
    return Model(network=network, config=config, arrays=arrays, offramps=tuple(offramps),
                 gates=tuple(gates), segments=segments, beta=beta, gated=gated)


# ---------------------------------------------------------------- kernels

@njit(cache=True)
def _switch_classes(rho, link, elig, dest_class, shares):
    """Pool eligible and destination mass on a link, then re-split it by shares."""
    pool = rho[link, elig]
    for p in range(dest_class.shape[0]):
        pool += rho[link, dest_class[p]]
    given = 0.0
    for p in range(dest_class.shape[0]):
        part = shares[p] * pool
        rho[link, dest_class[p]] = part
        given += part
    rho[link, elig] = pool - given


@njit(cache=True)
def _gate_shares(m, g, k, beta, shares):
    remain = 1.0
    for p in range(shares.shape[0]):
        q = m.gate_ctrl[g, p]
        b = beta[q, k] if q >= 0 else 0.0
        if not np.isnan(m.gate_override[g, p]):
            shares[p] = m.gate_override[g, p]
        else:
            shares[p] = remain * b
        remain *= 1.0 - b


@njit(cache=True)
def _node_step(m, a, S, R, beta_k, bsplit, fbuf):
    """Complete splits and compute flows at node ``a``; returns the completed splits."""
    mi = m.n_in[a]
    no = m.n_out[a]
    nc = S.shape[1]
    Sn = np.empty((mi, nc))
    Rn = np.empty(no)
    for s in range(mi):
        for c in range(nc):
            Sn[s, c] = S[m.in_links[a, s], c]
    for t in range(no):
        Rn[t] = R[m.out_links[a, t]]
    b = np.empty((mi, no, nc))
    for s in range(mi):
        for t in range(no):
            for c in range(nc):
                kind = m.split_kind[a, s, t, c]
                if kind == 2:
                    b[s, t, c] = beta_k[m.split_ctrl[a, s, t, c]]
                else:
                    b[s, t, c] = m.split_val[a, s, t, c]
    done = np.empty((mi, no, nc))
    _complete_splits(Sn, b, Rn, m.prio[a, :mi], done)
    f = np.empty((mi, no, nc))
    _node_flows(Sn, done, Rn, m.prio[a, :mi], m.eta[a, :mi, :no, :no], f)
    for s in range(mi):
        for t in range(no):
            for c in range(nc):
                bsplit[s, t, c] = done[s, t, c]
                fbuf[s, t, c] = f[s, t, c]
    return Sn, Rn


@njit(cache=True)
def _simulate(m, rho, theta, vprev, t0, t1, beta,
              rec_rho, rec_in, rec_out, rec_speed, rec_theta,
              rec_S, rec_R, rec_beta, last_f):
    """Advance the state from step t0 to t1 in place.

    Returns (status, link, t); status 1 means a link exceeded jam density,
    and the third field of the return reports clamped negative mass.
    """
    nl, nc = rho.shape
    nn = m.n_in.shape[0]
    ng = m.gate_link.shape[0]
    nk = m.demand.shape[0]
    dt = m.dt
    S = np.zeros((nl, nc))
    R = np.zeros(nl)
    fin = np.zeros((nl, nc))
    fout = np.zeros((nl, nc))
    veff = np.empty(nl)
    ceff = np.empty(nl)
    shares = np.zeros(m.gate_ctrl.shape[1])
    bsplit = np.zeros((last_f.shape[1], last_f.shape[2], nc))
    clamped = 0.0
    for t in range(t0, t1):
        k = t // m.spi
        if k >= nk:
            k = nk - 1
        beta_k = beta[:, k]
        # control inputs: friction, then class switching at gates
        for l in range(nl):
            veff[l] = m.vf[l]
            ceff[l] = m.cap[l]
            p = m.partner[l]
            if m.friction_on and p >= 0 and m.sigma[l] > 0.0:
                v, F = _friction(m.vf[l], m.cap[l], m.sigma[l], vprev[p] * dt)
                veff[l] = v
                ceff[l] = F
        for g in range(ng):
            _gate_shares(m, g, k, beta, shares)
            _switch_classes(rho, m.gate_link[g], m.elig_class, m.dest_class, shares)
        for l in range(nl):
            for c in range(nc):
                rec_rho[t, l, c] = rho[l, c]

        # demands and supplies
        for l in range(nl):
            if m.role[l] == 1:
                tot = 0.0
                for c in range(nc):
                    tot += rho[l, c] * m.length[l] + m.demand[k, l, c]
                send = min(tot, ceff[l])
                for c in range(nc):
                    S[l, c] = send * ((rho[l, c] * m.length[l] + m.demand[k, l, c]) / tot) if tot > 0.0 else 0.0
                theta[l] = 0
                R[l] = 0.0
            else:
                _sending(rho[l], veff[l], ceff[l], S[l])
                tot = 0.0
                for c in range(nc):
                    tot += rho[l, c]
                theta[l] = _metastate(theta[l], tot, m.rho_minus[l], m.rho_plus[l])
                R[l] = _receiving(tot, theta[l], m.cap[l], m.w[l], m.jam[l])
            rec_theta[t, l] = theta[l]

        for l in range(nl):
            for c in range(nc):
                fin[l, c] = 0.0
                fout[l, c] = 0.0
                if m.role[l] == 1:
                    fin[l, c] = m.demand[k, l, c]
                elif m.role[l] == 2:
                    fout[l, c] = S[l, c]

        # nodes
        for a in range(nn):
            fb = last_f[a]
            Sn, Rn = _node_step(m, a, S, R, beta_k, bsplit, fb)
            mi = m.n_in[a]
            no = m.n_out[a]
            for s in range(mi):
                li = m.in_links[a, s]
                for tt in range(no):
                    lo = m.out_links[a, tt]
                    for c in range(nc):
                        fout[li, c] += fb[s, tt, c]
                        fin[lo, c] += fb[s, tt, c]
            q = m.node_ctrl[a]
            if q >= 0:
                for s in range(mi):
                    for c in range(nc):
                        rec_S[t, q, s, c] = Sn[s, c]
                for tt in range(no):
                    rec_R[t, q, tt] = Rn[tt]
                for s in range(mi):
                    for tt in range(no):
                        for c in range(nc):
                            rec_beta[t, q, s, tt, c] = bsplit[s, tt, c]

        # state update
        for l in range(nl):
            tot_out = 0.0
            tot = 0.0
            for c in range(nc):
                tot_out += fout[l, c]
                tot += rho[l, c]
                rec_in[t, l, c] = fin[l, c]
                rec_out[t, l, c] = fout[l, c]
            vfree = m.vf[l] / dt
            if m.role[l] == 1 or tot < 1e-9:
                vprev[l] = vfree
            else:
                vprev[l] = min(vfree, tot_out / tot / dt)
            rec_speed[t, l] = vprev[l]
            new_tot = 0.0
            for c in range(nc):
                r = rho[l, c] + (fin[l, c] - fout[l, c]) / m.length[l]
                if r < 0.0:
                    clamped += -r * m.length[l]
                    if r < -NEG_CLAMP:
                        return 2, l, t
                    r = 0.0
                rho[l, c] = r
                new_tot += r
            if new_tot > m.jam[l] + JAM_SLACK:
                return 1, l, t
    if t1 >= t0:
        for l in range(nl):
            for c in range(nc):
                rec_rho[t1, l, c] = rho[l, c]
            tot = 0.0
            for c in range(nc):
                tot += rho[l, c]
            if m.role[l] == 1:
                rec_theta[t1, l] = 0
            else:
                rec_theta[t1, l] = _metastate(theta[l], tot, m.rho_minus[l], m.rho_plus[l])
    return 0, -1, clamped


# ---------------------------------------------------------------- python API

class Recorder:
    """Preallocated trajectory buffers for a whole horizon."""

    def __init__(self, model: Model):
        a = model.arrays
        T = model.config.horizon
        nl, nc = len(model.network.links), len(model.network.classes)
        nq = len(model.offramps)
        mmax, nmax = a.in_links.shape[1], a.out_links.shape[1]
        self.rho = np.zeros((T + 1, nl, nc))
        self.inflow = np.zeros((T, nl, nc))
        self.outflow = np.zeros((T, nl, nc))
        self.speed = np.zeros((T, nl))
        self.theta = np.zeros((T + 1, nl), dtype=np.int64)
        self.S = np.zeros((T, nq, mmax, nc))
        self.R = np.zeros((T, nq, nmax))
        self.beta = np.zeros((T, nq, mmax, nmax, nc))
        self.last_f = np.zeros((len(model.network.nodes), mmax, nmax, nc))
        self.clamped = 0.0


def advance(model: Model, state: SimState, t1: int, rec: Recorder, beta: Optional[np.ndarray] = None) -> SimState:
    """Run the kernel from ``state.t`` to ``t1`` (exclusive), mutating ``state``."""
    b = model.beta if beta is None else beta
    status, link, info = _simulate(
        model.arrays, state.densities, state.metastate, state.speeds, state.t, t1, b,
        rec.rho, rec.inflow, rec.outflow, rec.speed, rec.theta, rec.S, rec.R, rec.beta, rec.last_f)
    if status == 1:
        lid = model.link_ids[link]
        raise SimulationError(f"density on link {lid} exceeds jam density at step {info} (CFL violation)", lid, int(info))
    if status == 2:
        lid = model.link_ids[link]
        raise SimulationError(f"negative density on link {lid} at step {info}", lid, int(info))
    rec.clamped += float(info)
    state.t = t1
    return state


def to_output(model: Model, rec: Recorder, beta: Optional[np.ndarray] = None) -> SimOutput:
    dt = model.config.dt
    return SimOutput(
        link_ids=model.link_ids, class_ids=model.class_ids, dt=dt,
        density=rec.rho.copy(), inflow=rec.inflow / dt, outflow=rec.outflow / dt,
        speed=rec.speed.copy(), metastate=rec.theta.copy(),
        offramps=model.offramps,
        offramp_beta=(model.beta if beta is None else beta).copy(),
        clamped_mass=rec.clamped,
    )


def simulate_model(model: Model, beta: Optional[np.ndarray] = None) -> tuple[SimOutput, Recorder]:
    rec = Recorder(model)
    state = model.initial_state()
    advance(model, state, model.config.horizon, rec, beta)
    return to_output(model, rec, beta), rec


def run(
    network: Network,
    config: SimConfig,
    demands: DemandProfile,
    splits: Optional[Mapping[str, object]] = None,
) -> SimOutput:
    """Simulate ``config.horizon`` steps.

    ``splits`` maps offramp link ids to their split-ratio schedule: a scalar
    or one value per demand interval.
    """
    model = compile_model(network, config, demands, splits)
    out, _ = simulate_model(model)
    return out


def mass_balance(output: SimOutput, network: Network) -> tuple[float, float]:
    """(storage change - net boundary inflow, scale) in vehicles.

    Storage includes origin queues. Clamped negative mass is counted as
    inflow since the clamp adds it back.
    """
    length = np.array([network.link(lid).length for lid in output.link_ids])
    stored = (output.density[-1] - output.density[0]).sum(axis=1) @ length
    roles = [network.link(lid).role for lid in output.link_ids]
    orig = [k for k, r in enumerate(roles) if r == LinkRole.ORIGIN]
    dest = [k for k, r in enumerate(roles) if r == LinkRole.DESTINATION]
    entered = output.inflow[:, orig, :].sum() * output.dt
    left = output.outflow[:, dest, :].sum() * output.dt
    scale = max(entered + abs(output.density[0].sum(axis=1) @ length), 1.0)
    return float(stored - (entered - left) - output.clamped_mass), float(scale)


def step(model: Model, state: SimState) -> tuple[SimState, dict[str, np.ndarray]]:
    """Advance one step; returns the next state and per-node flows f[i, j, c] in veh/h."""
    rec = Recorder(model) if model.config.horizon > state.t else None
    if rec is None:
        raise ValueError("state is already at the end of the horizon")
    nxt = state.copy()
    advance(model, nxt, state.t + 1, rec)
    flows = {}
    for a, n in enumerate(model.network.nodes):
        flows[n.id] = rec.last_f[a, : len(n.inputs), : len(n.outputs)] / model.config.dt
    return nxt, flows


def apply_gate_class_switching(densities, eligible: int, destination: list[int], shares) -> np.ndarray:
    """Relabel one link's class densities at a gate.

    Eligible and destination mass are pooled, then destination position ``p``
    receives ``shares[p]`` of the pool and the rest stays eligible.
    """
    shares = np.asarray(shares, dtype=float)
    if np.any(shares < 0) or shares.sum() > 1.0 + 1e-12:
        raise ValueError("invalid switching shares")
    if len(shares) != len(destination):
        raise ValueError("one share per destination class is required")
    rho = np.array(densities, dtype=float).reshape(1, -1)
    _switch_classes(rho, 0, int(eligible), np.asarray(destination, dtype=np.int64), shares)
    return rho[0]
