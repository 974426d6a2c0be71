"""Domain types for managed lane-freeway networks.

A network is a set of directed links joined by nodes. Links carry a lane group
(GP, managed, ramps) and a per-lane fundamental diagram; nodes carry input
priorities, relaxed-FIFO restriction coefficients and optional a-priori split
ratios. Gate nodes mark the access points of a separated managed lane.

Validation never raises: problems are returned as :class:`Violation` records.
"""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Optional

SPLIT_SUM_TOL = 1e-9
FRICTION_GUIDANCE_MAX = 0.4


class ClassKind(str, Enum):
    GP_ONLY = "gp_only"
    ELIGIBLE = "eligible"
    DESTINATION = "destination"


class LinkRole(str, Enum):
    ORDINARY = "ordinary"
    ORIGIN = "origin"
    DESTINATION = "destination"


class LaneGroup(str, Enum):
    GP = "gp"
    MANAGED = "managed"
    ONRAMP = "onramp"
    OFFRAMP = "offramp"
    AUXILIARY = "auxiliary"


class GateSegmentError(ValueError):
    """Raised when a gated managed lane never reaches a downstream gate."""


@dataclass(frozen=True)
class VehicleClass:
    """A vehicle class.

    Destination classes carry ``position``: the 1-based index of the offramp
    (counted from the gate) that the class exits at. The same destination
    classes are reused in every gate segment.
    """

    id: str
    kind: ClassKind
    position: Optional[int] = None


@dataclass(frozen=True)
class FundamentalDiagram:
    """Backwards-lambda fundamental diagram.

    Units are whatever the caller uses consistently; scenario files give
    capacity in veh/h/lane, speeds in mph and jam density in veh/mi/lane.
    """

    capacity: float
    free_flow_speed: float
    congestion_wave_speed: float
    jam_density: float

    @property
    def rho_minus(self) -> float:
        """Low critical density, where the congested branch meets capacity."""
        w = self.congestion_wave_speed
        return w * self.jam_density / (self.free_flow_speed + w)

    @property
    def rho_plus(self) -> float:
        """High critical density, where the free-flow branch reaches capacity."""
        return self.capacity / self.free_flow_speed

    @property
    def is_triangular(self) -> bool:
        return math.isclose(self.rho_minus, self.rho_plus, rel_tol=1e-12)

    def for_lanes(self, lanes: float) -> FundamentalDiagram:
        return FundamentalDiagram(
            capacity=self.capacity * lanes,
            free_flow_speed=self.free_flow_speed,
            congestion_wave_speed=self.congestion_wave_speed,
            jam_density=self.jam_density * lanes,
        )

    def per_step(self, dt: float) -> FundamentalDiagram:
        """Convert hourly flows and speeds to per-step units (dt in hours)."""
        return FundamentalDiagram(
            capacity=self.capacity * dt,
            free_flow_speed=self.free_flow_speed * dt,
            congestion_wave_speed=self.congestion_wave_speed * dt,
            jam_density=self.jam_density,
        )


@dataclass(frozen=True)
class Link:
    id: str
    role: LinkRole
    lane_group: LaneGroup
    length: float  # miles
    lanes: float
    fd: FundamentalDiagram  # per lane
    friction: float = 0.0
    gp_partner: Optional[str] = None

    @property
    def group_fd(self) -> FundamentalDiagram:
        """Fundamental diagram of the whole lane group."""
        return self.fd.for_lanes(self.lanes)


@dataclass(frozen=True)
class Node:
    """A junction.

    ``restriction`` maps (input, restricting output, restricted output) to a
    coefficient in [0, 1]; missing triples fall back to ``default_restriction``
    (1 = strict FIFO). ``known_splits`` maps (input, output, class) to an
    a-priori split ratio.
    """

    id: str
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    priorities: Optional[tuple[float, ...]] = None
    default_restriction: float = 1.0
    restriction: Mapping[tuple[str, str, str], float] = field(default_factory=dict)
    is_gate: bool = False
    known_splits: Mapping[tuple[str, str, str], float] = field(default_factory=dict)

    def eta(self, i: str, restricting: str, restricted: str) -> float:
        if restricting == restricted:
            return 1.0
        return self.restriction.get((i, restricting, restricted), self.default_restriction)


@dataclass(frozen=True)
class Violation:
    subject: str
    message: str

    def __str__(self) -> str:
        return f"{self.subject}: {self.message}"


class SplitRatioSet:
    """Split ratios keyed by (node, input, output, class); ``None`` is undefined."""

    def __init__(self, entries: Optional[Mapping[tuple[str, str, str, str], Optional[float]]] = None):
        self._entries: dict[tuple[str, str, str, str], Optional[float]] = dict(entries or {})

    def __getitem__(self, key: tuple[str, str, str, str]) -> Optional[float]:
        return self._entries.get(key)

    def __setitem__(self, key: tuple[str, str, str, str], value: Optional[float]) -> None:
        self._entries[key] = value

    def __contains__(self, key: object) -> bool:
        return key in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, SplitRatioSet) and self._entries == other._entries

    def items(self):
        return self._entries.items()

    def is_defined(self, key: tuple[str, str, str, str]) -> bool:
        return self._entries.get(key) is not None

    def groups(self) -> dict[tuple[str, str, str], dict[str, Optional[float]]]:
        """Group entries by (node, input, class) -> {output: beta}."""
        out: dict[tuple[str, str, str], dict[str, Optional[float]]] = {}
        for (n, i, j, c), b in self._entries.items():
            out.setdefault((n, i, c), {})[j] = b
        return out

    def sum_violations(self, tol: float = SPLIT_SUM_TOL) -> list[Violation]:
        bad = []
        for (n, i, c), row in sorted(self.groups().items()):
            vals = list(row.values())
            if any(v is None for v in vals):
                continue
            total = math.fsum(vals)
            if abs(total - 1.0) > tol:
                bad.append(Violation(f"node {n}", f"split ratios do not sum to 1 for input {i}, class {c} (sum={total:.12g})"))
        return bad


@dataclass(frozen=True)
class DemandProfile:
    """Piecewise-constant exogenous demand per origin link and class (veh/h)."""

    interval: float  # hours
    flows: Mapping[str, Mapping[str, tuple[float, ...]]]

    def rate(self, link: str, cls: str, k: int) -> float:
        series = self.flows.get(link, {}).get(cls)
        if not series:
            return 0.0
        return series[min(k, len(series) - 1)]

    @staticmethod
    def from_totals(
        interval: float,
        totals: Mapping[str, tuple[float, ...]],
        gp_only: str,
        eligible: str,
        eligible_fraction: float = 0.15,
    ) -> DemandProfile:
        """Split total origin demand into GP-only and managed-eligible classes."""
        flows = {}
        for link, series in totals.items():
            flows[link] = {
                gp_only: tuple(q * (1.0 - eligible_fraction) for q in series),
                eligible: tuple(q * eligible_fraction for q in series),
            }
        return DemandProfile(interval=interval, flows=flows)


@dataclass(frozen=True)
class Network:
    links: tuple[Link, ...]
    nodes: tuple[Node, ...]
    classes: tuple[VehicleClass, ...]

    @cached_property
    def link_index(self) -> dict[str, int]:
        return {l.id: k for k, l in enumerate(self.links)}

    @cached_property
    def node_index(self) -> dict[str, int]:
        return {n.id: k for k, n in enumerate(self.nodes)}

    @cached_property
    def class_index(self) -> dict[str, int]:
        return {c.id: k for k, c in enumerate(self.classes)}

    def link(self, link_id: str) -> Link:
        return self.links[self.link_index[link_id]]

    def node(self, node_id: str) -> Node:
        return self.nodes[self.node_index[node_id]]

    @cached_property
    def upstream_node(self) -> dict[str, str]:
        """Link id -> id of the node the link leaves from."""
        return {j: n.id for n in self.nodes for j in n.outputs}

    @cached_property
    def downstream_node(self) -> dict[str, str]:
        """Link id -> id of the node the link ends at."""
        return {i: n.id for n in self.nodes for i in n.inputs}

    def classes_of(self, kind: ClassKind) -> list[VehicleClass]:
        return [c for c in self.classes if c.kind == kind]

    @property
    def is_gated(self) -> bool:
        return any(n.is_gate for n in self.nodes)

    def priorities(self, node: Node) -> tuple[float, ...]:
        """Node priorities, defaulting to shares of input lane-group capacity."""
        if node.priorities is not None:
            return tuple(node.priorities)
        caps = [self.link(i).group_fd.capacity for i in node.inputs]
        total = sum(caps)
        return tuple(c / total for c in caps)


def _check_fd(subject: str, fd: FundamentalDiagram) -> list[Violation]:
    out = []
    for name in ("capacity", "free_flow_speed", "congestion_wave_speed", "jam_density"):
        v = getattr(fd, name)
        if not (v > 0 and math.isfinite(v)):
            out.append(Violation(subject, f"{name} must be positive (got {v})"))
    if out:
        return out
    # backwards lambda needs rho- <= rho+; equality (to rounding) is triangular
    if fd.rho_minus > fd.rho_plus * (1 + 1e-12):
        out.append(Violation(subject, f"low critical density {fd.rho_minus:.6g} exceeds high critical density {fd.rho_plus:.6g}"))
    if fd.rho_plus >= fd.jam_density:
        out.append(Violation(subject, "high critical density must be below jam density"))
    return out


def validate_network(network: Network) -> list[Violation]:
    """Check the structural invariants of a network; an empty list means valid."""
    v: list[Violation] = []
    links = network.link_index
    classes = network.class_index

    if len(network.classes) == 0:
        v.append(Violation("classes", "at least one vehicle class is required"))
    if len(classes) != len(network.classes):
        v.append(Violation("classes", "duplicate class ids"))
    n_elig = len(network.classes_of(ClassKind.ELIGIBLE))
    if n_elig != 1:
        v.append(Violation("classes", f"exactly one managed-eligible class is required (found {n_elig})"))
    positions = sorted(c.position or 0 for c in network.classes_of(ClassKind.DESTINATION))
    if positions != list(range(1, len(positions) + 1)):
        v.append(Violation("classes", f"destination class positions must be 1..K (got {positions})"))

    if len(links) != len(network.links):
        v.append(Violation("links", "duplicate link ids"))
    if len(network.node_index) != len(network.nodes):
        v.append(Violation("nodes", "duplicate node ids"))

    as_input: dict[str, int] = {}
    as_output: dict[str, int] = {}
    for n in network.nodes:
        subject = f"node {n.id}"
        if len(n.inputs) == 0:
            v.append(Violation(subject, "node without incoming link"))
        if len(n.outputs) == 0:
            v.append(Violation(subject, "node without outgoing link"))
        for lid in (*n.inputs, *n.outputs):
            if lid not in links:
                v.append(Violation(subject, f"references unknown link {lid}"))
        for lid in n.inputs:
            as_input[lid] = as_input.get(lid, 0) + 1
        for lid in n.outputs:
            as_output[lid] = as_output.get(lid, 0) + 1

        if n.priorities is not None:
            p = n.priorities
            if len(p) != len(n.inputs):
                v.append(Violation(subject, "one priority per input link is required"))
            elif any(x < 0 for x in p):
                v.append(Violation(subject, "priorities must be non-negative"))
            elif abs(math.fsum(p) - 1.0) > SPLIT_SUM_TOL:
                v.append(Violation(subject, f"priorities must sum to 1 (sum={math.fsum(p):.12g})"))
        etas = [n.default_restriction, *n.restriction.values()]
        if any(not (0.0 <= e <= 1.0) for e in etas):
            v.append(Violation(subject, "restriction coefficients must lie in [0, 1]"))
        for (i, j1, j2) in n.restriction:
            if i not in n.inputs or j1 not in n.outputs or j2 not in n.outputs:
                v.append(Violation(subject, f"restriction key ({i}, {j1}, {j2}) does not match node links"))

        rows: dict[tuple[str, str], list[float]] = {}
        for (i, j, c), b in n.known_splits.items():
            if i not in n.inputs or j not in n.outputs or c not in classes:
                v.append(Violation(subject, f"split ratio key ({i}, {j}, {c}) does not match node links/classes"))
                continue
            if not (0.0 <= b <= 1.0):
                v.append(Violation(subject, f"split ratio ({i}, {j}, {c}) = {b} outside [0, 1]"))
            rows.setdefault((i, c), []).append(b)
        for (i, c), vals in sorted(rows.items()):
            total = math.fsum(vals)
            if len(vals) == len(n.outputs) and abs(total - 1.0) > SPLIT_SUM_TOL:
                v.append(Violation(subject, f"split ratios do not sum to 1 for input {i}, class {c} (sum={total:.12g})"))
            elif total > 1.0 + SPLIT_SUM_TOL:
                v.append(Violation(subject, f"split ratios exceed 1 for input {i}, class {c} (sum={total:.12g})"))

        n_off = sum(1 for j in n.outputs if j in links and network.link(j).lane_group == LaneGroup.OFFRAMP)
        if n_off > 1:
            v.append(Violation(subject, "at most one offramp output per node is supported"))

    for l in network.links:
        subject = f"link {l.id}"
        if not (l.length > 0):
            v.append(Violation(subject, "length must be positive"))
        if not (l.lanes > 0):
            v.append(Violation(subject, "lane count must be positive"))
        v.extend(_check_fd(subject, l.fd))
        if as_input.get(l.id, 0) > 1 or as_output.get(l.id, 0) > 1:
            v.append(Violation(subject, "link attached to more than one upstream or downstream node"))
        has_up = l.id in as_output
        has_down = l.id in as_input
        if l.role == LinkRole.ORIGIN and (has_up or not has_down):
            v.append(Violation(subject, "origin links must have only an ending node"))
        if l.role == LinkRole.DESTINATION and (has_down or not has_up):
            v.append(Violation(subject, "destination links must have only a beginning node"))
        if l.role == LinkRole.ORDINARY and not (has_up and has_down):
            v.append(Violation(subject, "ordinary links must have both a beginning and an ending node"))
        if not (0.0 <= l.friction <= 1.0):
            v.append(Violation(subject, "friction coefficient must lie in [0, 1]"))
        if l.lane_group != LaneGroup.MANAGED and l.friction != 0.0:
            v.append(Violation(subject, "friction coefficient must be 0 on non-managed links"))
        if l.gp_partner is not None:
            if l.gp_partner not in links:
                v.append(Violation(subject, f"gp_partner {l.gp_partner} does not exist"))
            else:
                up, down = network.upstream_node, network.downstream_node
                if (up.get(l.id), down.get(l.id)) != (up.get(l.gp_partner), down.get(l.gp_partner)):
                    v.append(Violation(subject, f"gp_partner {l.gp_partner} is not parallel (different end nodes)"))

    if network.is_gated and not v:
        try:
            segments = gate_segments(network)
        except GateSegmentError as exc:
            v.append(Violation("gates", str(exc)))
        else:
            need = max((len(s) for s in segments.values()), default=0)
            have = len(network.classes_of(ClassKind.DESTINATION))
            if have < need:
                v.append(Violation("classes", f"{need} destination classes required by gate segments, {have} defined"))
    return v


def lint_network(network: Network) -> list[str]:
    """Advisory warnings that do not invalidate a network."""
    out = []
    for l in network.links:
        if l.friction > FRICTION_GUIDANCE_MAX:
            out.append(f"link {l.id}: friction coefficient {l.friction} exceeds the suggested maximum {FRICTION_GUIDANCE_MAX}")
        if l.lane_group == LaneGroup.MANAGED and l.friction > 0 and l.gp_partner is None:
            out.append(f"link {l.id}: friction coefficient set but no gp_partner; friction is inactive")
    return out


def check_cfl(network: Network, dt: float) -> list[Violation]:
    """Flag non-origin links a wave can cross within one step (dt in hours)."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    out = []
    for l in network.links:
        if l.role == LinkRole.ORIGIN:
            continue
        if l.fd.free_flow_speed * dt > l.length:
            out.append(Violation(f"link {l.id}", f"CFL: free-flow distance {l.fd.free_flow_speed * dt:.6g} mi per step exceeds length {l.length:.6g} mi"))
        if l.fd.congestion_wave_speed * dt > l.length:
            out.append(Violation(f"link {l.id}", f"CFL: congestion wave distance {l.fd.congestion_wave_speed * dt:.6g} mi per step exceeds length {l.length:.6g} mi"))
    return out


def _output_of_group(network: Network, node: Node, groups: tuple[LaneGroup, ...]) -> Optional[str]:
    for j in node.outputs:
        if network.link(j).lane_group in groups:
            return j
    return None


def gate_segments(network: Network) -> dict[str, list[str]]:
    """Map each gate that feeds a managed link to the offramps before the next gate.

    The GP mainline is walked downstream from the gate; offramps leaving the
    gate node itself belong to that gate's segment.
    """
    segments: dict[str, list[str]] = {}
    down = network.downstream_node
    for g in network.nodes:
        if not g.is_gate:
            continue
        ml = _output_of_group(network, g, (LaneGroup.MANAGED,))
        if ml is None:
            continue
        # the managed lane must reach another gate
        seen = set()
        node_id = down.get(ml)
        while node_id is not None and not network.node(node_id).is_gate:
            if node_id in seen:
                raise GateSegmentError(f"unterminated gate segment after gate {g.id} (cycle)")
            seen.add(node_id)
            nxt = _output_of_group(network, network.node(node_id), (LaneGroup.MANAGED,))
            node_id = down.get(nxt) if nxt is not None else None
        if node_id is None:
            raise GateSegmentError(f"unterminated gate segment after gate {g.id}")
        next_gate = node_id

        offramps: list[str] = []
        node = g
        visited = set()
        while True:
            offramps.extend(j for j in node.outputs if network.link(j).lane_group == LaneGroup.OFFRAMP)
            visited.add(node.id)
            gp = _output_of_group(network, node, (LaneGroup.GP, LaneGroup.AUXILIARY))
            nxt = down.get(gp) if gp is not None else None
            if nxt is None or nxt == next_gate or nxt in visited:
                break
            node = network.node(nxt)
        segments[g.id] = offramps

    owner: dict[str, str] = {}
    for gid, offs in segments.items():
        for o in offs:
            if o in owner:
                raise GateSegmentError(f"offramp {o} reachable from gates {owner[o]} and {gid}")
            owner[o] = gid
    return segments
