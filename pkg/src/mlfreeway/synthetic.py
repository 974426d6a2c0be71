"""Synthetic managed lane corridors used by tests, benchmarks and the examples.

Corridor layout: an origin feeds node ``n0``; section ``s`` consists of GP link
``gp{s}`` and (optionally) a parallel managed link ``ml{s}`` between nodes
``n{s}`` and ``n{s+1}``. Onramps (``on{s}``) and offramps (``off{s}``) attach at
interior nodes. Everything drains into the destination link ``sink``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .network import (
    ClassKind,
    DemandProfile,
    FundamentalDiagram,
    LaneGroup,
    Link,
    LinkRole,
    Network,
    Node,
    VehicleClass,
)

GP_FD = FundamentalDiagram(capacity=1900.0, free_flow_speed=65.0, congestion_wave_speed=12.0, jam_density=180.0)
ML_FD = FundamentalDiagram(capacity=1800.0, free_flow_speed=65.0, congestion_wave_speed=10.0, jam_density=180.0)
RAMP_FD = FundamentalDiagram(capacity=1500.0, free_flow_speed=40.0, congestion_wave_speed=10.0, jam_density=180.0)

LOV, HOV = "lov", "hov"


@dataclass
class Corridor:
    network: Network
    demands: DemandProfile
    offramp_splits: dict[str, np.ndarray]


def build_corridor(
    sections: int,
    *,
    managed: bool = True,
    gates: Sequence[int] = (),
    onramps: Sequence[int] = (),
    offramps: Sequence[int] = (),
    gp_lanes: Sequence[float] | float = 3,
    ml_lanes: float = 1,
    length: float = 0.5,
    friction: float = 0.2,
    n_destination: Optional[int] = None,
    restriction: float = 1.0,
) -> Network:
    """Build a corridor network.

    ``gates`` lists node indices that are managed lane access gates; with gates
    the lane change between GP and managed lanes is blocked at all other nodes
    and destination classes are added (one per offramp of the longest segment,
    unless ``n_destination`` is given).
    """
    if sections < 1:
        raise ValueError("a corridor needs at least one section")
    lanes = list(gp_lanes) if isinstance(gp_lanes, Sequence) else [gp_lanes] * sections
    gated = len(gates) > 0
    links: list[Link] = [Link("src", LinkRole.ORIGIN, LaneGroup.GP, length, lanes[0], GP_FD)]
    for s in range(sections):
        links.append(Link(f"gp{s}", LinkRole.ORDINARY, LaneGroup.GP, length, lanes[s], GP_FD))
        if managed:
            links.append(Link(f"ml{s}", LinkRole.ORDINARY, LaneGroup.MANAGED, length, ml_lanes, ML_FD,
                              friction=friction, gp_partner=f"gp{s}"))
    for s in onramps:
        links.append(Link(f"on{s}", LinkRole.ORIGIN, LaneGroup.ONRAMP, 0.25, 1, RAMP_FD))
    for s in offramps:
        links.append(Link(f"off{s}", LinkRole.DESTINATION, LaneGroup.OFFRAMP, 0.25, 1, RAMP_FD))
    links.append(Link("sink", LinkRole.DESTINATION, LaneGroup.GP, length, lanes[-1], GP_FD))

    nodes = []
    for s in range(sections + 1):
        ins = ["src"] if s == 0 else [f"gp{s - 1}"] + ([f"ml{s - 1}"] if managed else [])
        if s in onramps:
            ins.append(f"on{s}")
        outs = ["sink"] if s == sections else [f"gp{s}"] + ([f"ml{s}"] if managed else [])
        if s in offramps:
            outs.append(f"off{s}")
        nodes.append(Node(f"n{s}", tuple(ins), tuple(outs), default_restriction=restriction,
                          is_gate=s in gates))

    classes = [VehicleClass(LOV, ClassKind.GP_ONLY), VehicleClass(HOV, ClassKind.ELIGIBLE)]
    if gated:
        if n_destination is None:
            n_destination = _longest_segment(sections, gates, offramps)
        classes += [VehicleClass(f"d{p}", ClassKind.DESTINATION, position=p) for p in range(1, n_destination + 1)]
        # no lane changes between gates
        for k, node in enumerate(nodes):
            if node.is_gate or not (0 < k < sections) or not managed:
                continue
            known = {}
            for c in classes:
                known[(f"gp{k - 1}", f"ml{k}", c.id)] = 0.0
                known[(f"ml{k - 1}", f"gp{k}", c.id)] = 0.0
            nodes[k] = replace(node, known_splits=known)
    return Network(links=tuple(links), nodes=tuple(nodes), classes=tuple(classes))


def _longest_segment(sections: int, gates: Sequence[int], offramps: Sequence[int]) -> int:
    marks = sorted(gates)
    best = 0
    for a, b in zip(marks, marks[1:]):
        best = max(best, sum(1 for o in offramps if a <= o < b))
    return max(best, 1)


def daily_profile(n_intervals: int, base: float, peak: float, center: float = 0.5, width: float = 0.12) -> np.ndarray:
    """Smooth one-peak demand series (veh/h) over a day of ``n_intervals``."""
    x = (np.arange(n_intervals) + 0.5) / n_intervals
    return base + (peak - base) * np.exp(-0.5 * ((x - center) / width) ** 2)


def calibration_corridor(n_intervals: int = 288, interval_hours: float = 1 / 12) -> Corridor:
    """Ten-link full-access corridor with two offramps and a midday bottleneck.

    The last GP section drops a lane, so midday demand queues back through
    both offramp nodes. Offramp split ratios vary smoothly over the day.
    """
    net = build_corridor(3, offramps=(1, 2), gp_lanes=(4, 4, 3), length=0.5, friction=0.2)
    total = daily_profile(n_intervals, 3000.0, 7600.0)
    demands = DemandProfile.from_totals(interval_hours, {"src": tuple(total)}, LOV, HOV)
    x = (np.arange(n_intervals) + 0.5) / n_intervals
    splits = {
        "off1": 0.08 + 0.06 * np.sin(2 * np.pi * x) ** 2,
        "off2": 0.12 + 0.05 * np.cos(3 * np.pi * x),
    }
    return Corridor(net, demands, splits)


def random_corridor(rng: np.random.Generator, n_intervals: int, interval_hours: float = 1 / 12,
                    max_links: int = 30, max_classes: int = 7) -> Corridor:
    """A random valid corridor: full access, gated, or GP only.

    Demands are random daily profiles, lane counts and friction random;
    sizes stay within ``max_links`` and ``max_classes``.
    """
    kind = rng.choice(["gp", "full", "gated"], p=[0.2, 0.45, 0.35])
    managed = kind != "gp"
    while True:
        sections = int(rng.integers(2, 9))
        interior = list(range(1, sections))
        offs = sorted(int(s) for s in interior if rng.random() < 0.6)
        ons = sorted(int(s) for s in interior if rng.random() < 0.5)
        gates: list[int] = []
        if kind == "gated":
            gates = sorted({0, sections} | {int(s) for s in interior if rng.random() < 0.3})
        n_links = 2 + sections * (2 if managed else 1) + len(offs) + len(ons)
        n_dest = _longest_segment(sections, gates, offs) if gates else 0
        if n_links <= max_links and 2 + n_dest <= max_classes:
            break
    lanes = [float(rng.integers(2, 5)) for _ in range(sections)]
    net = build_corridor(
        sections, managed=managed, gates=gates, onramps=ons, offramps=offs, gp_lanes=lanes,
        length=float(rng.uniform(0.2, 0.8)), friction=float(rng.choice([0.0, rng.uniform(0, 0.4)])),
        restriction=float(rng.choice([1.0, 0.0, rng.uniform()])),
    )
    frac = float(rng.uniform(0.05, 0.3))
    totals = {"src": tuple(daily_profile(n_intervals, rng.uniform(500, 2000) * lanes[0] / 3,
                                         rng.uniform(1500, 2400) * lanes[0], rng.uniform(0.3, 0.7)))}
    for s in ons:
        totals[f"on{s}"] = tuple(daily_profile(n_intervals, rng.uniform(100, 400), rng.uniform(400, 1400),
                                               rng.uniform(0.3, 0.7)))
    demands = DemandProfile.from_totals(interval_hours, totals, LOV, HOV, eligible_fraction=frac)
    splits = {f"off{s}": rng.uniform(0.02, 0.3, size=n_intervals) for s in offs}
    return Corridor(net, demands, splits)
