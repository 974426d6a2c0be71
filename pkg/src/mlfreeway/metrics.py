"""Corridor performance metrics: VMT, VHT and delay by lane group.

Per link and step, with density rho (veh/mi), length L, step dt (h) and
speed v (mph)::

    VHT   += rho * L * dt
    VMT   += v * rho * L * dt
    delay += rho * L * dt * (1 - v / threshold)     when v < threshold

Mainline links only: GP and auxiliary links count as GP, managed links as
ML. Ramps and origin queues are excluded.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .network import LaneGroup, LinkRole, Network
from .simulation import SimOutput

DELAY_THRESHOLD_MPH = 45.0
GP_GROUPS = (LaneGroup.GP, LaneGroup.AUXILIARY)


@dataclass(frozen=True)
class MetricRow:
    vmt: float
    vht: float
    delay: float

    def __add__(self, other: MetricRow) -> MetricRow:
        return MetricRow(self.vmt + other.vmt, self.vht + other.vht, self.delay + other.delay)


@dataclass(frozen=True)
class MetricsSummary:
    gp: MetricRow
    managed: MetricRow
    threshold: float = DELAY_THRESHOLD_MPH

    @property
    def total(self) -> MetricRow:
        return self.gp + self.managed

    def rows(self) -> list[tuple[str, float, float, float]]:
        out = []
        for name, row in (("GP", self.gp), ("ML", self.managed), ("Total", self.total)):
            out.append((name, row.vmt, row.vht, row.delay))
        return out

    def table(self) -> str:
        """Plain-text table: one row per lane group plus the total."""
        lines = [f"{'':<6}{'VMT (veh-mi)':>16}{'VHT (veh-h)':>16}{'Delay (veh-h)':>16}"]
        for name, vmt, vht, delay in self.rows():
            lines.append(f"{name:<6}{vmt:>16.1f}{vht:>16.1f}{delay:>16.1f}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        lines = ["lane_group,vmt,vht,delay"]
        for name, vmt, vht, delay in self.rows():
            lines.append(f"{name},{vmt!r},{vht!r},{delay!r}")
        return "\n".join(lines) + "\n"


def link_contribution(density, length: float, dt: float, speed, threshold: float = DELAY_THRESHOLD_MPH) -> MetricRow:
    """Metrics of one link over a series of steps (arrays broadcast)."""
    rho = np.asarray(density, dtype=float)
    v = np.asarray(speed, dtype=float)
    veh_hours = rho * length * dt
    delay = np.where(v < threshold, veh_hours * (1.0 - v / threshold), 0.0)
    return MetricRow(float(np.sum(v * veh_hours)), float(np.sum(veh_hours)), float(np.sum(delay)))


def metric_groups(network: Network) -> dict[str, tuple[str, float]]:
    """Link id -> ('gp' or 'managed', length) for links counted in the metrics."""
    out = {}
    for l in network.links:
        group = _group(l.role, l.lane_group)
        if group is not None:
            out[l.id] = (group, l.length)
    return out


def _group(role: LinkRole, lane_group: LaneGroup) -> Optional[str]:
    if role == LinkRole.ORIGIN:
        return None
    if lane_group in GP_GROUPS:
        return "gp"
    if lane_group == LaneGroup.MANAGED:
        return "managed"
    return None


def compute_metrics(output: SimOutput, network: Network, threshold: float = DELAY_THRESHOLD_MPH,
                    start: int = 0, stop: Optional[int] = None) -> MetricsSummary:
    """Metrics over steps [start, stop) of a run (densities at the step start)."""
    return metrics_for_links(output, metric_groups(network), threshold, start, stop)


def metrics_for_links(output: SimOutput, groups: dict[str, tuple[str, float]],
                      threshold: float = DELAY_THRESHOLD_MPH, start: int = 0,
                      stop: Optional[int] = None) -> MetricsSummary:
    stop = output.horizon if stop is None else stop
    acc = {"gp": MetricRow(0.0, 0.0, 0.0), "managed": MetricRow(0.0, 0.0, 0.0)}
    for lid in sorted(groups):
        group, length = groups[lid]
        k = output.link_ids.index(lid)
        rho = output.density[start:stop, k, :].sum(axis=1)
        acc[group] = acc[group] + link_contribution(rho, length, output.dt, output.speed[start:stop, k], threshold)
    return MetricsSummary(acc["gp"], acc["managed"], threshold)


def metrics_from_results(output: SimOutput, links: dict[str, dict], threshold: float = DELAY_THRESHOLD_MPH) -> MetricsSummary:
    """Metrics from tables written by the exporter (see ``export.read_results``)."""
    groups = {}
    for lid, row in links.items():
        group = _group(LinkRole(row["role"]), LaneGroup(row["lane_group"]))
        if group is not None:
            groups[lid] = (group, float(row["length"]))
    return metrics_for_links(output, groups, threshold)
