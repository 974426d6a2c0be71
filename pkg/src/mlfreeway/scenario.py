"""Scenario and calibration-target files.

Scenarios are YAML (JSON also parses). Flows are veh/h, speeds mph, lengths
miles and densities veh/mi per lane; the loader checks the schema, the
network and the CFL condition, and reports problems with the file and field.

Example::

    dt_seconds: 5
    horizon: 720            # steps (or duration_hours)
    interval_minutes: 5
    classes:
      - {id: lov, kind: gp_only}
      - {id: hov, kind: eligible}
    links:
      - id: src
        role: origin
        lane_group: gp
        length: 0.5
        lanes: 3
        fd: {capacity: 1900, free_flow_speed: 65, congestion_wave_speed: 12, jam_density: 180}
    nodes:
      - {id: n0, inputs: [src], outputs: [gp0, ml0]}
    demands:
      eligible_fraction: 0.15
      totals: {src: [4000, 4200]}
    offramp_splits: {off1: [0.1, 0.12]}
"""

from __future__ import annotations

import json
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

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
    check_cfl,
    lint_network,
    validate_network,
)
from .simulation import Model, SimConfig, compile_model

FD_FIELDS = ("capacity", "free_flow_speed", "congestion_wave_speed", "jam_density")


class ScenarioError(ValueError):
    """A scenario or target file that cannot be used, with the offending field."""

    def __init__(self, path: str, where: str, message: str):
        super().__init__(f"{path}: {where}: {message}")
        self.path = path
        self.where = where


@dataclass(frozen=True)
class Scenario:
    network: Network
    demands: DemandProfile
    config: SimConfig
    offramp_splits: Mapping[str, tuple[float, ...]] = field(default_factory=dict)
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def model(self, validate: bool = True) -> Model:
        """Compile to per-step arrays (flows per step, speeds in miles per step)."""
        return compile_model(self.network, self.config, self.demands, self.offramp_splits, validate=validate)


class _Reader:
    def __init__(self, path: str):
        self.path = path

    def fail(self, where: str, message: str):
        raise ScenarioError(self.path, where, message)

    def get(self, rec: Mapping, key: str, where: str, kind=None, default: Any = ...):
        if not isinstance(rec, Mapping):
            self.fail(where, "expected a mapping")
        if key not in rec or rec[key] is None:
            if default is ...:
                self.fail(f"{where}.{key}", "missing required field")
            return default
        val = rec[key]
        if kind is float:
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                self.fail(f"{where}.{key}", f"expected a number, got {val!r}")
            val = float(val)
            if not np.isfinite(val):
                self.fail(f"{where}.{key}", "must be finite")
        elif kind is int:
            if isinstance(val, bool) or not isinstance(val, int):
                self.fail(f"{where}.{key}", f"expected an integer, got {val!r}")
        elif kind is str:
            val = str(val)
        elif kind is bool:
            if not isinstance(val, bool):
                self.fail(f"{where}.{key}", f"expected true/false, got {val!r}")
        elif kind is list:
            if not isinstance(val, list):
                self.fail(f"{where}.{key}", "expected a list")
        elif kind is dict:
            if not isinstance(val, Mapping):
                self.fail(f"{where}.{key}", "expected a mapping")
        return val

    def positive(self, rec, key, where, default: Any = ...):
        val = self.get(rec, key, where, float, default)
        if val is not None and not val > 0:
            self.fail(f"{where}.{key}", f"must be positive, got {val}")
        return val

    def enum(self, rec, key, where, enum, default: Any = ...):
        val = self.get(rec, key, where, str, default)
        try:
            return enum(val)
        except ValueError:
            options = ", ".join(e.value for e in enum)
            self.fail(f"{where}.{key}", f"unknown value {val!r} (expected one of {options})")

    def series(self, val, where: str) -> tuple[float, ...]:
        vals = val if isinstance(val, list) else [val]
        out = []
        for k, x in enumerate(vals):
            if isinstance(x, bool) or not isinstance(x, (int, float)) or not np.isfinite(x):
                self.fail(f"{where}[{k}]", f"expected a number, got {x!r}")
            if x < 0:
                self.fail(f"{where}[{k}]", f"must be non-negative, got {x}")
            out.append(float(x))
        if not out:
            self.fail(where, "empty series")
        return tuple(out)


def _read_file(path: Path) -> Any:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(str(path), "file", exc.strerror or str(exc)) from exc
    try:
        if path.suffix.lower() == ".json":
            return json.loads(text)
        return yaml.safe_load(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ScenarioError(str(path), "file", f"not well-formed: {exc}") from exc


def parse_scenario(data: Mapping, path: str = "<scenario>", validate: bool = True) -> Scenario:
    r = _Reader(path)
    if not isinstance(data, Mapping):
        r.fail("<root>", "expected a mapping")
    dt_seconds = r.positive(data, "dt_seconds", "scenario")
    interval = r.positive(data, "interval_minutes", "scenario", default=5.0)
    ratio = interval * 60.0 / dt_seconds
    if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
        r.fail("scenario.interval_minutes", f"{interval} min is not an integer multiple of dt ({dt_seconds} s)")
    if "horizon" in data:
        horizon = r.get(data, "horizon", "scenario", int)
    else:
        hours = r.positive(data, "duration_hours", "scenario")
        horizon = int(round(hours * 3600.0 / dt_seconds))
    if horizon < 0:
        r.fail("scenario.horizon", "must be non-negative")

    classes = []
    for k, rec in enumerate(r.get(data, "classes", "scenario", list)):
        where = f"classes[{k}]"
        kind = r.enum(rec, "kind", where, ClassKind)
        pos = r.get(rec, "position", where, int, None) if kind == ClassKind.DESTINATION else None
        if kind == ClassKind.DESTINATION and pos is None:
            r.fail(f"{where}.position", "missing required field")
        classes.append(VehicleClass(r.get(rec, "id", where, str), kind, pos))

    links = []
    for k, rec in enumerate(r.get(data, "links", "scenario", list)):
        where = f"links[{k}]"
        lid = r.get(rec, "id", where, str)
        where = f"links[{lid}]"
        fd_rec = r.get(rec, "fd", where, dict)
        fd = FundamentalDiagram(*(r.positive(fd_rec, name, f"{where}.fd") for name in FD_FIELDS))
        links.append(Link(
            id=lid,
            role=r.enum(rec, "role", where, LinkRole, "ordinary"),
            lane_group=r.enum(rec, "lane_group", where, LaneGroup),
            length=r.positive(rec, "length", where),
            lanes=r.positive(rec, "lanes", where),
            fd=fd,
            friction=r.get(rec, "friction", where, float, 0.0),
            gp_partner=r.get(rec, "gp_partner", where, str, None),
        ))

    nodes = []
    for k, rec in enumerate(r.get(data, "nodes", "scenario", list)):
        where = f"nodes[{k}]"
        nid = r.get(rec, "id", where, str)
        where = f"nodes[{nid}]"
        pr = r.get(rec, "priorities", where, list, None)
        restriction = {}
        for m, item in enumerate(r.get(rec, "restriction_overrides", where, list, [])):
            w2 = f"{where}.restriction_overrides[{m}]"
            restriction[(r.get(item, "input", w2, str), r.get(item, "restricting", w2, str),
                         r.get(item, "restricted", w2, str))] = r.get(item, "value", w2, float)
        known = {}
        for m, item in enumerate(r.get(rec, "known_splits", where, list, [])):
            w2 = f"{where}.known_splits[{m}]"
            known[(r.get(item, "input", w2, str), r.get(item, "output", w2, str),
                   r.get(item, "class", w2, str))] = r.get(item, "value", w2, float)
        nodes.append(Node(
            id=nid,
            inputs=tuple(str(x) for x in r.get(rec, "inputs", where, list)),
            outputs=tuple(str(x) for x in r.get(rec, "outputs", where, list)),
            priorities=tuple(float(x) for x in pr) if pr is not None else None,
            default_restriction=r.get(rec, "restriction", where, float, 1.0),
            restriction=restriction,
            is_gate=r.get(rec, "gate", where, bool, False),
            known_splits=known,
        ))

    network = Network(tuple(links), tuple(nodes), tuple(classes))
    if validate:
        problems = validate_network(network)
        if problems:
            r.fail("network", "; ".join(map(str, problems)))
        cfl = check_cfl(network, dt_seconds / 3600.0)
        if cfl:
            r.fail("dt_seconds", "; ".join(map(str, cfl)))

    dem = r.get(data, "demands", "scenario", dict, {})
    flows: dict[str, dict[str, tuple[float, ...]]] = {}
    class_ids = {c.id for c in classes}
    if "totals" in dem:
        frac = r.get(dem, "eligible_fraction", "demands", float, 0.15)
        if not 0.0 <= frac <= 1.0:
            r.fail("demands.eligible_fraction", f"must lie in [0, 1], got {frac}")
        gp = [c.id for c in classes if c.kind == ClassKind.GP_ONLY]
        el = [c.id for c in classes if c.kind == ClassKind.ELIGIBLE]
        if not gp or not el:
            r.fail("demands.totals", "needs one gp_only and one eligible class to split totals")
        for lid, series in r.get(dem, "totals", "demands", dict).items():
            s = r.series(series, f"demands.totals.{lid}")
            flows.setdefault(str(lid), {})[gp[0]] = tuple(q * (1.0 - frac) for q in s)
            flows[str(lid)][el[0]] = tuple(q * frac for q in s)
    for lid, by_cls in r.get(dem, "by_class", "demands", dict, {}).items():
        if not isinstance(by_cls, Mapping):
            r.fail(f"demands.by_class.{lid}", "expected a mapping of class to series")
        for cid, series in by_cls.items():
            if str(cid) not in class_ids:
                r.fail(f"demands.by_class.{lid}.{cid}", "unknown class")
            flows.setdefault(str(lid), {})[str(cid)] = r.series(series, f"demands.by_class.{lid}.{cid}")
    ids = {l.id: l for l in links}
    for lid in flows:
        if lid not in ids or ids[lid].role != LinkRole.ORIGIN:
            r.fail(f"demands.{lid}", "demand must be attached to an origin link")
    demands = DemandProfile(interval=interval / 60.0, flows=flows)

    splits = {}
    for lid, series in r.get(data, "offramp_splits", "scenario", dict, {}).items():
        s = r.series(series, f"offramp_splits.{lid}")
        if any(x > 1 for x in s):
            r.fail(f"offramp_splits.{lid}", "split ratios must lie in [0, 1]")
        if lid not in ids or ids[lid].lane_group != LaneGroup.OFFRAMP:
            r.fail(f"offramp_splits.{lid}", "not an offramp link")
        splits[str(lid)] = s

    init = {}
    for lid, by_cls in r.get(data, "initial_density", "scenario", dict, {}).items():
        if lid not in ids:
            r.fail(f"initial_density.{lid}", "unknown link")
        init[str(lid)] = {}
        for cid, val in by_cls.items():
            if str(cid) not in class_ids:
                r.fail(f"initial_density.{lid}.{cid}", "unknown class")
            init[str(lid)][str(cid)] = r.series(val, f"initial_density.{lid}.{cid}")[0]
    shares = {}
    for gid, by_pos in r.get(data, "gate_shares", "scenario", dict, {}).items():
        if not isinstance(by_pos, Mapping):
            r.fail(f"gate_shares.{gid}", "expected a mapping of destination position to share")
        shares[str(gid)] = {}
        for pos, val in by_pos.items():
            share = r.series(val, f"gate_shares.{gid}.{pos}")[0]
            if share > 1:
                r.fail(f"gate_shares.{gid}.{pos}", "shares must lie in [0, 1]")
            shares[str(gid)][int(pos)] = share

    config = SimConfig(
        dt_seconds=dt_seconds, horizon=horizon, interval_minutes=interval,
        initial_density=init, enable_friction=r.get(data, "enable_friction", "scenario", bool, True),
        gate_shares=shares,
    )
    return Scenario(network, demands, config, splits, tuple(lint_network(network)))


def load_scenario(path: str | Path, validate: bool = True) -> Scenario:
    path = Path(path)
    return parse_scenario(_read_file(path), str(path), validate)


def scenario_to_dict(sc: Scenario) -> dict:
    """Normalized plain-data form; demands are written per class."""
    cfg = sc.config
    out: dict[str, Any] = {
        "dt_seconds": float(cfg.dt_seconds),
        "horizon": cfg.horizon,
        "interval_minutes": float(cfg.interval_minutes),
        "enable_friction": cfg.enable_friction,
        "classes": [],
        "links": [],
        "nodes": [],
    }
    for c in sc.network.classes:
        rec: dict[str, Any] = {"id": c.id, "kind": c.kind.value}
        if c.position is not None:
            rec["position"] = c.position
        out["classes"].append(rec)
    for l in sc.network.links:
        rec = {"id": l.id, "role": l.role.value, "lane_group": l.lane_group.value, "length": float(l.length),
               "lanes": float(l.lanes), "fd": {name: float(getattr(l.fd, name)) for name in FD_FIELDS}}
        if l.friction:
            rec["friction"] = float(l.friction)
        if l.gp_partner is not None:
            rec["gp_partner"] = l.gp_partner
        out["links"].append(rec)
    for n in sc.network.nodes:
        rec = {"id": n.id, "inputs": list(n.inputs), "outputs": list(n.outputs)}
        if n.priorities is not None:
            rec["priorities"] = [float(x) for x in n.priorities]
        if n.default_restriction != 1.0:
            rec["restriction"] = float(n.default_restriction)
        if n.restriction:
            rec["restriction_overrides"] = [
                {"input": i, "restricting": a, "restricted": b, "value": float(v)}
                for (i, a, b), v in n.restriction.items()]
        if n.is_gate:
            rec["gate"] = True
        if n.known_splits:
            rec["known_splits"] = [
                {"input": i, "output": j, "class": c, "value": float(v)} for (i, j, c), v in n.known_splits.items()]
        out["nodes"].append(rec)
    out["demands"] = {"by_class": {lid: {cid: [float(x) for x in s] for cid, s in by.items()}
                                   for lid, by in sc.demands.flows.items()}}
    if sc.offramp_splits:
        out["offramp_splits"] = {lid: [float(x) for x in s] for lid, s in sc.offramp_splits.items()}
    if cfg.initial_density:
        out["initial_density"] = {lid: {c: float(v) for c, v in by.items()} for lid, by in cfg.initial_density.items()}
    if cfg.gate_shares:
        out["gate_shares"] = {gid: {int(p): float(v) for p, v in by.items()} for gid, by in cfg.gate_shares.items()}
    return out


def save_scenario(sc: Scenario, path: str | Path) -> None:
    path = Path(path)
    data = scenario_to_dict(sc)
    if path.suffix.lower() == ".json":
        text = json.dumps(data, indent=2) + "\n"
    else:
        text = yaml.safe_dump(data, sort_keys=False, default_flow_style=None, width=100)
    path.write_text(text, encoding="utf-8", newline="\n")


def load_targets(path: str | Path, interval_minutes: Optional[float] = None) -> dict[str, tuple[float, ...]]:
    """Offramp flow targets (veh/h per interval).

    The file holds ``interval_minutes`` and ``targets: {offramp: [...]}``; when
    ``interval_minutes`` is passed it must match the file.
    """
    path = Path(path)
    data = _read_file(path)
    r = _Reader(str(path))
    if not isinstance(data, Mapping):
        r.fail("<root>", "expected a mapping")
    interval = r.positive(data, "interval_minutes", "targets file", default=5.0)
    if interval_minutes is not None and abs(interval - interval_minutes) > 1e-9:
        r.fail("interval_minutes", f"{interval} does not match the scenario interval {interval_minutes}")
    tg = r.get(data, "targets", "targets file", dict)
    return {str(k): r.series(v, f"targets.{k}") for k, v in tg.items()}


def save_targets(targets: Mapping[str, object], path: str | Path, interval_minutes: float = 5.0) -> None:
    data = {"interval_minutes": interval_minutes,
            "targets": {k: [float(x) for x in np.atleast_1d(v)] for k, v in targets.items()}}
    Path(path).write_text(yaml.safe_dump(data, sort_keys=False, default_flow_style=None, width=100),
                          encoding="utf-8", newline="\n")


def scenario_from_network(network: Network, demands: DemandProfile, config: SimConfig,
                          offramp_splits: Optional[Mapping[str, object]] = None) -> Scenario:
    splits = {k: tuple(float(x) for x in np.atleast_1d(v)) for k, v in (offramp_splits or {}).items()}
    return Scenario(network, demands, config, splits, tuple(lint_network(network)))
