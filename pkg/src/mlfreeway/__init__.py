"""Macroscopic managed lane-freeway simulator with offramp split-ratio calibration."""

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
    gate_segments,
    validate_network,
)
from .simulation import SimConfig, SimOutput, run

__all__ = [
    "ClassKind",
    "DemandProfile",
    "FundamentalDiagram",
    "LaneGroup",
    "Link",
    "LinkRole",
    "Network",
    "Node",
    "VehicleClass",
    "SimConfig",
    "SimOutput",
    "check_cfl",
    "gate_segments",
    "run",
    "validate_network",
]
