"""Backwards-lambda link model with hysteresis and the managed-lane friction effect.

The ``_``-prefixed kernels are compiled with numba and are what the simulator
calls every step. They are unit-agnostic: pass speeds and capacities per hour
to get demands per hour, or per step to get demands per step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .network import FundamentalDiagram

DENSITY_EPS = 1e-9  # veh/mi; below this a link counts as empty


@njit(cache=True)
def _sending(rho, v, capacity, out):
    """Per-class demand v*rho_c*min(1, F/(v*sum rho)); returns the total."""
    total = 0.0
    for c in range(rho.shape[0]):
        total += rho[c]
    if total <= 0.0 or v <= 0.0:
        for c in range(rho.shape[0]):
            out[c] = 0.0
        return 0.0
    send = min(v * total, capacity)
    for c in range(rho.shape[0]):
        out[c] = send * (rho[c] / total)
    return send


@njit(cache=True)
def _receiving(total_rho, theta, capacity, w, jam):
    if theta == 0:
        return capacity
    r = w * (jam - total_rho)
    if r < 0.0:
        return 0.0
    return min(r, capacity)


@njit(cache=True)
def _metastate(prev, total_rho, rho_minus, rho_plus):
    if total_rho <= rho_minus:
        return 0
    if total_rho > rho_plus:
        return 1
    return prev


@njit(cache=True)
def _friction(vf, capacity, sigma, partner_speed):
    """Friction-adjusted (speed, capacity) of a managed link."""
    delta = vf - partner_speed
    if delta <= 0.0 or sigma == 0.0:
        return vf, capacity
    v_hat = vf - sigma * delta
    # v_hat * rho_plus, with rho_plus = capacity / vf
    return v_hat, capacity * (v_hat / vf)


@dataclass
class LinkState:
    """Per-class densities (veh/mi), metastate and last recorded speed (mph)."""

    densities: np.ndarray
    metastate: int = 0
    last_speed: float = float("nan")

    def __post_init__(self):
        self.densities = np.asarray(self.densities, dtype=float).reshape(-1)

    @property
    def total_density(self) -> float:
        return float(self.densities.sum())


def compute_demand(state: LinkState, fd: FundamentalDiagram, effective_v: float | None = None,
                   effective_F: float | None = None) -> np.ndarray:
    """Per-class sending flow of a link.

    ``effective_v`` / ``effective_F`` override the diagram's free-flow speed
    and capacity (used for friction-adjusted managed links).
    """
    v = fd.free_flow_speed if effective_v is None else effective_v
    F = fd.capacity if effective_F is None else effective_F
    out = np.empty_like(state.densities)
    _sending(state.densities, float(v), float(F), out)
    return out


def compute_supply(state: LinkState, fd: FundamentalDiagram) -> float:
    return float(_receiving(state.total_density, int(state.metastate), fd.capacity,
                            fd.congestion_wave_speed, fd.jam_density))


def update_metastate(prev: int, total_density: float, fd: FundamentalDiagram) -> int:
    return int(_metastate(int(prev), float(total_density), fd.rho_minus, fd.rho_plus))


def apply_friction(fd: FundamentalDiagram, partner_speed: float, sigma: float) -> tuple[float, float]:
    """Return the friction-adjusted free-flow speed and capacity of a managed link.

    The speed differential is clamped at zero, so a fast GP partner never
    raises the managed lane above its nominal parameters.
    """
    v, F = _friction(fd.free_flow_speed, fd.capacity, float(sigma), float(partner_speed))
    return float(v), float(F)


def link_speed(total_outflow: float, total_density: float, free_flow_speed: float) -> float:
    """Space-mean speed estimate min(v_f, q/rho); v_f for an empty link."""
    if total_density < DENSITY_EPS:
        return free_flow_speed
    return min(free_flow_speed, total_outflow / total_density)
