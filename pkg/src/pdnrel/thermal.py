"""Compact stacked-die thermal grid: one RC node per cell, heat sunk to ambient."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .core import GridField, PowerMap
from .errors import ValidationError
from .ir import laplacian, solve_spd

HEAT_SINK_SIDES = ("top", "bottom", "both")


@dataclass(frozen=True)
class ThermalConfig:
    g_lat: float = 0.5  # W/K between lateral neighbours
    g_z: float = 2.0  # W/K between stacked cells of adjacent tiers
    g_amb: float = 0.1  # W/K from each heat-sink-side cell to ambient
    T_amb: float = 318.15  # K
    C_th: float = 1e-3  # J/K per cell
    heat_sink: str = "top"
    tol: float = 1e-12

    def __post_init__(self):
        for name in ("g_lat", "g_z", "g_amb", "C_th", "tol"):
            if not (getattr(self, name) > 0):
                raise ValidationError(f"ThermalConfig.{name} must be > 0")
        if not (250.0 <= self.T_amb <= 400.0):
            raise ValidationError(f"ambient temperature {self.T_amb} K outside [250, 400] K")
        if self.heat_sink not in HEAT_SINK_SIDES:
            raise ValidationError(f"heat_sink must be one of {HEAT_SINK_SIDES}")

    @classmethod
    def from_dict(cls, d: dict) -> "ThermalConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown ThermalConfig field(s): {sorted(unknown)}")
        return cls(**d)


def _stack(pmaps) -> tuple:
    if isinstance(pmaps, PowerMap):
        pmaps = [pmaps]
    elif isinstance(pmaps, dict):
        pmaps = list(pmaps.values())
    pmaps = list(pmaps)
    if not pmaps:
        raise ValidationError("need at least one power map")
    shape = pmaps[0].density.shape
    for pm in pmaps:
        if pm.density.shape != shape:
            raise ValidationError("all tiers must share the same grid resolution")
    power = np.stack([pm.cell_power() for pm in pmaps])
    return tuple(pm.tier for pm in pmaps), pmaps[0].die_w, pmaps[0].die_h, power


def sink_mask(n_tiers: int, nx: int, ny: int, side: str) -> np.ndarray:
    m = np.zeros((n_tiers, nx, ny), dtype=bool)
    if side in ("top", "both"):
        m[-1] = True
    if side in ("bottom", "both"):
        m[0] = True
    return m


@lru_cache(maxsize=32)
def conductance_matrix(cfg: ThermalConfig, n_tiers: int, nx: int, ny: int, capacitive: float = 0.0):
    """Thermal Laplacian G plus ambient coupling, plus ``capacitive`` (= C/dt) on the diagonal."""
    idx = np.arange(n_tiers * nx * ny).reshape(n_tiers, nx, ny)
    a = [idx[:, :-1, :].ravel(), idx[:, :, :-1].ravel(), idx[:-1].ravel()]
    b = [idx[:, 1:, :].ravel(), idx[:, :, 1:].ravel(), idx[1:].ravel()]
    g = [np.full(len(a[0]), cfg.g_lat), np.full(len(a[1]), cfg.g_lat), np.full(len(a[2]), cfg.g_z)]
    extra = sink_mask(n_tiers, nx, ny, cfg.heat_sink).ravel() * cfg.g_amb + capacitive
    return laplacian(idx.size, np.concatenate(a), np.concatenate(b), np.concatenate(g), extra)


def solve_steady_temperature(pmaps, cfg: ThermalConfig, extra_power=None) -> GridField:
    """Steady temperatures of every tier for the given power maps.

    Solves ``G (T - T_amb) = P``, which is ``G T = P + g_amb T_amb`` shifted by
    ambient. ``extra_power`` (W per cell, shape ``(tiers, nx, ny)``) is added to
    the map power, e.g. Joule self-heating.
    """
    tiers, w, h, power = _stack(pmaps)
    if extra_power is not None:
        power = power + np.asarray(extra_power, dtype=float)
    G = conductance_matrix(cfg, *power.shape)
    rise = solve_spd(G, power.ravel(), tol=cfg.tol)
    return GridField(tier_ids=tiers, die_w=w, die_h=h, values=cfg.T_amb + rise.reshape(power.shape))


def transient_step(T: GridField, pmaps, dt: float, cfg: ThermalConfig, extra_power=None) -> GridField:
    """One backward-Euler step: ``(C/dt + G) T_next = C/dt T + P + g_amb T_amb``."""
    if not (dt > 0):
        raise ValidationError(f"time step must be > 0, got {dt}")
    tiers, w, h, power = _stack(pmaps)
    if extra_power is not None:
        power = power + np.asarray(extra_power, dtype=float)
    if T.values.shape != power.shape:
        raise ValidationError("temperature field and power maps have different shapes")
    c = cfg.C_th / dt
    A = conductance_matrix(cfg, *power.shape, capacitive=c)
    rise0 = (T.values - cfg.T_amb).ravel()
    rise = solve_spd(A, c * rise0 + power.ravel(), tol=cfg.tol, x0=rise0)
    return GridField(tier_ids=tiers, die_w=w, die_h=h, values=cfg.T_amb + rise.reshape(power.shape))


def uniform_field(tier_ids, die_w, die_h, nx, ny, value) -> GridField:
    return GridField(tier_ids=tuple(tier_ids), die_w=die_w, die_h=die_h,
                     values=np.full((len(tier_ids), nx, ny), float(value)))


def heat_to_ambient(T: GridField, cfg: ThermalConfig) -> float:
    """Total heat flow (W) from the heat-sink cells into ambient."""
    m = sink_mask(*T.values.shape, cfg.heat_sink)
    return float(cfg.g_amb * np.sum(T.values[m] - cfg.T_amb))
