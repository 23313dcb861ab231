"""Thermal / electrical / EM co-simulation over a workload trace.

Each interval solves a relaxed fixed point between temperature, resistivity,
currents and Joule heat, then accrues EM damage with Miner's rule
(``damage += interval / t_nuc``). A segment nucleates a void when its damage
reaches 1; in resistance-step mode its resistance then rises for the
following intervals.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Floorplan, GridField, PowerTrace, TechParams, rasterize_power
from .em import EmConfig, drift_force, mttf_black, nucleation_times
from .errors import ValidationError
from .ir import branch_currents, edge_temperature, ir_drop, scaled_resistance
from .pdn import PdnConfig, PdnGraph, allocate_pads, attach_current_sources, synthesize_pdn
from .thermal import ThermalConfig, solve_steady_temperature, uniform_field

DEGRADATION_MODES = ("none", "resistance-step")
LIFETIME_MODES = ("physics", "fast")
SECONDS_PER_HOUR = 3600.0


@dataclass(frozen=True)
class CoSimConfig:
    interval: float | None = None  # s per trace sample; None -> the trace's dt
    max_iter: int = 20
    tol: float = 0.01  # K
    relax: float = 0.7
    degradation: str = "none"
    delta_r: float = 0.1  # fractional resistance increase on nucleation
    mode: str = "physics"
    temperature_feedback: bool = True  # rho(T) in IR, rho(T) and kappa(T) in EM
    joule_heating: bool = True
    fixed_temperature: float = 358.15  # K, used wherever temperature feedback is off
    nx: int = 16
    ny: int = 16
    cycles: int = 1  # passes over the trace
    extrapolate: bool = True  # project first nucleation past the simulated passes
    black_A: float = 1e3
    black_n: float = 2.0

    def __post_init__(self):
        if not (self.tol > 0):
            raise ValidationError("co-sim tolerance must be > 0")
        if not (0 < self.relax <= 1):
            raise ValidationError("relaxation factor must be in (0, 1]")
        if self.delta_r < 0:
            raise ValidationError("delta_r must be >= 0")
        if self.degradation not in DEGRADATION_MODES:
            raise ValidationError(f"degradation must be one of {DEGRADATION_MODES}")
        if self.mode not in LIFETIME_MODES:
            raise ValidationError(f"mode must be one of {LIFETIME_MODES}")
        if self.max_iter < 1 or self.cycles < 1:
            raise ValidationError("max_iter and cycles must be >= 1")
        if self.interval is not None and not (self.interval > 0):
            raise ValidationError("interval must be > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "CoSimConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown CoSimConfig field(s): {sorted(unknown)}")
        return cls(**d)


def apply_dvfs(trace: PowerTrace, policy: dict) -> PowerTrace:
    """Scale block power by ``f_scale * v_scale**2``.

    ``policy`` maps block id to ``{"v_scale": .., "f_scale": ..}`` or a
    ``(v_scale, f_scale)`` pair; unlisted blocks are untouched.
    """
    scale = np.ones(len(trace.block_ids))
    for bid, p in policy.items():
        if bid not in trace.block_ids:
            raise ValidationError(f"DVFS policy names unknown block '{bid}'")
        v, f = (p["v_scale"], p["f_scale"]) if isinstance(p, dict) else p
        if not (v > 0 and f > 0):
            raise ValidationError(f"DVFS scales for '{bid}' must be > 0")
        scale[trace.block_ids.index(bid)] = f * v * v
    if np.all(scale == 1.0):
        return trace
    return PowerTrace(dt=trace.dt, block_ids=trace.block_ids, power=trace.power * scale)


@dataclass(eq=False)
class TimelineRecord:
    index: int
    t_start: float
    t_end: float
    temperature: GridField
    worst_drop: float
    worst_j: float
    damage: np.ndarray  # per analysed wire, cumulative
    increment: np.ndarray  # damage added this interval
    nucleated: int  # cumulative count
    iterations: int
    converged: bool
    residual: float  # last max |dT| of the fixed point (K)

    @property
    def peak_T(self) -> float:
        return float(self.temperature.values.max())


@dataclass
class CoSimState:
    temperature: GridField | None  # None until the first interval fixes the grid
    damage: np.ndarray
    nucleated: np.ndarray
    nucleation_time: np.ndarray
    r_mult: np.ndarray  # per edge
    time: float = 0.0
    index: int = 0


class CoSimulator:
    """Holds the static design (PDN without sources, configs) and the evolving state."""

    def __init__(self, pdn: PdnGraph, tech: TechParams, thermal: ThermalConfig, cfg: CoSimConfig,
                 em: EmConfig = EmConfig()):
        self.pdn = pdn
        self.tech = tech
        self.thermal = thermal
        self.cfg = cfg
        self.em = em
        self.wires = np.flatnonzero(pdn.wire_mask & (pdn.length > 0))
        self.state = CoSimState(
            temperature=None,
            damage=np.zeros(len(self.wires)), nucleated=np.zeros(len(self.wires), dtype=bool),
            nucleation_time=np.full(len(self.wires), np.inf), r_mult=np.ones(pdn.n_edges),
        )

    @property
    def coupled(self) -> bool:
        return self.cfg.temperature_feedback or self.cfg.joule_heating

    def node_temperature(self, T: GridField):
        if not self.cfg.temperature_feedback:
            return self.cfg.fixed_temperature
        return T.sample(self.pdn.node_tier, self.pdn.node_x, self.pdn.node_y)

    def electrical(self, g: PdnGraph, T: GridField):
        node_T = self.node_temperature(T)
        r = scaled_resistance(g, self.tech, node_T)
        if np.any(self.state.r_mult != 1.0):
            r = r * self.state.r_mult
        ir = ir_drop(g, self.tech, resistance=r)
        return node_T, ir, branch_currents(g, ir)

    def joule_map(self, g: PdnGraph, T: GridField, ir, cur) -> np.ndarray:
        """Edge I^2 R split half-and-half onto the thermal cells of its endpoints."""
        heat = np.zeros(T.values.shape)
        p = 0.5 * cur.current ** 2 * ir.resistance
        nx, ny = T.nx, T.ny
        for end in (g.edge_a, g.edge_b):
            i = np.clip((g.node_x[end] / T.die_w * nx).astype(int), 0, nx - 1)
            j = np.clip((g.node_y[end] / T.die_h * ny).astype(int), 0, ny - 1)
            np.add.at(heat, (g.node_tier[end], i, j), p)
        return heat

    def run_interval(self, pmaps, interval: float) -> TimelineRecord:
        cfg, st = self.cfg, self.state
        g = attach_current_sources(self.pdn, pmaps)
        first = next(iter(pmaps.values())) if isinstance(pmaps, dict) else pmaps[0]
        if st.temperature is None:
            st.temperature = uniform_field(self.pdn.tier_ids, first.die_w, first.die_h, first.nx, first.ny,
                                           self.thermal.T_amb)
        T = st.temperature
        converged, residual, iters = False, math.inf, 0
        for iters in range(1, cfg.max_iter + 1):
            _, ir, cur = self.electrical(g, T)
            extra = self.joule_map(g, T, ir, cur) if cfg.joule_heating else None
            T_new = solve_steady_temperature(pmaps, self.thermal, extra_power=extra)
            if not self.coupled:
                T, residual, converged = T_new, 0.0, True
                break
            relaxed = T.values + cfg.relax * (T_new.values - T.values)
            residual = float(np.max(np.abs(relaxed - T.values)))
            T = GridField(T_new.tier_ids, T_new.die_w, T_new.die_h, relaxed)
            if residual < cfg.tol:
                converged = True
                break
        node_T, ir, cur = self.electrical(g, T) if self.coupled else (self.node_temperature(T), ir, cur)

        wires = self.wires
        j = cur.density[wires]
        Te = edge_temperature(g, node_T)[wires]
        if cfg.mode == "physics":
            G = drift_force(j, Te, self.tech)
            life = nucleation_times(G, g.length[wires], Te, self.tech, self.em.n_points, self.em.rtol)
        else:
            life = mttf_black(j, Te, cfg.black_A, cfg.black_n, self.tech.Ea) * SECONDS_PER_HOUR
        with np.errstate(divide="ignore"):
            inc = np.where(np.isfinite(life), interval / life, 0.0)
        before = st.damage
        st.damage = before + inc
        newly = (st.damage >= 1.0) & ~st.nucleated
        st.nucleation_time[newly] = st.time + (1.0 - before[newly]) / inc[newly] * interval
        st.nucleated |= newly
        if cfg.degradation == "resistance-step" and newly.any():
            st.r_mult[wires[newly]] *= 1.0 + cfg.delta_r
        rec = TimelineRecord(
            index=st.index, t_start=st.time, t_end=st.time + interval, temperature=T,
            worst_drop=ir.worst_drop, worst_j=float(j.max()) if len(j) else 0.0,
            damage=st.damage.copy(), increment=inc, nucleated=int(st.nucleated.sum()),
            iterations=iters, converged=converged, residual=residual,
        )
        st.temperature = T
        st.time += interval
        st.index += 1
        return rec


@dataclass
class Timeline:
    records: list
    lifetime_s: float
    first_segment: int | None  # edge id
    extrapolated: bool
    mode: str
    segment_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def summary(self) -> dict:
        return {
            "mode": self.mode,
            "intervals": len(self.records),
            "lifetime_s": self.lifetime_s,
            "lifetime_h": self.lifetime_s / SECONDS_PER_HOUR,
            "first_failing_edge": self.first_segment,
            "extrapolated": self.extrapolated,
            "nucleated_count": self.records[-1].nucleated if self.records else 0,
            "all_converged": all(r.converged for r in self.records),
        }

    def save_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["interval", "peak_T", "worst_drop", "worst_j", "nucleated_count", "iters"])
            for r in self.records:
                w.writerow([r.index, f"{r.peak_T:.9g}", f"{r.worst_drop:.9g}", f"{r.worst_j:.9g}",
                            r.nucleated, r.iterations])


def _periodic_first_failure(increments: np.ndarray, damage0: np.ndarray, interval_lengths, t0: float):
    """First time any segment's damage reaches 1 if the last pass repeats forever.

    ``increments`` is (intervals, segments) for one pass starting at time ``t0``
    with damage ``damage0``. Returns (time, segment index) or (inf, None).
    """
    per_pass = increments.sum(axis=0)
    period = float(np.sum(interval_lengths))
    best, who = math.inf, None
    starts = np.concatenate([[0.0], np.cumsum(interval_lengths)[:-1]])
    for s in np.flatnonzero(per_pass > 0):
        need = 1.0 - damage0[s]
        passes = max(0, math.ceil(need / per_pass[s]) - 1)
        left = need - passes * per_pass[s]
        cum = np.cumsum(increments[:, s])
        k = int(np.searchsorted(cum, left, side="left"))
        k = min(k, len(cum) - 1)
        prev = cum[k - 1] if k > 0 else 0.0
        t = t0 + passes * period + starts[k] + (left - prev) / increments[k, s] * interval_lengths[k]
        if t < best:
            best, who = t, int(s)
    return best, who


def run_timeline(floorplan: Floorplan, trace: PowerTrace, cfg: CoSimConfig = CoSimConfig(),
                 tech: TechParams = TechParams(), pdn_cfg: PdnConfig = PdnConfig(),
                 thermal: ThermalConfig = ThermalConfig(), pdn: PdnGraph | None = None,
                 em: EmConfig = EmConfig()) -> Timeline:
    """Replay the trace (sample-and-hold, ``cfg.cycles`` passes) and report the lifetime.

    The lifetime is the first void nucleation, using Miner accumulation of either
    physics nucleation times or Black's MTTF. If nothing fails within the
    simulated passes, the last pass is assumed to repeat.
    """
    trace.check_against(floorplan)
    if pdn is None:
        pdn = allocate_pads(synthesize_pdn(floorplan, tech, pdn_cfg), pdn_cfg)
    interval = trace.dt if cfg.interval is None else cfg.interval
    sim = CoSimulator(pdn, tech, thermal, cfg, em)
    records = []
    for _ in range(cfg.cycles):
        for t_index in range(len(trace)):
            pmaps = rasterize_power(floorplan, trace, t_index, cfg.nx, cfg.ny)
            records.append(sim.run_interval(pmaps, interval))
    st = sim.state
    seg_ids = sim.wires
    extrapolated = False
    if st.nucleated.any():
        k = int(np.argmin(np.where(st.nucleated, st.nucleation_time, np.inf)))
        lifetime, first = float(st.nucleation_time[k]), int(seg_ids[k])
    elif cfg.extrapolate and records:
        last = records[-len(trace):]
        incs = np.array([r.increment for r in last])
        damage0 = last[0].damage - last[0].increment
        lifetime, k = _periodic_first_failure(incs, damage0, np.full(len(last), interval), last[0].t_start)
        first = None if k is None else int(seg_ids[k])
        extrapolated = k is not None
    else:
        lifetime, first = math.inf, None
    return Timeline(records=records, lifetime_s=lifetime, first_segment=first, extrapolated=extrapolated,
                    mode=cfg.mode, segment_ids=seg_ids)
