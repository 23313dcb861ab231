"""Domain types, technology constants and floorplan / power-trace ingestion."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError

K_B = 1.380649e-23  # J/K
Q_E = 1.602176634e-19  # C

BOND_STYLES = ("F2F", "F2B", "B2B")


def _frozen_array(values, dtype=float):
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TechParams:
    """Copper interconnect parameters. Defaults are literature-typical, not normative."""

    rho0: float = 1.68e-8  # Ohm*m at T_ref
    alpha: float = 3.9e-3  # 1/K
    T_ref: float = 293.15  # K
    Zstar: float = 1.0
    Omega: float = 1.18e-29  # m^3
    B_mod: float = 1.0e11  # Pa
    D0: float = 1.3e-9  # m^2/s
    Ea: float = 0.86  # eV
    sigma_crit: float = 5.0e8  # Pa
    layer_thickness: tuple = (5e-7, 5e-7)  # m, indexed by metal layer
    kB: float = field(default=K_B, init=False)
    e: float = field(default=Q_E, init=False)

    def __post_init__(self):
        object.__setattr__(self, "layer_thickness", tuple(float(t) for t in self.layer_thickness))
        for name in ("rho0", "T_ref", "Zstar", "Omega", "B_mod", "D0", "Ea", "sigma_crit"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValidationError(f"TechParams.{name} must be finite and > 0, got {value}")
        if not (math.isfinite(self.alpha) and self.alpha >= 0):
            raise ValidationError(f"TechParams.alpha must be >= 0, got {self.alpha}")
        if not self.layer_thickness or any(not (t > 0) for t in self.layer_thickness):
            raise ValidationError("TechParams.layer_thickness needs at least one positive entry")
        # rho is linear in T, so checking the interval ends is enough
        if self.resistivity(250.0) <= 0 or self.resistivity(450.0) <= 0:
            raise ValidationError("resistivity becomes non-positive within [250 K, 450 K]")

    def resistivity(self, T):
        return self.rho0 * (1.0 + self.alpha * (np.asarray(T, dtype=float) - self.T_ref))

    def resistivity_ratio(self, T):
        """rho(T) / rho0."""
        return 1.0 + self.alpha * (np.asarray(T, dtype=float) - self.T_ref)

    def thickness(self, layer: int) -> float:
        return self.layer_thickness[min(layer, len(self.layer_thickness) - 1)]

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.init}
        d["layer_thickness"] = list(self.layer_thickness)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TechParams":
        known = {f.name for f in fields(cls) if f.init}
        unknown = set(d) - known - {"kB", "e"}
        if unknown:
            raise ValidationError(f"unknown TechParams field(s): {sorted(unknown)}")
        return cls(**{k: v for k, v in d.items() if k in known})


def load_tech(path) -> TechParams:
    """Read TechParams JSON; omitted fields keep their defaults."""
    return TechParams.from_dict(read_json(path))


@dataclass(frozen=True)
class Tier:
    id: str
    z: int
    bond: str = "F2F"


@dataclass(frozen=True)
class Block:
    id: str
    tier: str
    x: float
    y: float
    w: float
    h: float
    name: str = ""


@dataclass(frozen=True)
class Floorplan:
    die_w: float
    die_h: float
    tiers: tuple
    blocks: tuple

    def __post_init__(self):
        object.__setattr__(self, "tiers", tuple(sorted(self.tiers, key=lambda t: t.z)))
        object.__setattr__(self, "blocks", tuple(self.blocks))
        self.validate()

    def validate(self):
        if not (self.die_w > 0 and self.die_h > 0):
            raise ValidationError(f"die dimensions must be positive, got {self.die_w} x {self.die_h}")
        if not self.tiers:
            raise ValidationError("floorplan needs at least one tier")
        tier_ids = [t.id for t in self.tiers]
        if len(set(tier_ids)) != len(tier_ids):
            raise ValidationError(f"duplicate tier id in {tier_ids}")
        zs = [t.z for t in self.tiers]
        if zs != list(range(len(zs))):
            raise ValidationError(f"tier z-indices must be unique and contiguous from 0, got {zs}")
        seen = set()
        # tiny slack so a block ending exactly at the die edge survives float parsing
        tol = 1e-12 * max(self.die_w, self.die_h)
        for b in self.blocks:
            if b.id in seen:
                raise ValidationError(f"duplicate block id '{b.id}'")
            seen.add(b.id)
            if b.tier not in tier_ids:
                raise ValidationError(f"block '{b.id}' references unknown tier '{b.tier}'")
            if not (b.w > 0 and b.h > 0):
                raise ValidationError(f"block '{b.id}' must have positive width and height")
            if b.x < -tol or b.y < -tol or b.x + b.w > self.die_w + tol or b.y + b.h > self.die_h + tol:
                raise ValidationError(f"block '{b.id}' lies outside the die bounds")

    @property
    def tier_ids(self) -> tuple:
        return tuple(t.id for t in self.tiers)

    def tier_index(self, tier_id) -> int:
        return self.tier_ids.index(tier_id)

    def block(self, block_id) -> Block:
        for b in self.blocks:
            if b.id == block_id:
                return b
        raise KeyError(block_id)

    def to_dict(self) -> dict:
        return {
            "die": {"w_m": self.die_w, "h_m": self.die_h},
            "tiers": [{"id": t.id, "z": t.z, "bond": t.bond} for t in self.tiers],
            "blocks": [
                {"id": b.id, "tier": b.tier, "x_m": b.x, "y_m": b.y, "w_m": b.w, "h_m": b.h,
                 **({"name": b.name} if b.name else {})}
                for b in self.blocks
            ],
        }

    @classmethod
    def from_dict(cls, d: dict, path=None) -> "Floorplan":
        def need(obj, key, where):
            if not isinstance(obj, dict) or key not in obj:
                raise ParseError("missing required key", path=path, field=f"{where}.{key}")
            return obj[key]

        def num(obj, key, where):
            value = need(obj, key, where)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ParseError(f"expected a number, got {value!r}", path=path, field=f"{where}.{key}")
            return float(value)

        die = need(d, "die", "$")
        tiers = []
        for i, t in enumerate(need(d, "tiers", "$")):
            where = f"tiers[{i}]"
            z = need(t, "z", where)
            if isinstance(z, bool) or not isinstance(z, int):
                raise ParseError(f"expected an integer, got {z!r}", path=path, field=f"{where}.z")
            bond = str(t.get("bond", "F2F"))
            if bond not in BOND_STYLES:
                raise ParseError(f"bond must be one of {BOND_STYLES}", path=path, field=f"{where}.bond")
            tiers.append(Tier(id=str(need(t, "id", where)), z=z, bond=bond))
        blocks = []
        for i, b in enumerate(need(d, "blocks", "$")):
            where = f"blocks[{i}]"
            blocks.append(Block(
                id=str(need(b, "id", where)), tier=str(need(b, "tier", where)),
                x=num(b, "x_m", where), y=num(b, "y_m", where),
                w=num(b, "w_m", where), h=num(b, "h_m", where),
                name=str(b.get("name", "")),
            ))
        return cls(die_w=num(die, "w_m", "die"), die_h=num(die, "h_m", "die"),
                   tiers=tuple(tiers), blocks=tuple(blocks))


def read_json(path):
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path=path, line=exc.lineno) from exc


def load_floorplan(path) -> Floorplan:
    return Floorplan.from_dict(read_json(path), path=path)


def save_floorplan(fp: Floorplan, path) -> None:
    Path(path).write_text(json.dumps(fp.to_dict(), indent=2) + "\n")


@dataclass(frozen=True, eq=False)
class PowerTrace:
    """Per-block power samples (W), shape ``(n_samples, n_blocks)``."""

    dt: float
    block_ids: tuple
    power: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "block_ids", tuple(str(b) for b in self.block_ids))
        power = np.array(self.power, dtype=float)
        if power.ndim != 2 or power.shape[1] != len(self.block_ids):
            raise ValidationError(f"power array shape {power.shape} does not match {len(self.block_ids)} blocks")
        if power.shape[0] < 1:
            raise ValidationError("power trace needs at least one sample")
        if not np.all(np.isfinite(power)):
            raise ValidationError("power trace contains non-finite samples")
        if np.any(power < 0):
            raise ValidationError("power trace contains negative samples")
        if len(set(self.block_ids)) != len(self.block_ids):
            raise ValidationError("duplicate block id in power trace")
        if not (self.dt > 0):
            raise ValidationError(f"sample interval must be > 0, got {self.dt}")
        power.setflags(write=False)
        object.__setattr__(self, "power", power)

    def __len__(self):
        return self.power.shape[0]

    def __eq__(self, other):
        return (isinstance(other, PowerTrace) and self.dt == other.dt and self.block_ids == other.block_ids
                and np.array_equal(self.power, other.power))

    def sample(self, t_index: int) -> dict:
        if not 0 <= t_index < len(self):
            raise ValidationError(f"t_index {t_index} out of range for trace of length {len(self)}")
        return dict(zip(self.block_ids, self.power[t_index].tolist()))

    def check_against(self, floorplan: Floorplan):
        known = {b.id for b in floorplan.blocks}
        for bid in self.block_ids:
            if bid not in known:
                raise ValidationError(f"power trace references unknown block id '{bid}'")


def load_power_trace(path, floorplan: Floorplan, dt: float | None = None) -> PowerTrace:
    """Read a trace CSV: header ``t_s,<block>,...``, one row per sample.

    The sample interval comes from the ``t_s`` column (uniform spacing required);
    a single-row trace needs ``dt`` or defaults to 1 s.
    """
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"file not found: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if any(c.strip() for c in r)]
    if not rows:
        raise ParseError("empty trace file", path=path)
    header = [c.strip() for c in rows[0]]
    if not header or header[0] != "t_s":
        raise ParseError("first column must be 't_s'", path=path, line=1)
    block_ids = header[1:]
    known = {b.id for b in floorplan.blocks}
    for bid in block_ids:
        if bid not in known:
            raise ValidationError(f"{path}: power trace references unknown block id '{bid}'")
    times, samples = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ParseError(f"ragged row: expected {len(header)} columns, got {len(row)}", path=path, line=lineno)
        try:
            values = [float(c) for c in row]
        except ValueError as exc:
            raise ParseError(str(exc), path=path, line=lineno) from exc
        for bid, p in zip(block_ids, values[1:]):
            if p < 0 or not math.isfinite(p):
                raise ParseError(f"invalid power {p} for block '{bid}'", path=path, line=lineno, field=bid)
        times.append(values[0])
        samples.append(values[1:])
    if not samples:
        raise ParseError("trace has a header but no samples", path=path)
    if dt is None:
        if len(times) == 1:
            dt = 1.0
        else:
            steps = np.diff(times)
            dt = float(steps[0])
            if dt <= 0 or not np.allclose(steps, dt, rtol=1e-6, atol=0):
                raise ParseError("t_s column must be strictly increasing with uniform spacing", path=path)
    power = np.array(samples, dtype=float).reshape(len(samples), len(block_ids))
    return PowerTrace(dt=dt, block_ids=tuple(block_ids), power=power)


def save_power_trace(trace: PowerTrace, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_s", *trace.block_ids])
        for k, row in enumerate(trace.power):
            w.writerow([repr(k * trace.dt), *(repr(float(p)) for p in row)])


@dataclass(frozen=True, eq=False)
class PowerMap:
    """Power density (W/m^2) of one tier on an ``nx x ny`` grid; ``density[i, j]`` has i along x."""

    tier: str
    die_w: float
    die_h: float
    density: np.ndarray

    def __post_init__(self):
        d = np.array(self.density, dtype=float)
        if d.ndim != 2:
            raise ValidationError("power density must be a 2-D array")
        d.setflags(write=False)
        object.__setattr__(self, "density", d)

    @property
    def nx(self) -> int:
        return self.density.shape[0]

    @property
    def ny(self) -> int:
        return self.density.shape[1]

    @property
    def dx(self) -> float:
        return self.die_w / self.nx

    @property
    def dy(self) -> float:
        return self.die_h / self.ny

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    def cell_power(self) -> np.ndarray:
        """Power per cell (W)."""
        return self.density * self.cell_area

    def total_power(self) -> float:
        return float(self.cell_power().sum())

    def cell_centers(self):
        xs = (np.arange(self.nx) + 0.5) * self.dx
        ys = (np.arange(self.ny) + 0.5) * self.dy
        return xs, ys


def _overlap_1d(start, length, edges):
    """Overlap of [start, start+length) with each cell [edges[k], edges[k+1])."""
    lo = np.maximum(edges[:-1], start)
    hi = np.minimum(edges[1:], start + length)
    return np.clip(hi - lo, 0.0, None)


def rasterize_power(floorplan: Floorplan, trace: PowerTrace, t_index: int, nx: int, ny: int) -> dict:
    """Spread each block's power over grid cells in proportion to overlap area.

    Returns ``{tier_id: PowerMap}`` ordered bottom tier first.
    """
    if nx < 1 or ny < 1:
        raise ValidationError(f"grid resolution must be >= 1, got {nx} x {ny}")
    trace.check_against(floorplan)
    powers = trace.sample(t_index)
    x_edges = np.linspace(0.0, floorplan.die_w, nx + 1)
    y_edges = np.linspace(0.0, floorplan.die_h, ny + 1)
    cell_area = (floorplan.die_w / nx) * (floorplan.die_h / ny)
    cell_power = {t.id: np.zeros((nx, ny)) for t in floorplan.tiers}
    for b in floorplan.blocks:
        p = powers.get(b.id, 0.0)
        if p == 0.0:
            continue
        weights = np.outer(_overlap_1d(b.x, b.w, x_edges), _overlap_1d(b.y, b.h, y_edges))
        # normalising by the summed overlap makes conservation exact regardless of alignment
        cell_power[b.tier] += p * weights / weights.sum()
    return {tid: PowerMap(tier=tid, die_w=floorplan.die_w, die_h=floorplan.die_h, density=cp / cell_area)
            for tid, cp in cell_power.items()}


@dataclass(frozen=True, eq=False)
class GridField:
    """Per-cell scalar field over a stack of tiers, ``values[tier, i, j]``."""

    tier_ids: tuple
    die_w: float
    die_h: float
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 3 or v.shape[0] != len(self.tier_ids):
            raise ValidationError(f"field shape {v.shape} inconsistent with {len(self.tier_ids)} tiers")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "tier_ids", tuple(self.tier_ids))

    @property
    def nx(self) -> int:
        return self.values.shape[1]

    @property
    def ny(self) -> int:
        return self.values.shape[2]

    def tier(self, tier_id) -> np.ndarray:
        return self.values[self.tier_ids.index(tier_id)]

    def sample(self, tier_index, x, y) -> np.ndarray:
        """Value of the cell containing each point (x, y) on the given tier(s)."""
        i = np.clip((np.asarray(x) / self.die_w * self.nx).astype(int), 0, self.nx - 1)
        j = np.clip((np.asarray(y) / self.die_h * self.ny).astype(int), 0, self.ny - 1)
        return self.values[np.asarray(tier_index), i, j]

    def __eq__(self, other):
        return (isinstance(other, GridField) and self.tier_ids == other.tier_ids and self.die_w == other.die_w
                and self.die_h == other.die_h and np.array_equal(self.values, other.values))

