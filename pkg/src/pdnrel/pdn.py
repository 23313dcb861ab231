"""Die-centric resistive PDN mesh synthesis: metal stripes, inter-layer vias and pads.

Layer ``l`` (0-based) is metal ``l + 1``. Odd metals (layers 0, 2, ...) carry
horizontal stripes, even metals vertical ones. Node ids are assigned tier by tier
(bottom first), then layer by layer, then row-major in (y, x).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .core import Floorplan, PowerMap, TechParams
from .errors import ValidationError

WIRE = 0
VIA = 1
PAD_STRATEGIES = ("uniform", "perimeter", "explicit")

# coordinates are snapped to this resolution (m) when matching nodes across layers
_COORD_DECIMALS = 12
_TIE_RTOL = 1e-9


@dataclass(frozen=True)
class PdnConfig:
    pitch: tuple = (1e-4, 1e-4)  # m, per layer
    width: tuple = (2e-6, 2e-6)  # m, per layer
    via_resistance: float = 0.1  # Ohm, between metal layers
    tsv_resistance: float | None = None  # Ohm, between tiers; None -> via_resistance
    via_width: float = 1e-6  # m, side of the square via cut (used only for current density)
    pad_count: int = 4
    pad_strategy: str = "uniform"
    pad_locations: tuple = ()  # ((x, y), ...) for the explicit strategy
    vdd: float = 1.0
    w_min: float = 1e-7
    w_max: float = 1e-4

    def __post_init__(self):
        object.__setattr__(self, "pitch", tuple(float(p) for p in self.pitch))
        object.__setattr__(self, "width", tuple(float(w) for w in self.width))
        object.__setattr__(self, "pad_locations", tuple(tuple(float(c) for c in p) for p in self.pad_locations))
        if len(self.pitch) == 0:
            raise ValidationError("PDN config needs at least one metal layer")
        if len(self.width) != len(self.pitch):
            raise ValidationError(f"{len(self.pitch)} pitches but {len(self.width)} widths")
        if any(not (p > 0) for p in self.pitch):
            raise ValidationError("layer pitch must be > 0")
        if not (0 < self.w_min <= self.w_max):
            raise ValidationError("need 0 < w_min <= w_max")
        for w in self.width:
            if not (self.w_min <= w <= self.w_max):
                raise ValidationError(f"wire width {w} outside [{self.w_min}, {self.w_max}]")
        if not (self.via_resistance > 0) or (self.tsv_resistance is not None and not (self.tsv_resistance > 0)):
            raise ValidationError("via resistances must be > 0")
        if not (self.via_width > 0):
            raise ValidationError("via_width must be > 0")
        if self.pad_strategy not in PAD_STRATEGIES:
            raise ValidationError(f"pad strategy must be one of {PAD_STRATEGIES}, got '{self.pad_strategy}'")
        if self.pad_strategy == "explicit":
            if not self.pad_locations:
                raise ValidationError("explicit pad strategy needs pad_locations")
            object.__setattr__(self, "pad_count", len(self.pad_locations))
        if self.pad_count < 1:
            raise ValidationError("pad_count must be >= 1")
        if not (self.vdd > 0):
            raise ValidationError("Vdd must be > 0")

    @property
    def n_layers(self) -> int:
        return len(self.pitch)

    @property
    def inter_tier_resistance(self) -> float:
        return self.via_resistance if self.tsv_resistance is None else self.tsv_resistance

    @classmethod
    def from_dict(cls, d: dict) -> "PdnConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown PdnConfig field(s): {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "pitch": list(self.pitch), "width": list(self.width), "via_resistance": self.via_resistance,
            "tsv_resistance": self.tsv_resistance, "via_width": self.via_width, "pad_count": self.pad_count,
            "pad_strategy": self.pad_strategy, "pad_locations": [list(p) for p in self.pad_locations],
            "vdd": self.vdd, "w_min": self.w_min, "w_max": self.w_max,
        }


def _ro(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PdnGraph:
    """Resistive network. Edge endpoints satisfy ``edge_a < edge_b``.

    Wire resistances are stored at ``rho0`` (the reference temperature);
    analyses rescale them for temperature.
    """

    tier_ids: tuple
    n_layers: int
    vdd: float
    rho0: float
    node_tier: np.ndarray
    node_layer: np.ndarray
    node_x: np.ndarray
    node_y: np.ndarray
    edge_a: np.ndarray
    edge_b: np.ndarray
    edge_kind: np.ndarray
    edge_tier: np.ndarray
    edge_layer: np.ndarray  # -1 for vias
    length: np.ndarray
    width: np.ndarray
    thickness: np.ndarray
    resistance: np.ndarray
    pads: np.ndarray = field(default_factory=lambda: _ro([], int))
    source_nodes: np.ndarray = field(default_factory=lambda: _ro([], int))
    source_currents: np.ndarray = field(default_factory=lambda: _ro([]))

    def __post_init__(self):
        for name in ("node_tier", "node_layer", "edge_a", "edge_b", "edge_kind", "edge_tier", "edge_layer",
                     "pads", "source_nodes"):
            object.__setattr__(self, name, _ro(getattr(self, name), int))
        for name in ("node_x", "node_y", "length", "width", "thickness", "resistance", "source_currents"):
            object.__setattr__(self, name, _ro(getattr(self, name)))
        object.__setattr__(self, "tier_ids", tuple(self.tier_ids))

    @property
    def n_nodes(self) -> int:
        return len(self.node_x)

    @property
    def n_edges(self) -> int:
        return len(self.edge_a)

    @property
    def wire_mask(self) -> np.ndarray:
        return self.edge_kind == WIRE

    @property
    def pad_mask(self) -> np.ndarray:
        m = np.zeros(self.n_nodes, dtype=bool)
        m[self.pads] = True
        return m

    def source_vector(self) -> np.ndarray:
        """Sink current (A) drawn at every node."""
        out = np.zeros(self.n_nodes)
        np.add.at(out, self.source_nodes, self.source_currents)
        return out

    def total_current(self) -> float:
        return float(self.source_currents.sum())

    def layer_nodes(self, tier_index: int, layer: int) -> np.ndarray:
        return np.flatnonzero((self.node_tier == tier_index) & (self.node_layer == layer))

    def edge_groups(self) -> list:
        """Sorted (tier, layer) pairs that own at least one wire edge."""
        w = self.wire_mask
        return sorted(set(zip(self.edge_tier[w].tolist(), self.edge_layer[w].tolist())))

    def edge_midpoints(self):
        return (0.5 * (self.node_x[self.edge_a] + self.node_x[self.edge_b]),
                0.5 * (self.node_y[self.edge_a] + self.node_y[self.edge_b]))

    def wire_volume(self) -> float:
        w = self.wire_mask
        return float(np.sum(self.width[w] * self.length[w] * self.thickness[w]))

    def with_pads(self, pads) -> "PdnGraph":
        return replace(self, pads=np.sort(np.asarray(pads, dtype=int)))

    def with_sources(self, nodes, currents) -> "PdnGraph":
        nodes = np.asarray(nodes, dtype=int)
        order = np.argsort(nodes, kind="stable")
        return replace(self, source_nodes=nodes[order], source_currents=np.asarray(currents, dtype=float)[order])

    def with_edge_scale(self, factor) -> "PdnGraph":
        """Scale wire widths by ``factor`` (scalar or per edge); resistance scales by 1/factor.

        Via edges keep their configured resistance.
        """
        f = np.broadcast_to(np.asarray(factor, dtype=float), (self.n_edges,))
        f = np.where(self.wire_mask, f, 1.0)
        if np.any(f <= 0):
            raise ValidationError("width scale factors must be > 0")
        return replace(self, width=self.width * f, resistance=self.resistance / f)

    def validate(self) -> None:
        if np.any(self.edge_a == self.edge_b):
            raise ValidationError("PDN graph contains a self-loop")
        if np.any(self.edge_a > self.edge_b):
            raise ValidationError("edge endpoints must be ordered a < b")
        keys = self.edge_a.astype(np.int64) * self.n_nodes + self.edge_b
        if len(np.unique(keys)) != len(keys):
            raise ValidationError("PDN graph contains duplicate edges")
        w = self.wire_mask
        expected = self.rho0 * self.length[w] / (self.width[w] * self.thickness[w])
        if not np.allclose(self.resistance[w], expected, rtol=1e-12, atol=0):
            raise ValidationError("wire resistance inconsistent with rho0*L/(w*t)")
        if np.any(self.resistance <= 0):
            raise ValidationError("edge resistances must be > 0")
        if len(self.source_nodes) and not np.all(self.source_currents == 0):
            if len(self.pads) == 0:
                raise ValidationError("current sources present but no pads allocated")
            labels = self.components()
            fed = np.zeros(labels.max() + 1, dtype=bool)
            fed[labels[self.pads]] = True
            starving = self.source_nodes[~fed[labels[self.source_nodes]]]
            if len(starving):
                raise ValidationError(f"source node {int(starving[0])} has no path to a pad")

    def components(self) -> np.ndarray:
        n = self.n_nodes
        adj = coo_matrix((np.ones(self.n_edges), (self.edge_a, self.edge_b)), shape=(n, n))
        return connected_components(adj, directed=False)[1]

    def to_dict(self) -> dict:
        return {
            "vdd": self.vdd, "rho0": self.rho0, "tiers": list(self.tier_ids), "n_layers": self.n_layers,
            "nodes": [{"id": i, "tier": int(t), "layer": int(l), "x": float(x), "y": float(y)}
                      for i, (t, l, x, y) in enumerate(zip(self.node_tier, self.node_layer, self.node_x, self.node_y))],
            "edges": [{"a": int(a), "b": int(b), "kind": "wire" if k == WIRE else "via", "tier": int(t),
                       "layer": int(l), "length": float(L), "width": float(w), "thickness": float(th),
                       "resistance": float(r)}
                      for a, b, k, t, l, L, w, th, r in zip(self.edge_a, self.edge_b, self.edge_kind, self.edge_tier,
                                                            self.edge_layer, self.length, self.width, self.thickness,
                                                            self.resistance)],
            "pads": [int(p) for p in self.pads],
            "sources": [{"node": int(n), "current": float(c)} for n, c in zip(self.source_nodes, self.source_currents)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PdnGraph":
        nodes = sorted(d["nodes"], key=lambda n: n["id"])
        if [n["id"] for n in nodes] != list(range(len(nodes))):
            raise ValidationError("node ids must be 0..n-1")
        edges = d["edges"]
        g = cls(
            tier_ids=tuple(d["tiers"]), n_layers=int(d["n_layers"]), vdd=float(d["vdd"]), rho0=float(d["rho0"]),
            node_tier=[n["tier"] for n in nodes], node_layer=[n["layer"] for n in nodes],
            node_x=[n["x"] for n in nodes], node_y=[n["y"] for n in nodes],
            edge_a=[e["a"] for e in edges], edge_b=[e["b"] for e in edges],
            edge_kind=[WIRE if e["kind"] == "wire" else VIA for e in edges],
            edge_tier=[e["tier"] for e in edges], edge_layer=[e["layer"] for e in edges],
            length=[e["length"] for e in edges], width=[e["width"] for e in edges],
            thickness=[e["thickness"] for e in edges], resistance=[e["resistance"] for e in edges],
            pads=d.get("pads", []),
            source_nodes=[s["node"] for s in d.get("sources", [])],
            source_currents=[s["current"] for s in d.get("sources", [])],
        )
        g.validate()
        return g

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "PdnGraph":
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"file not found: {path}")
        return cls.from_dict(json.loads(path.read_text()))


def _stripe_positions(extent: float, pitch: float) -> np.ndarray:
    n = int(np.floor(extent / pitch + 1e-9)) + 1
    if n < 2:
        raise ValidationError(f"pitch {pitch} m is larger than the die dimension {extent} m")
    return np.linspace(0.0, extent, n)


def _merge_positions(*arrays) -> np.ndarray:
    """Sorted union of stripe positions; values equal after snapping count once."""
    merged = {}
    for arr in arrays:
        for v in arr:
            merged.setdefault(round(float(v), _COORD_DECIMALS), float(v))
    return np.array([merged[k] for k in sorted(merged)])


def _key(x, y):
    return round(float(x), _COORD_DECIMALS), round(float(y), _COORD_DECIMALS)


def _is_horizontal(layer: int) -> bool:
    return layer % 2 == 0


def _layer_grid(floorplan: Floorplan, cfg: PdnConfig, layer: int):
    """(xs, ys) of the node lattice of one layer."""
    nl = cfg.n_layers
    neighbours = [k for k in (layer - 1, layer + 1) if 0 <= k < nl] or [layer]
    if _is_horizontal(layer):
        ys = _stripe_positions(floorplan.die_h, cfg.pitch[layer])
        xs = _merge_positions(*(_stripe_positions(floorplan.die_w, cfg.pitch[k]) for k in neighbours))
    else:
        xs = _stripe_positions(floorplan.die_w, cfg.pitch[layer])
        ys = _merge_positions(*(_stripe_positions(floorplan.die_h, cfg.pitch[k]) for k in neighbours))
    return xs, ys


def synthesize_pdn(floorplan: Floorplan, tech: TechParams, cfg: PdnConfig) -> PdnGraph:
    """Build the multi-tier stripe mesh, without pads or sources.

    Every tier gets the same layer stack. Vias join coincident nodes of adjacent
    layers; tiers are joined at coincident nodes of their facing layers (top to top
    for F2F, top to bottom metal otherwise).
    """
    nl = cfg.n_layers
    grids = [_layer_grid(floorplan, cfg, layer) for layer in range(nl)]

    node_tier, node_layer, node_x, node_y = [], [], [], []
    lookup = {}  # (tier, layer) -> {(x, y): node id}
    for ti in range(len(floorplan.tiers)):
        for layer, (xs, ys) in enumerate(grids):
            table = {}
            for y in ys:
                for x in xs:
                    table[_key(x, y)] = len(node_x)
                    node_tier.append(ti)
                    node_layer.append(layer)
                    node_x.append(x)
                    node_y.append(y)
            lookup[(ti, layer)] = table

    edges = []  # (a, b, kind, tier, layer, length, width, thickness, resistance)

    def add_wire(ti, layer, a, b, length):
        w = cfg.width[layer]
        t = tech.thickness(layer)
        edges.append((min(a, b), max(a, b), WIRE, ti, layer, length, w, t, tech.rho0 * length / (w * t)))

    def add_via(ti, a, b, r):
        edges.append((min(a, b), max(a, b), VIA, ti, -1, 0.0, cfg.via_width, cfg.via_width, r))

    for ti in range(len(floorplan.tiers)):
        for layer, (xs, ys) in enumerate(grids):
            table = lookup[(ti, layer)]
            runs_x = _is_horizontal(layer) or nl == 1
            runs_y = not _is_horizontal(layer) or nl == 1
            if runs_x:
                for y in ys:
                    for x0, x1 in zip(xs[:-1], xs[1:]):
                        add_wire(ti, layer, table[_key(x0, y)], table[_key(x1, y)], x1 - x0)
            if runs_y:
                for x in xs:
                    for y0, y1 in zip(ys[:-1], ys[1:]):
                        add_wire(ti, layer, table[_key(x, y0)], table[_key(x, y1)], y1 - y0)
        for layer in range(nl - 1):
            lower, upper = lookup[(ti, layer)], lookup[(ti, layer + 1)]
            for key in sorted(lower.keys() & upper.keys(), key=lambda k: (k[1], k[0])):
                add_via(ti, lower[key], upper[key], cfg.via_resistance)

    for ti in range(len(floorplan.tiers) - 1):
        facing = nl - 1 if floorplan.tiers[ti + 1].bond == "F2F" else 0
        lower, upper = lookup[(ti, nl - 1)], lookup[(ti + 1, facing)]
        shared = sorted(lower.keys() & upper.keys(), key=lambda k: (k[1], k[0]))
        if not shared:
            raise ValidationError(f"tiers {ti} and {ti + 1} share no grid points for inter-tier vias")
        for key in shared:
            add_via(ti, lower[key], upper[key], cfg.inter_tier_resistance)

    edges.sort(key=lambda e: (e[0], e[1]))
    cols = list(zip(*edges)) if edges else [()] * 9
    g = PdnGraph(
        tier_ids=floorplan.tier_ids, n_layers=nl, vdd=cfg.vdd, rho0=tech.rho0,
        node_tier=node_tier, node_layer=node_layer, node_x=node_x, node_y=node_y,
        edge_a=cols[0], edge_b=cols[1], edge_kind=cols[2], edge_tier=cols[3], edge_layer=cols[4],
        length=cols[5], width=cols[6], thickness=cols[7], resistance=cols[8],
    )
    g.validate()
    return g


def _pick(candidates: np.ndarray, score: np.ndarray, largest: bool) -> int:
    """Candidate with the best score; near-ties (1e-9 relative) go to the lowest node id."""
    best = score.max() if largest else score.min()
    slack = _TIE_RTOL * abs(best) + 1e-300
    ok = score >= best - slack if largest else score <= best + slack
    return int(candidates[np.flatnonzero(ok)[0]])


def _farthest_points(ids, xs, ys, count, seed) -> list:
    chosen = [seed]
    d2 = (xs - xs[ids == seed]) ** 2 + (ys - ys[ids == seed]) ** 2
    while len(chosen) < count:
        score = np.where(np.isin(ids, chosen), -np.inf, d2)
        nxt = _pick(ids, score, largest=True)
        chosen.append(nxt)
        d2 = np.minimum(d2, (xs - xs[ids == nxt]) ** 2 + (ys - ys[ids == nxt]) ** 2)
    return chosen


def pad_layer_nodes(pdn: PdnGraph) -> np.ndarray:
    """Candidate pad nodes: top metal of the bottom (package-side) tier."""
    return pdn.layer_nodes(0, pdn.n_layers - 1)


def allocate_pads(pdn: PdnGraph, cfg: PdnConfig) -> PdnGraph:
    """Place ``cfg.pad_count`` supply pads on the top metal of the bottom tier."""
    ids = pad_layer_nodes(pdn)
    xs, ys = pdn.node_x[ids], pdn.node_y[ids]
    if cfg.pad_strategy == "explicit":
        chosen = []
        for px, py in cfg.pad_locations:
            node = _pick(ids, (xs - px) ** 2 + (ys - py) ** 2, largest=False)
            if node in chosen:
                raise ValidationError(f"explicit pads at ({px}, {py}) snap onto an already used node {node}")
            chosen.append(node)
        return pdn.with_pads(chosen)
    if cfg.pad_strategy == "perimeter":
        edge = (xs == xs.min()) | (xs == xs.max()) | (ys == ys.min()) | (ys == ys.max())
        ids, xs, ys = ids[edge], xs[edge], ys[edge]
    if cfg.pad_count > len(ids):
        raise ValidationError(f"pad count {cfg.pad_count} exceeds the {len(ids)} available top-layer nodes")
    if cfg.pad_strategy == "uniform":
        seed = _pick(ids, (xs - xs.mean()) ** 2 + (ys - ys.mean()) ** 2, largest=False)
    else:
        seed = _pick(ids, (xs - xs.min()) ** 2 + (ys - ys.min()) ** 2, largest=False)
    return pdn.with_pads(_farthest_points(ids, xs, ys, cfg.pad_count, seed))


def attach_current_sources(pdn: PdnGraph, pmaps, vdd: float | None = None) -> PdnGraph:
    """Replace the graph's sources with the load currents ``P_cell / Vdd`` of the given maps.

    Each cell's current goes to the nearest bottom-metal node of its tier.
    ``pmaps`` is a single PowerMap or a mapping/iterable of them.
    """
    vdd = pdn.vdd if vdd is None else vdd
    if not (vdd > 0):
        raise ValidationError(f"Vdd must be > 0, got {vdd}")
    if isinstance(pmaps, PowerMap):
        pmaps = [pmaps]
    elif isinstance(pmaps, dict):
        pmaps = list(pmaps.values())
    totals = np.zeros(pdn.n_nodes)
    for pm in pmaps:
        if pm.tier not in pdn.tier_ids:
            raise ValidationError(f"power map tier '{pm.tier}' not present in the PDN")
        ids = pdn.layer_nodes(pdn.tier_ids.index(pm.tier), 0)
        nx_, ny_ = pdn.node_x[ids], pdn.node_y[ids]
        cx, cy = pm.cell_centers()
        power = pm.cell_power()
        for i, j in zip(*np.nonzero(power)):
            node = _pick(ids, (nx_ - cx[i]) ** 2 + (ny_ - cy[j]) ** 2, largest=False)
            totals[node] += power[i, j] / vdd
    nodes = np.flatnonzero(totals)
    g = pdn.with_sources(nodes, totals[nodes])
    g.validate()
    return g


def build_pdn(floorplan: Floorplan, tech: TechParams, cfg: PdnConfig, pmaps=None) -> PdnGraph:
    """synthesize -> allocate pads -> (optionally) attach sources."""
    g = allocate_pads(synthesize_pdn(floorplan, tech, cfg), cfg)
    if pmaps is not None:
        g = attach_current_sources(g, pmaps, cfg.vdd)
    return g
