"""CSV/JSON/SVG emitters. Every number is printed with 9 significant digits."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .core import GridField
from .errors import ValidationError

PALETTES = {
    "heat": ((0.0, (49, 54, 149)), (0.25, (116, 173, 209)), (0.5, (255, 255, 191)),
             (0.75, (244, 109, 67)), (1.0, (165, 0, 38))),
    "gray": ((0.0, (255, 255, 255)), (1.0, (0, 0, 0))),
}


def fmt(x) -> str:
    """Fixed-precision text for a number; integers and booleans stay exact."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    s = f"{x:.9g}"
    return "0" if s == "-0" else s


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        # JSON has no infinity; keep it as a readable token
        return fmt(x) if not math.isfinite(x) else float(f"{x:.9g}")
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")
    return path


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in row])
    return path


def write_voltages(path, pdn, ir) -> Path:
    tiers = pdn.tier_ids
    rows = ((n, tiers[pdn.node_tier[n]], pdn.node_layer[n], pdn.node_x[n], pdn.node_y[n], ir.voltage[n], ir.drop[n])
            for n in range(pdn.n_nodes))
    return write_csv(path, ["node", "tier", "layer", "x_m", "y_m", "voltage_V", "drop_V"], rows)


def write_branch_currents(path, pdn, currents) -> Path:
    kinds = ("wire", "via")
    rows = ((e, pdn.edge_a[e], pdn.edge_b[e], kinds[pdn.edge_kind[e]], currents.current[e], currents.density[e])
            for e in range(pdn.n_edges))
    return write_csv(path, ["edge", "node_a", "node_b", "kind", "current_A", "j_A_per_m2"], rows)


def write_temperature(path, field: GridField) -> Path:
    dx, dy = field.die_w / field.nx, field.die_h / field.ny

    def rows():
        for t, tid in enumerate(field.tier_ids):
            for i in range(field.nx):
                for j in range(field.ny):
                    yield tid, i, j, (i + 0.5) * dx, (j + 0.5) * dy, field.values[t, i, j]

    return write_csv(path, ["tier", "i", "j", "x_m", "y_m", "T_K"], rows())


def write_em_results(path, results) -> Path:
    rows = ((r.segment_id, r.j, r.T, r.G, r.kappa, r.sigma_max, r.blech_immortal, r.t_nuc) for r in results)
    return write_csv(path, ["edge", "j_A_per_m2", "T_K", "G_Pa_per_m", "kappa_m2_per_s", "sigma_max_ss_Pa", "immortal",
                            "t_nuc_s"], rows)


def _color(palette, u: float) -> str:
    stops = PALETTES[palette]
    for (u0, c0), (u1, c1) in zip(stops, stops[1:]):
        if u <= u1:
            f = 0.0 if u1 == u0 else (u - u0) / (u1 - u0)
            rgb = [round(a + f * (b - a)) for a, b in zip(c0, c1)]
            return "#{:02x}{:02x}{:02x}".format(*rgb)
    return "#{:02x}{:02x}{:02x}".format(*stops[-1][1])


def emit_heatmap(values, path, palette: str = "heat", title: str = "", unit: str = "", cell_px: int = 20) -> Path:
    """Write an SVG with one rect per cell of ``values[i, j]`` (i along x, j along y, origin bottom-left).

    Colours scale linearly over [min, max]; a constant field is drawn in the
    lowest palette colour and annotated ``min = max``.
    """
    v = np.asarray(values, dtype=float)
    if v.ndim != 2 or v.size == 0:
        raise ValidationError(f"heatmap needs a non-empty 2-D field, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValidationError("heatmap values must be finite")
    if palette not in PALETTES:
        raise ValidationError(f"unknown palette '{palette}', expected one of {sorted(PALETTES)}")
    nx, ny = v.shape
    lo, hi = float(v.min()), float(v.max())
    span = hi - lo
    top = 24 if title else 4
    width, height = nx * cell_px, ny * cell_px
    legend_y = top + height + 8
    unit_s = f" {unit}" if unit else ""
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width + 8}" height="{legend_y + 40}" '
        f'font-family="monospace" font-size="11">',
    ]
    if title:
        out.append(f'<text x="4" y="16">{_escape(title)}</text>')
    for i in range(nx):
        for j in range(ny):
            u = 0.0 if span == 0 else (v[i, j] - lo) / span
            y = top + (ny - 1 - j) * cell_px
            out.append(f'<rect x="{4 + i * cell_px}" y="{y}" width="{cell_px}" height="{cell_px}" '
                       f'fill="{_color(palette, u)}"/>')
    n_swatch = 10
    sw = max(1, width // n_swatch)
    for k in range(n_swatch):
        out.append(f'<rect x="{4 + k * sw}" y="{legend_y}" width="{sw}" height="10" '
                   f'fill="{_color(palette, k / (n_swatch - 1))}"/>')
    out.append(f'<text x="4" y="{legend_y + 24}">min {fmt(lo)}{unit_s}</text>')
    out.append(f'<text x="4" y="{legend_y + 36}">max {fmt(hi)}{unit_s}'
               + (" (min = max)" if span == 0 else "") + "</text>")
    out.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(out) + "\n")
    return path


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def node_field(pdn, values, tier_index: int, layer: int = 0) -> np.ndarray:
    """Arrange per-node values of one (tier, layer) into a 2-D ``[i, j]`` array by x and y position."""
    nodes = pdn.layer_nodes(tier_index, layer)
    xs = np.unique(pdn.node_x[nodes])
    ys = np.unique(pdn.node_y[nodes])
    grid = np.full((len(xs), len(ys)), np.nan)
    grid[np.searchsorted(xs, pdn.node_x[nodes]), np.searchsorted(ys, pdn.node_y[nodes])] = np.asarray(values)[nodes]
    if np.isnan(grid).any():
        raise ValidationError("layer nodes do not form a full grid")
    return grid
