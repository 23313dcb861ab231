"""Command-line front end: ``pdnrel <subcommand> [flags]``.

Exit codes: 0 success, 1 invalid input or usage, 2 numerical failure.
Errors go to stderr as ``error[CODE]: message``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__, bundled_example
from .core import TechParams, load_floorplan, load_power_trace, load_tech, rasterize_power, read_json
from .cosim import CoSimConfig, apply_dvfs, run_timeline
from .em import EmConfig, analyze_pdn
from .errors import NumericalError, PdnRelError, ValidationError
from .ir import DEFAULT_TEMPERATURE, branch_currents, ir_drop, kcl_residual
from .optimize import SizingOptions, SizingProblem, optimize
from .pdn import PdnConfig, allocate_pads, attach_current_sources, synthesize_pdn
from .report import (emit_heatmap, node_field, write_branch_currents, write_csv, write_em_results, write_json,
                     write_temperature, write_voltages)
from .surrogate import (Dataset, Hyper, SamplingConfig, SurrogateModel, evaluate, gen_dataset, hotspot_screen,
                        pdn_features, train)
from .thermal import ThermalConfig, heat_to_ambient, solve_steady_temperature

INPUT_FLAGS = ("floorplan", "trace", "tech", "pdn_config", "thermal_config", "cosim_config")
EXAMPLE_FILES = {"floorplan": "floorplan.json", "trace": "trace.csv", "pdn_config": "pdn_config.json",
                 "thermal_config": "thermal_config.json", "cosim_config": "cosim_config.json"}


class UsageError(ValidationError):
    code = "E_USAGE"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("inputs")
    g.add_argument("--floorplan", type=Path, help="floorplan JSON")
    g.add_argument("--trace", type=Path, help="power trace CSV")
    g.add_argument("--tech", type=Path, help="technology parameters JSON")
    g.add_argument("--pdn-config", type=Path, help="PDN synthesis config JSON")
    g.add_argument("--thermal-config", type=Path, help="thermal model config JSON")
    g.add_argument("--cosim-config", type=Path, help="co-simulation config JSON")
    g.add_argument("--example", choices=["two_tier"], help="fill unset inputs from a bundled example")
    o = common.add_argument_group("run")
    o.add_argument("--out", type=Path, help="output directory (default: $PDNREL_OUT, else ./pdnrel_out)")
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--jobs", type=_positive_int, default=1, help="parallelism cap; results do not depend on it")
    o.add_argument("--t-index", type=int, default=0, help="trace sample used by single-snapshot analyses")
    o.add_argument("--grid", type=_positive_int, nargs=2, default=(16, 16), metavar=("NX", "NY"),
                   help="power/thermal grid resolution")

    root = _Parser(prog="pdnrel", description="PDN reliability toolkit for stacked dies.")
    root.add_argument("--version", action="version", version=f"pdnrel {__version__}")
    sub = root.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_, parent=sub):
        return parent.add_parser(name, parents=[common], help=help_, description=help_)

    add("pdn", "synthesise the PDN mesh and allocate pads")

    p = add("ir", "static IR drop at one trace sample")
    p.add_argument("--temperature", type=float, default=DEFAULT_TEMPERATURE, help="uniform metal temperature (K)")
    p.add_argument("--thermal", action="store_true", help="use the thermal solution instead of --temperature")

    add("thermal", "steady temperature field at one trace sample")

    p = add("em", "per-segment EM stress and nucleation times")
    p.add_argument("--temperature", type=float, default=DEFAULT_TEMPERATURE)
    p.add_argument("--thermal", action="store_true")

    sp = sub.add_parser("surrogate", help="learned EM stress predictor")
    ss = sp.add_subparsers(dest="action", required=True, metavar="ACTION")
    p = add("gen", "generate a labelled dataset", ss)
    p.add_argument("--count", type=int, default=10_000)
    p.add_argument("--mode", choices=["steady", "transient"], default="steady")
    p.add_argument("--t-query", type=float, default=0.05)
    for name, help_ in (("train", "train the boosted-tree model"), ("eval", "held-out metrics")):
        p = add(name, help_, ss)
        p.add_argument("--data", type=Path, help="dataset CSV (default: <out>/dataset.csv)")
        p.add_argument("--train-fraction", type=float, default=0.8)
        if name == "train":
            p.add_argument("--rounds", type=int, default=200)
            p.add_argument("--depth", type=int, default=4)
            p.add_argument("--learning-rate", type=float, default=0.1)
            p.add_argument("--min-leaf", type=int, default=5)
            p.add_argument("--subsample", type=float, default=1.0)
        else:
            p.add_argument("--model", type=Path, help="model JSON (default: <out>/model.json)")
    p = add("screen", "rank PDN segments by predicted stress", ss)
    p.add_argument("--model", type=Path)
    p.add_argument("--top-k", type=int, default=20)
    p.add_argument("--temperature", type=float, default=DEFAULT_TEMPERATURE)

    p = add("optimize", "wire-width sizing under an area budget")
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--budget-scale", type=float, default=1.0, help="budget as a multiple of the baseline area")
    p.add_argument("--m-min", type=float, default=0.25)
    p.add_argument("--m-max", type=float, default=4.0)
    p.add_argument("--w-ir", type=float, default=0.5)
    p.add_argument("--w-em", type=float, default=0.5)
    p.add_argument("--temperature", type=float, default=DEFAULT_TEMPERATURE)

    p = add("cosim", "thermal/electrical/EM co-simulation over the trace")
    p.add_argument("--dvfs", type=Path, help="DVFS policy JSON: {block: {v_scale, f_scale}}")
    p.add_argument("--cycles", type=_positive_int, help="passes over the trace (overrides the config)")

    p = add("report", "SVG heatmaps and an index for an output directory")
    p.add_argument("--from", dest="source", type=Path, help="directory with earlier outputs (default: --out)")
    return root


class Run:
    """Resolved inputs, output directory and manifest bookkeeping for one invocation."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = list(argv)
        if args.example:
            base = bundled_example(args.example)
            for key, name in EXAMPLE_FILES.items():
                if getattr(args, key) is None:
                    setattr(args, key, base / name)
        for key in INPUT_FLAGS:
            path = getattr(args, key, None)
            if path is not None and not Path(path).is_file():
                raise ValidationError(f"file not found: {path}")
        out = args.out or os.environ.get("PDNREL_OUT") or "pdnrel_out"
        self.out = Path(out)
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ValidationError(f"cannot create output directory {self.out}: {exc.strerror}") from exc
        self.outputs = []
        self.extra_inputs = {}
        self.started = time.perf_counter()

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out / name

    def need(self, key: str):
        value = getattr(self.args, key, None)
        if value is None:
            raise UsageError(f"--{key.replace('_', '-')} is required for '{self.label}'")
        return value

    @property
    def label(self) -> str:
        a = self.args
        return a.command + (f" {a.action}" if getattr(a, "action", None) else "")

    @property
    def tech(self) -> TechParams:
        return load_tech(self.args.tech) if self.args.tech else TechParams()

    def config(self, key: str, cls):
        path = getattr(self.args, key)
        if path is None:
            return cls()
        d = read_json(path)
        if not isinstance(d, dict):
            raise ValidationError(f"{path}: expected a JSON object")
        return cls.from_dict(d)

    def floorplan(self):
        return load_floorplan(self.need("floorplan"))

    def trace(self, fp):
        return load_power_trace(self.need("trace"), fp)

    def pmaps(self, fp, trace):
        t = self.args.t_index
        if not (0 <= t < len(trace)):
            raise ValidationError(f"--t-index {t} outside the trace (0..{len(trace) - 1})")
        return rasterize_power(fp, trace, t, *self.args.grid)

    def pdn(self, fp, tech, pmaps=None):
        cfg = self.config("pdn_config", PdnConfig)
        g = allocate_pads(synthesize_pdn(fp, tech, cfg), cfg)
        return attach_current_sources(g, pmaps, cfg.vdd) if pmaps is not None else g

    def manifest(self, status: str = "ok", error: str | None = None) -> None:
        a = self.args
        inputs = {}
        for key in INPUT_FLAGS:
            p = getattr(a, key, None)
            if p is not None:
                inputs[key] = {"path": str(p), "sha256": _sha256(p)}
        for key, p in self.extra_inputs.items():
            inputs[key] = {"path": str(p), "sha256": _sha256(p)}
        doc = {
            "command": self.label, "argv": self.argv, "status": status, "inputs": inputs, "seed": a.seed,
            "jobs": a.jobs, "t_index": a.t_index, "outputs": sorted(set(self.outputs)),
            "versions": {"pdnrel": __version__, "python": platform.python_version(), "numpy": np.__version__,
                         "scipy": scipy.__version__},
            "wall_time_s": round(time.perf_counter() - self.started, 6),
        }
        if error:
            doc["error"] = error
        (self.out / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _node_temperature(run: Run, fp, trace, pdn, pmaps):
    if getattr(run.args, "thermal", False):
        field = solve_steady_temperature(pmaps, run.config("thermal_config", ThermalConfig))
        return field.sample(pdn.node_tier, pdn.node_x, pdn.node_y)
    return run.args.temperature


def cmd_pdn(run: Run):
    fp, tech = run.floorplan(), run.tech
    pmaps = run.pmaps(fp, run.trace(fp)) if run.args.trace else None
    g = run.pdn(fp, tech, pmaps)
    g.validate()
    g.save(run.path("pdn.json"))
    write_json(run.path("summary.json"), {
        "nodes": g.n_nodes, "edges": g.n_edges, "wires": int(g.wire_mask.sum()),
        "vias": int((~g.wire_mask).sum()), "pads": len(g.pads), "tiers": list(g.tier_ids),
        "layers": g.n_layers, "total_current_A": g.total_current(), "wire_volume_m3": g.wire_volume(),
    })


def cmd_ir(run: Run):
    fp, tech = run.floorplan(), run.tech
    trace = run.trace(fp)
    pmaps = run.pmaps(fp, trace)
    g = run.pdn(fp, tech, pmaps)
    ir = ir_drop(g, tech, _node_temperature(run, fp, trace, g, pmaps))
    cur = branch_currents(g, ir)
    write_voltages(run.path("voltages.csv"), g, ir)
    write_branch_currents(run.path("branch_currents.csv"), g, cur)
    total = g.total_current()
    kcl = float(np.max(np.abs(kcl_residual(g, cur)))) if g.n_nodes else 0.0
    write_json(run.path("summary.json"), {
        "worst_drop_V": ir.worst_drop, "worst_node": ir.worst_node, "vdd_V": g.vdd, "total_current_A": total,
        "max_wire_j_A_per_m2": float(cur.density[g.wire_mask].max()) if g.wire_mask.any() else 0.0,
        "kcl_residual_rel": kcl / total if total > 0 else kcl,
    })
    for t, tid in enumerate(g.tier_ids):
        emit_heatmap(node_field(g, ir.drop, t, 0), run.path(f"ir_drop_{tid}.svg"), title=f"IR drop, tier {tid}",
                     unit="V")


def cmd_thermal(run: Run):
    fp = run.floorplan()
    pmaps = run.pmaps(fp, run.trace(fp))
    cfg = run.config("thermal_config", ThermalConfig)
    T = solve_steady_temperature(pmaps, cfg)
    write_temperature(run.path("temperature.csv"), T)
    power = sum(pm.total_power() for pm in pmaps.values())
    write_json(run.path("summary.json"), {
        "peak_T_K": float(T.values.max()), "min_T_K": float(T.values.min()),
        "tier_max_T_K": {tid: float(T.values[k].max()) for k, tid in enumerate(T.tier_ids)},
        "power_W": power, "heat_to_ambient_W": heat_to_ambient(T, cfg),
    })
    for k, tid in enumerate(T.tier_ids):
        emit_heatmap(T.values[k], run.path(f"temperature_{tid}.svg"), title=f"Temperature, tier {tid}", unit="K")


def cmd_em(run: Run):
    fp, tech = run.floorplan(), run.tech
    trace = run.trace(fp)
    pmaps = run.pmaps(fp, trace)
    g = run.pdn(fp, tech, pmaps)
    node_T = _node_temperature(run, fp, trace, g, pmaps)
    ir = ir_drop(g, tech, node_T)
    results = analyze_pdn(g, branch_currents(g, ir), node_T, tech, EmConfig())
    write_em_results(run.path("em_results.csv"), results)
    mortal = [r for r in results if not r.blech_immortal]
    write_json(run.path("summary.json"), {
        "segments": len(results), "mortal": len(mortal), "immortal": len(results) - len(mortal),
        "min_t_nuc_s": mortal[0].t_nuc if mortal else float("inf"),
        "first_failing_edge": mortal[0].segment_id if mortal else None,
        "max_sigma_Pa": max((r.sigma_max for r in results), default=0.0),
    })


def _dataset_path(run: Run) -> Path:
    p = run.args.data or run.out / "dataset.csv"
    run.extra_inputs["data"] = p
    return p


def _model_path(run: Run) -> Path:
    p = run.args.model or run.out / "model.json"
    run.extra_inputs["model"] = p
    return p


def cmd_surrogate(run: Run):
    a = run.args
    if a.action == "gen":
        data = gen_dataset(SamplingConfig(count=a.count, seed=a.seed, mode=a.mode, t_query=a.t_query), run.tech)
        data.save_csv(run.path("dataset.csv"))
        write_json(run.path("summary.json"), {"rows": len(data), "mode": a.mode, "seed": a.seed})
    elif a.action == "train":
        data = Dataset.load_csv(_dataset_path(run))
        tr, _ = data.split(a.train_fraction)
        hyper = Hyper(rounds=a.rounds, depth=a.depth, learning_rate=a.learning_rate, min_leaf=a.min_leaf,
                      subsample=a.subsample, seed=a.seed)
        model = train(tr, hyper)
        model.save(run.path("model.json"))
        write_csv(run.path("train_history.csv"), ["round", "train_rmse_Pa"], enumerate(model.train_rmse))
        write_json(run.path("summary.json"), {"rows": len(tr), "rounds": len(model.trees),
                                              "final_train_rmse_Pa": model.train_rmse[-1]})
    elif a.action == "eval":
        model = SurrogateModel.load(_model_path(run))
        _, held = Dataset.load_csv(_dataset_path(run)).split(a.train_fraction)
        write_json(run.path("metrics.json"), evaluate(model, held))
    else:
        model = SurrogateModel.load(_model_path(run))
        fp, tech = run.floorplan(), run.tech
        pmaps = run.pmaps(fp, run.trace(fp))
        g = run.pdn(fp, tech, pmaps)
        ir = ir_drop(g, tech, a.temperature)
        cur = branch_currents(g, ir)
        wires = np.flatnonzero(g.wire_mask)
        ranked = hotspot_screen(wires, pdn_features(cur.density[wires], a.temperature, tech), model, a.top_k)
        write_csv(run.path("hotspots.csv"), ["rank", "edge", "predicted_sigma_Pa"],
                  ((k + 1, e, s) for k, (e, s) in enumerate(ranked)))


def cmd_optimize(run: Run):
    a = run.args
    fp, tech = run.floorplan(), run.tech
    g = run.pdn(fp, tech, run.pmaps(fp, run.trace(fp)))
    opts = SizingOptions(m_min=a.m_min, m_max=a.m_max, w_ir=a.w_ir, w_em=a.w_em, jobs=a.jobs)
    base = SizingProblem(g, tech, temperature=a.temperature, options=opts)
    problem = base if a.budget_scale == 1.0 else SizingProblem(
        g, tech, budget=a.budget_scale * base.budget, temperature=a.temperature, options=opts)
    res = optimize(problem, iters=a.iters)
    res.save_history(run.path("history.csv"))
    widths = [(g.tier_ids[t], l, m, _layer_width(g, t, l) * m) for (t, l), m in zip(problem.groups, res.vars)]
    write_csv(run.path("multipliers.csv"), ["tier", "layer", "multiplier", "width_m"], widths)
    res.pdn.save(run.path("pdn_optimized.json"))
    first, last = res.history[0], res.history[-1]
    write_json(run.path("summary.json"), {
        "reason": res.reason, "iterations": len(res.history) - 1, "initial_objective": first["objective"],
        "final_objective": last["objective"], "initial_worst_drop_V": first["worst_drop"],
        "final_worst_drop_V": last["worst_drop"], "initial_worst_sigma_Pa": first["worst_sigma"],
        "final_worst_sigma_Pa": last["worst_sigma"], "area_m3": last["area"], "budget_m3": problem.budget,
    })


def _layer_width(g, t, layer) -> float:
    mask = (g.edge_tier == t) & (g.edge_layer == layer) & g.wire_mask
    return float(g.width[mask][0])


def cmd_cosim(run: Run):
    a = run.args
    fp, tech = run.floorplan(), run.tech
    trace = run.trace(fp)
    cfg = run.config("cosim_config", CoSimConfig)
    cfg = replace(cfg, nx=a.grid[0], ny=a.grid[1], **({"cycles": a.cycles} if a.cycles else {}))
    if a.dvfs:
        run.extra_inputs["dvfs"] = a.dvfs
        trace = apply_dvfs(trace, read_json(a.dvfs))
    tl = run_timeline(fp, trace, cfg, tech, run.config("pdn_config", PdnConfig),
                      run.config("thermal_config", ThermalConfig))
    tl.save_csv(run.path("timeline.csv"))
    write_json(run.path("lifetime.json"), tl.summary())
    if tl.records:
        write_temperature(run.path("temperature_final.csv"), tl.records[-1].temperature)


def _read_rows(path: Path):
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_report(run: Run):
    src = run.args.source or run.out
    if not src.is_dir():
        raise ValidationError(f"directory not found: {src}")
    # relative, so the report does not depend on where the run tree lives
    index = {"source": os.path.relpath(src, run.out), "heatmaps": [], "summaries": {}}
    for name in ("temperature.csv", "temperature_final.csv"):
        if (src / name).is_file():
            rows = _read_rows(src / name)
            for tid in sorted({r["tier"] for r in rows}):
                sel = [r for r in rows if r["tier"] == tid]
                nx = max(int(r["i"]) for r in sel) + 1
                ny = max(int(r["j"]) for r in sel) + 1
                grid = np.zeros((nx, ny))
                for r in sel:
                    grid[int(r["i"]), int(r["j"])] = float(r["T_K"])
                out = f"report_{name[:-4]}_{tid}.svg"
                emit_heatmap(grid, run.path(out), title=f"Temperature, tier {tid}", unit="K")
                index["heatmaps"].append(out)
    if (src / "voltages.csv").is_file():
        rows = [r for r in _read_rows(src / "voltages.csv") if r["layer"] == "0"]
        for tid in sorted({r["tier"] for r in rows}):
            sel = [r for r in rows if r["tier"] == tid]
            xs = sorted({float(r["x_m"]) for r in sel})
            ys = sorted({float(r["y_m"]) for r in sel})
            grid = np.zeros((len(xs), len(ys)))
            for r in sel:
                grid[xs.index(float(r["x_m"])), ys.index(float(r["y_m"]))] = float(r["drop_V"])
            out = f"report_ir_drop_{tid}.svg"
            emit_heatmap(grid, run.path(out), title=f"IR drop, tier {tid}", unit="V")
            index["heatmaps"].append(out)
    for name in ("summary.json", "lifetime.json", "metrics.json"):
        if (src / name).is_file():
            index["summaries"][name] = json.loads((src / name).read_text())
    if not index["heatmaps"] and not index["summaries"]:
        raise ValidationError(f"no reportable outputs in {src}")
    write_json(run.path("report.json"), index)


COMMANDS = {"pdn": cmd_pdn, "ir": cmd_ir, "thermal": cmd_thermal, "em": cmd_em, "surrogate": cmd_surrogate,
            "optimize": cmd_optimize, "cosim": cmd_cosim, "report": cmd_report}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    run = None
    try:
        args = build_parser().parse_args(argv)
        run = Run(args, argv)
        COMMANDS[args.command](run)
        run.manifest()
        return 0
    except PdnRelError as exc:
        err = exc
    except (OSError, ValueError) as exc:
        err = ValidationError(str(exc))
    status = 2 if isinstance(err, NumericalError) else 1
    print(f"error[{err.code}]: {err}", file=sys.stderr)
    if run is not None:
        try:
            run.manifest(status="error", error=f"{err.code}: {err}")
        except OSError:
            pass
    return status


if __name__ == "__main__":
    sys.exit(main())

