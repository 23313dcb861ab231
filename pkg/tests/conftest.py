import numpy as np
import pytest

from pdnrel import bundled_example
from pdnrel.core import Block, Floorplan, PowerTrace, TechParams, Tier
from pdnrel.pdn import VIA, WIRE, PdnGraph


def random_graph(rng, n_nodes, extra_edges=None, n_pads=1, n_sources=3, vdd=1.0, tech=TechParams()):
    """Connected random resistor network: a random spanning tree plus extra chords."""
    extra_edges = n_nodes if extra_edges is None else extra_edges
    pairs = set()
    order = rng.permutation(n_nodes)
    for k in range(1, n_nodes):
        a, b = int(order[k]), int(order[rng.integers(0, k)])
        pairs.add((min(a, b), max(a, b)))
    for _ in range(extra_edges):
        a, b = (int(v) for v in rng.choice(n_nodes, size=2, replace=False))
        pairs.add((min(a, b), max(a, b)))
    pairs = sorted(pairs)
    m = len(pairs)
    length = rng.uniform(10e-6, 200e-6, m)
    width = rng.uniform(0.5e-6, 5e-6, m)
    thick = np.full(m, tech.layer_thickness[0])
    pads = np.sort(rng.choice(n_nodes, size=n_pads, replace=False))
    free = np.setdiff1d(np.arange(n_nodes), pads)
    src = np.sort(rng.choice(free, size=min(n_sources, len(free)), replace=False))
    return PdnGraph(
        tier_ids=("t0",), n_layers=1, vdd=vdd, rho0=tech.rho0,
        node_tier=np.zeros(n_nodes, int), node_layer=np.zeros(n_nodes, int),
        node_x=rng.uniform(0, 1e-3, n_nodes), node_y=rng.uniform(0, 1e-3, n_nodes),
        edge_a=np.array([p[0] for p in pairs]), edge_b=np.array([p[1] for p in pairs]),
        edge_kind=np.full(m, WIRE), edge_tier=np.zeros(m, int), edge_layer=np.zeros(m, int),
        length=length, width=width, thickness=thick, resistance=tech.rho0 * length / (width * thick),
        pads=pads, source_nodes=src, source_currents=rng.uniform(1e-3, 1e-2, len(src)),
    )


def chain_graph(resistances, pad=0, sources=(), vdd=1.0, tech=TechParams(), width=1e-6):
    """Series chain 0-1-...-n with given edge resistances; geometry is back-solved from R."""
    r = np.asarray(resistances, dtype=float)
    m = len(r)
    t = tech.layer_thickness[0]
    length = r * width * t / tech.rho0
    nodes, currents = zip(*sources) if sources else ((), ())
    return PdnGraph(
        tier_ids=("t0",), n_layers=1, vdd=vdd, rho0=tech.rho0,
        node_tier=np.zeros(m + 1, int), node_layer=np.zeros(m + 1, int),
        node_x=np.arange(m + 1) * 1e-5, node_y=np.zeros(m + 1),
        edge_a=np.arange(m), edge_b=np.arange(1, m + 1), edge_kind=np.full(m, WIRE),
        edge_tier=np.zeros(m, int), edge_layer=np.zeros(m, int), length=length,
        width=np.full(m, width), thickness=np.full(m, t), resistance=r,
        pads=np.array([pad]), source_nodes=np.array(nodes, dtype=int), source_currents=np.array(currents, dtype=float),
    )


def floorplan(die=1e-3, tiers=1, blocks=()):
    ts = tuple(Tier(id=f"t{k}", z=k) for k in range(tiers))
    bs = tuple(Block(id=b[0], tier=b[1], x=b[2], y=b[3], w=b[4], h=b[5]) for b in blocks)
    return Floorplan(die_w=die, die_h=die, tiers=ts, blocks=bs)


def trace(block_ids, rows, dt=1.0):
    return PowerTrace(dt=dt, block_ids=tuple(block_ids), power=np.array(rows, dtype=float).reshape(len(rows), -1))


PIPELINE = (
    ["pdn"], ["ir", "--thermal"], ["thermal"], ["em", "--thermal"],
    ["surrogate", "gen", "--count", "400"], ["surrogate", "train", "--rounds", "20", "--subsample", "0.8"],
    ["surrogate", "eval"], ["surrogate", "screen"], ["optimize", "--iters", "5"], ["cosim"], ["report"],
)


def run_pipeline(out, jobs=1, seed=0):
    """Every CLI subcommand on the bundled example, each in its own subdirectory of ``out``.

    Surrogate steps share one directory so train/eval/screen find the dataset and model.
    Returns {step name: exit code}.
    """
    from pdnrel.cli import main

    codes = {}
    for step in PIPELINE:
        name = step[0]
        target = out / name
        if name == "report":
            extra = ["--from", str(out / "cosim")]
        else:
            extra = []
        argv = [*step, "--example", "two_tier", "--out", str(target), "--seed", str(seed), "--jobs", str(jobs),
                *extra]
        codes[" ".join(step[:2]) if name == "surrogate" else name] = main(argv)
    return codes


def output_files(out):
    """Relative path -> bytes for every output except the run manifest (which carries wall time)."""
    return {str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*"))
            if p.is_file() and p.name != "run.json"}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def example_dir():
    return bundled_example("two_tier")


__all__ = ["random_graph", "chain_graph", "floorplan", "trace", "run_pipeline", "output_files", "VIA"]
