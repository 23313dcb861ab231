"""Acceptance criteria 1-10, each at its stated tolerance.

Every test prints a single ``criterion N: PASS|FAIL`` line with the measured
numbers, then asserts. Run ``pytest tests/test_acceptance.py -v`` to see them.
"""

import math
import time

import numpy as np
import pytest

from pdnrel import bundled_example
from pdnrel.core import (Q_E, PowerMap, PowerTrace, TechParams, load_floorplan, load_power_trace, rasterize_power,
                         read_json)
from pdnrel.cosim import CoSimConfig, apply_dvfs, run_timeline
from pdnrel.em import (EmSegment, analyze_pdn, blech_check, drift_force, nucleation_time, nucleation_times,
                       spatial_mean, steady_state, transient_solve)
from pdnrel.ir import branch_currents, edge_temperature, ir_drop, kcl_residual
from pdnrel.optimize import SizingOptions, SizingProblem, optimize
from pdnrel.pdn import PdnConfig, allocate_pads, attach_current_sources, build_pdn, synthesize_pdn
from pdnrel.surrogate import (Hyper, SamplingConfig, gen_dataset, evaluate, hotspot_screen, pdn_features, predict,
                              train)
from pdnrel.thermal import (ThermalConfig, heat_to_ambient, solve_steady_temperature, transient_step,
                            uniform_field)

from conftest import chain_graph, floorplan, output_files, random_graph, run_pipeline, trace
from test_cosim import BRIDGE_FP, bridge, bridge_standalone_tnuc
from test_em import crank_nicolson_cathode
from test_ir import _grid_with_center_sink, dense_oracle
from test_optimize import corner_hotspot_mesh

TECH = TechParams()


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
        return ok
    return emit


def random_segments(count, seed):
    rng = np.random.default_rng(seed)
    return [EmSegment(k, rng.uniform(10e-6, 200e-6), 1e-6, 5e-7, rng.uniform(1e9, 5e10), rng.uniform(300, 420))
            for k in range(count)]


@pytest.fixture(scope="module")
def korhonen_runs():
    start = time.perf_counter()
    runs = [(s, transient_solve(s)) for s in random_segments(20, seed=2024)]
    return runs, time.perf_counter() - start


def test_criterion_1_steady_state(korhonen_runs, verdict):
    runs, elapsed = korhonen_runs
    worst = 0.0
    for s, h in runs:
        prof, smax = steady_state(s)
        assert h.times[-1] == pytest.approx(10 * s.tau / math.pi ** 2, rel=1e-12)
        worst = max(worst, float(np.max(np.abs(h.final.sigma - prof.sigma))) / smax)
    ok = worst <= 0.005 and elapsed < 10
    verdict(1, ok, f"max L-inf / sigma_max = {worst:.3e} (limit 5e-3), 20 segments in {elapsed:.2f} s (limit 10 s)")
    assert ok


def test_criterion_2_atom_conservation(korhonen_runs, verdict):
    runs, _ = korhonen_runs
    worst = 0.0
    for s, h in runs:
        scale = s.sigma_max + s.G * s.length
        m0 = spatial_mean(h.sigma[0])
        worst = max(worst, max(abs(spatial_mean(r) - m0) for r in h.sigma) / scale)
    ok = worst <= 1e-9
    verdict(2, ok, f"max mean drift / (sigma_max + G L) = {worst:.3e} (limit 1e-9)")
    assert ok


def test_criterion_3_early_time_law(verdict):
    fracs = np.array([1e-3, 2e-3, 5e-3, 1e-2])
    oracle_err, solver_err, solver_vs_oracle = 0.0, 0.0, 0.0
    for s in random_segments(3, seed=7):
        times = fracs * s.tau
        law = 2 * s.G * np.sqrt(s.kappa * times / math.pi)
        oracle = crank_nicolson_cathode(s, 10 * (s.n_points - 1) + 1, times)
        oracle_err = max(oracle_err, float(np.max(np.abs(oracle / law - 1))))
        for t, lw, orc in zip(times, law, oracle):
            got = transient_solve(s, dt=t / 200, t_end=t).final.sigma[0]
            solver_err = max(solver_err, abs(got / lw - 1))
            solver_vs_oracle = max(solver_vs_oracle, abs(got / orc - 1))
    ok = oracle_err <= 0.02 and solver_err <= 0.02 and solver_vs_oracle <= 0.02
    verdict(3, ok, f"fine-grid oracle vs law {oracle_err:.2e}, solver vs law {solver_err:.2e}, "
                   f"solver vs oracle {solver_vs_oracle:.2e} (limit 2e-2) for t/tau in [1e-3, 1e-2]")
    assert ok


def test_criterion_4_blech_consistency(verdict):
    rng = np.random.default_rng(99)
    mismatches, mortal = 0, 0
    for k in range(200):
        L = rng.uniform(10e-6, 200e-6)
        T = rng.uniform(300, 420)
        # aim sigma_max in [0.5, 1.5] sigma_crit, and hit the tie exactly now and then
        target = TECH.sigma_crit * (1.0 if k % 25 == 0 else rng.uniform(0.5, 1.5))
        j = 2 * target * TECH.Omega / (Q_E * TECH.Zstar * TECH.resistivity(T) * L)
        s = EmSegment(k, L, 1e-6, 5e-7, j, T)
        _, smax = steady_state(s)
        flag = blech_check(s)
        t_nuc = nucleation_time(s)
        if not (flag == (smax < TECH.sigma_crit) == (t_nuc == math.inf)):
            mismatches += 1
        mortal += not flag
    ok = mismatches == 0 and 0 < mortal < 200
    verdict(4, ok, f"{mismatches} inconsistent of 200 ({mortal} mortal, {200 - mortal} immortal)")
    assert ok


def test_criterion_5_ir_solver(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    worst_rel, worst_kcl = 0.0, 0.0
    for _ in range(50):
        n = int(rng.integers(3, 201))
        g = random_graph(rng, n, extra_edges=int(rng.integers(0, n)), n_pads=int(rng.integers(1, 4)), n_sources=5)
        res = ir_drop(g, TECH)
        v = dense_oracle(g, res.resistance)
        worst_rel = max(worst_rel, float(np.max(np.abs(res.voltage - v)) / np.max(np.abs(v))))
        kcl = kcl_residual(g, branch_currents(g, res))
        worst_kcl = max(worst_kcl, float(np.max(np.abs(kcl)) / g.total_current()))
    worst_sym = 0.0
    for n in (4, 5, 8):
        g = _grid_with_center_sink(n)
        v = ir_drop(g, TECH, 300.0).voltage
        key = {(round(x, 9), round(y, 9)): k for k, (x, y) in enumerate(zip(g.node_x, g.node_y))}
        for f in (lambda x, y: (1e-3 - x, y), lambda x, y: (x, 1e-3 - y), lambda x, y: (y, x)):
            for k, (x, y) in enumerate(zip(g.node_x, g.node_y)):
                mx, my = f(x, y)
                worst_sym = max(worst_sym, abs(v[k] - v[key[(round(mx, 9), round(my, 9))]]) / g.vdd)
    elapsed = time.perf_counter() - start
    ok = worst_rel <= 1e-8 and worst_kcl <= 1e-9 and worst_sym <= 1e-10 and elapsed < 30
    verdict(5, ok, f"CG vs dense {worst_rel:.2e} (1e-8), KCL {worst_kcl:.2e} (1e-9), "
                   f"symmetry {worst_sym:.2e} (1e-10), {elapsed:.2f} s (30 s)")
    assert ok


def _maps(power, die=1e-3):
    p = np.asarray(power, dtype=float)
    area = die * die / (p.shape[1] * p.shape[2])
    return {f"t{k}": PowerMap(f"t{k}", die, die, p[k] / area) for k in range(len(p))}


def test_criterion_6_thermal(verdict):
    cfg = ThermalConfig()
    zero = solve_steady_temperature(_maps(np.zeros((3, 6, 5))), cfg)
    exact_amb = bool(np.all(zero.values == cfg.T_amb))
    one = ThermalConfig(T_amb=300.0, g_amb=0.1)
    single = solve_steady_temperature(_maps([[[0.75]]]), one).values[0, 0, 0]
    single_ok = single == 300.0 + 0.75 / 0.1
    rng = np.random.default_rng(6)
    balance = 0.0
    for sink in ("top", "bottom", "both"):
        p = rng.uniform(0, 0.5, (3, 7, 6))
        c = ThermalConfig(heat_sink=sink)
        T = solve_steady_temperature(_maps(p), c)
        balance = max(balance, abs(heat_to_ambient(T, c) / p.sum() - 1))
    pm = _maps(rng.uniform(0, 0.5, (2, 6, 6)))
    steady = solve_steady_temperature(pm, cfg)
    fixed = float(np.max(np.abs(transient_step(steady, pm, 1e-3, cfg).values - steady.values)))
    far = transient_step(uniform_field(("t0", "t1"), 1e-3, 1e-3, 6, 6, cfg.T_amb), pm, 1e12, cfg)
    limit = float(np.max(np.abs(far.values - steady.values)))
    ok = exact_amb and single_ok and balance <= 1e-8 and fixed <= 1e-9 and limit <= 1e-6
    verdict(6, ok, f"zero power exact={exact_amb}, single cell {float(single)} K exact={single_ok}, "
                   f"energy balance {balance:.2e} (1e-8), fixed point {fixed:.2e} K, dt->inf {limit:.2e} K")
    assert ok


def _recall_mesh():
    die = 2e-3
    fp = floorplan(die=die, blocks=[("a", "t0", 0, 0, 6e-4, 8e-4), ("b", "t0", 1.1e-3, 9e-4, 7e-4, 9e-4),
                                    ("c", "t0", 0, 0, die, die)])
    pm = rasterize_power(fp, trace(["a", "b", "c"], [[0.15, 0.09, 0.06]]), 0, 16, 16)
    g = build_pdn(fp, TECH, PdnConfig(pitch=(die / 16, die / 15), width=(2e-6, 2e-6), pad_count=4), pm)
    node_T = solve_steady_temperature(pm, ThermalConfig()).sample(g.node_tier, g.node_x, g.node_y)
    return g, node_T


def test_criterion_7_surrogate(verdict):
    start = time.perf_counter()
    data = gen_dataset(SamplingConfig(count=10_000, seed=0))
    tr, te = data.split(0.8)
    model = train(tr, Hyper())
    r2 = evaluate(model, te)["r2"]
    hist = np.array(model.train_rmse)
    monotone = bool(np.all(np.diff(hist) <= 0))

    seg = EmSegment(0, 50e-6, 1e-6, 5e-7, 2e10, 350.0)
    t0 = time.perf_counter()
    transient_solve(seg)
    physics = time.perf_counter() - t0
    rows = te.features[:500]
    t0 = time.perf_counter()
    for r in rows:
        predict(model, r)
    query = (time.perf_counter() - t0) / len(rows)
    speedup = physics / query

    g, node_T = _recall_mesh()
    res = analyze_pdn(g, branch_currents(g, ir_drop(g, TECH, node_T)), node_T, TECH)
    ids = np.array([r.segment_id for r in res])
    smax = np.array([r.sigma_max for r in res])
    true_top = set(ids[np.lexsort((ids, -smax))][:10].tolist())
    cur = branch_currents(g, ir_drop(g, TECH, node_T))
    Te = edge_temperature(g, node_T)
    screened = {s for s, _ in hotspot_screen(ids, pdn_features(cur.density[ids], Te[ids], TECH), model, top_k=20)}
    recall = len(true_top & screened)
    elapsed = time.perf_counter() - start
    ok = r2 >= 0.95 and monotone and speedup >= 100 and recall >= 8 and elapsed < 120
    verdict(7, ok, f"held-out R2 {r2:.4f} (>= 0.95), RMSE monotone={monotone}, speedup {speedup:.0f}x (>= 100), "
                   f"recall {recall}/10 on {len(ids)} segments (>= 8), {elapsed:.1f} s (120 s)")
    assert ok


def test_criterion_8_optimizer(verdict):
    start = time.perf_counter()
    pdn = corner_hotspot_mesh()
    problem = SizingProblem(pdn, TECH)
    result = optimize(problem, iters=50)
    obj = [h["objective"] for h in result.history]
    monotone = all(b <= a for a, b in zip(obj, obj[1:]))
    feasible = all(h["area"] <= problem.budget * (1 + 1e-9) for h in result.history) and \
        problem.is_feasible(result.vars)

    beta, w_ir, w_em = 2.0, 0.6, 0.4
    one = SizingProblem(chain_graph([3.0], pad=0, sources=[(1, 0.01)]), TECH,
                        options=SizingOptions(beta=beta, w_ir=w_ir, w_em=w_em))
    worst_d = 0.0
    for m in (0.7, 1.0, 1.3, 2.5):
        hand = -(w_ir / (1 + math.exp(-beta / m)) + w_em) / m ** 2
        worst_d = max(worst_d, abs(one.gradient([m])[0] / hand - 1))
    elapsed = time.perf_counter() - start
    ok = obj[-1] <= obj[0] and monotone and feasible and worst_d <= 1e-4 and elapsed < 60
    verdict(8, ok, f"objective {obj[0]:.6f} -> {obj[-1]:.6f} over {len(obj) - 1} steps, monotone={monotone}, "
                   f"feasible={feasible}, hand derivative rel err {worst_d:.2e} (1e-4), {elapsed:.2f} s (60 s)")
    assert ok


def test_criterion_9_cosim(verdict):
    start = time.perf_counter()
    ex = bundled_example("two_tier")
    fp = load_floorplan(ex / "floorplan.json")
    tr = load_power_trace(ex / "trace.csv", fp)
    pc = PdnConfig.from_dict(read_json(ex / "pdn_config.json"))
    th = ThermalConfig.from_dict(read_json(ex / "thermal_config.json"))
    cfg = CoSimConfig.from_dict(read_json(ex / "cosim_config.json"))
    pdn = allocate_pads(synthesize_pdn(fp, TECH, pc), pc)

    zero = PowerTrace(dt=tr.dt, block_ids=tr.block_ids, power=np.zeros_like(tr.power))
    z = run_timeline(fp, zero, cfg, TECH, pc, th, pdn=pdn)
    zero_ok = all(r.iterations == 1 and np.all(r.increment == 0) and np.all(r.damage == 0) for r in z.records)

    flat = CoSimConfig(temperature_feedback=False, joule_heating=False, degradation="none", nx=cfg.nx, ny=cfg.ny)
    d = run_timeline(fp, tr, flat, TECH, pc, th, pdn=pdn)
    wires = np.flatnonzero(pdn.wire_mask & (pdn.length > 0))
    damage = np.zeros(len(wires))
    exact = True
    for k, rec in enumerate(d.records):
        pm = rasterize_power(fp, tr, k, cfg.nx, cfg.ny)
        g = attach_current_sources(pdn, pm)
        ir = ir_drop(g, TECH, flat.fixed_temperature)
        j = branch_currents(g, ir).density[wires]
        t_nuc = nucleation_times(drift_force(j, flat.fixed_temperature, TECH), g.length[wires],
                                 flat.fixed_temperature, TECH)
        damage = damage + np.where(np.isfinite(t_nuc), tr.dt / t_nuc, 0.0)
        exact &= bool(np.array_equal(rec.temperature.values, solve_steady_temperature(pm, th).values))
        exact &= rec.worst_drop == ir.worst_drop and bool(np.array_equal(rec.damage, damage))

    base = run_timeline(fp, tr, cfg, TECH, pc, th, pdn=pdn)
    slow = run_timeline(fp, apply_dvfs(tr, {b: (0.9, 0.8) for b in tr.block_ids}), cfg, TECH, pc, th, pdn=pdn)
    dvfs_ok = slow.lifetime_s >= base.lifetime_s

    bcfg = CoSimConfig(nx=4, ny=4)
    t_nuc, _ = bridge_standalone_tnuc(bcfg)
    dt = t_nuc / 7.3
    under = run_timeline(BRIDGE_FP, trace(["b"], [[0.005]] * 10, dt=dt), bcfg, TECH, pdn=bridge())
    gap = abs(under.lifetime_s - t_nuc)
    elapsed = time.perf_counter() - start
    ok = zero_ok and exact and dvfs_ok and gap <= dt and elapsed < 60
    verdict(9, ok, f"zero power 1 iter / 0 damage={zero_ok}, decoupled exact={exact}, "
                   f"DVFS lifetime {slow.lifetime_s:.4g} s >= baseline {base.lifetime_s:.4g} s: {dvfs_ok}, "
                   f"undersized |lifetime - t_nuc| = {gap / dt:.3f} intervals (<= 1), {elapsed:.2f} s (60 s)")
    assert ok


def test_criterion_10_reproducibility(tmp_path, verdict):
    codes = [run_pipeline(tmp_path / "a", jobs=1, seed=3), run_pipeline(tmp_path / "b", jobs=1, seed=3),
             run_pipeline(tmp_path / "c", jobs=8, seed=3)]
    all_zero = all(set(c.values()) == {0} for c in codes)
    a, b, c = (output_files(tmp_path / k) for k in "abc")
    diff_rerun = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    diff_jobs = sorted(k for k in a.keys() | c.keys() if a.get(k) != c.get(k))
    ok = all_zero and not diff_rerun and not diff_jobs and len(a) > 20
    verdict(10, ok, f"{len(codes[0])} subcommands, {len(a)} output files, rerun diffs {diff_rerun or 'none'}, "
                    f"--jobs 1 vs 8 diffs {diff_jobs or 'none'}")
    assert ok

