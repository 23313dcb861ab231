import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from pdnrel.core import TechParams
from pdnrel.errors import ConvergenceError, ValidationError
from pdnrel.ir import (DEFAULT_TEMPERATURE, assemble, branch_currents, edge_temperature, ir_drop, joule_power,
                       kcl_residual, scaled_resistance, solve_spd)
from pdnrel.pdn import PdnConfig, build_pdn

from conftest import chain_graph, floorplan, random_graph

TECH = TechParams()


def dense_oracle(pdn, resistance):
    """Independent nodal solve: full Laplacian, pads pinned at Vdd, Cholesky on the free block."""
    n = pdn.n_nodes
    L = np.zeros((n, n))
    for a, b, r in zip(pdn.edge_a, pdn.edge_b, resistance):
        g = 1.0 / r
        L[a, a] += g
        L[b, b] += g
        L[a, b] -= g
        L[b, a] -= g
    pads = np.zeros(n, bool)
    pads[pdn.pads] = True
    free = ~pads
    inj = -pdn.source_vector()
    rhs = inj[free] - L[np.ix_(free, pads)] @ np.full(pads.sum(), pdn.vdd)
    v = np.full(n, pdn.vdd)
    v[free] = sla.cho_solve(sla.cho_factor(L[np.ix_(free, free)]), rhs)
    return v


def test_single_resistor_system():
    g = chain_graph([1.0], pad=0, sources=[(1, 1.0)])
    sys_ = assemble(g)
    assert sys_.matrix.toarray().tolist() == [[1.0]]
    assert sys_.rhs.tolist() == [0.0]
    assert solve_spd(sys_)[0] == pytest.approx(0.0, abs=1e-15)


def test_two_node_series_hand_assembly():
    # pad 0 --g1=2-- node 1 --g2=4-- node 2, sinks 0.5 A at 1 and 0.25 A at 2
    g = chain_graph([0.5, 0.25], pad=0, sources=[(1, 0.5), (2, 0.25)])
    s = assemble(g)
    np.testing.assert_allclose(s.matrix.toarray(), [[6.0, -4.0], [-4.0, 4.0]], rtol=1e-15)
    np.testing.assert_allclose(s.rhs, [2.0 * 1.0 - 0.5, -0.25], rtol=1e-15)
    v = solve_spd(s)
    np.testing.assert_allclose(v, np.linalg.solve(s.matrix.toarray(), s.rhs), rtol=1e-12)


def test_floating_node_rejected():
    g = chain_graph([1.0, 1.0], pad=0)
    keep = np.array([True, False])
    cut = type(g)(**{**g.__dict__, **{k: getattr(g, k)[keep] for k in
                                       ("edge_a", "edge_b", "edge_kind", "edge_tier", "edge_layer", "length",
                                        "width", "thickness", "resistance")}})
    with pytest.raises(ValidationError, match="floating"):
        assemble(cut)


def test_spd_system_symmetric_and_dominant():
    g = random_graph(np.random.default_rng(3), 60, n_pads=3)
    s = assemble(g)
    m = s.matrix
    assert abs(m - m.T).max() <= 1e-12 * abs(m).max()
    d = m.diagonal()
    assert np.all(d > 0)
    off = np.asarray(abs(m).sum(axis=1)).ravel() - d
    pad_adjacent = np.unique(np.concatenate([
        s.node_row[g.edge_b[g.pad_mask[g.edge_a] & ~g.pad_mask[g.edge_b]]],
        s.node_row[g.edge_a[g.pad_mask[g.edge_b] & ~g.pad_mask[g.edge_a]]]]))
    assert np.all(d[pad_adjacent] > off[pad_adjacent])
    assert np.all(d >= off - 1e-12 * d)
    assert s.indptr[-1] == len(s.indices) == len(s.data)


def test_identity_converges_in_one_iteration():
    b = np.arange(1.0, 6.0)
    x = solve_spd(sp.identity(5, format="csr"), b, max_iter=1)
    np.testing.assert_allclose(x, b, rtol=1e-15)


def test_indefinite_matrix_raises():
    A = sp.csr_matrix(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(ConvergenceError) as info:
        solve_spd(A, np.array([1.0, -1.0]))
    assert np.isfinite(info.value.residual)


def test_max_iter_exceeded_reports_residual():
    g = random_graph(np.random.default_rng(4), 150)
    with pytest.raises(ConvergenceError) as info:
        solve_spd(assemble(g), max_iter=2)
    assert info.value.iterations == 2 and info.value.residual > 0


def test_cg_deterministic():
    s = assemble(random_graph(np.random.default_rng(5), 100))
    assert np.array_equal(solve_spd(s), solve_spd(s))


def test_zero_sources_all_vdd_exact():
    g = random_graph(np.random.default_rng(6), 40, n_sources=0)
    res = ir_drop(g, TECH)
    assert np.all(res.voltage == g.vdd) and res.worst_drop == 0.0
    assert np.all(branch_currents(g, res).current == 0.0)


def test_single_path_ten_milliamps():
    g = chain_graph([1.0], pad=0, sources=[(1, 0.01)])
    res = ir_drop(g, TECH, resistance=[1.0])
    assert res.voltage[1] == pytest.approx(0.99, abs=1e-14)
    assert res.worst_drop == pytest.approx(0.01, abs=1e-14) and res.worst_node == 1
    assert res.voltage[0] == 1.0


def test_series_chain_identical_currents():
    g = chain_graph([0.3, 0.7, 1.1, 0.2], pad=0, sources=[(4, 0.02)])
    cur = branch_currents(g, ir_drop(g, TECH))
    np.testing.assert_allclose(np.abs(cur.current), 0.02, rtol=1e-9)


def test_current_density_from_geometry():
    g = chain_graph([1.0], pad=0, sources=[(1, 0.01)], width=1e-6)
    cur = branch_currents(g, ir_drop(g, TECH, resistance=[1.0]))
    assert cur.density[0] == pytest.approx(2e10, rel=1e-9)
    # current flows from the pad (node 0) toward the load, i.e. positive from a to b
    assert cur.current[0] > 0


def test_temperature_scaling_of_resistance():
    g = chain_graph([2.0], pad=0, sources=[(1, 0.01)])
    r = scaled_resistance(g, TECH, 373.15)
    assert r[0] == pytest.approx(2.0 * TECH.resistivity_ratio(373.15), rel=1e-15)
    node_T = np.array([300.0, 400.0])
    assert edge_temperature(g, node_T)[0] == 350.0
    assert edge_temperature(g, None)[0] == DEFAULT_TEMPERATURE
    res = ir_drop(g, TECH, node_T)
    assert res.worst_drop == pytest.approx(0.01 * 2.0 * TECH.resistivity_ratio(350.0), rel=1e-9)
    with pytest.raises(ValidationError):
        ir_drop(g, TECH, np.array([300.0, np.nan]))


def _grid_with_center_sink(n):
    die = 1e-3
    cfg = PdnConfig(pitch=(die / (n - 1),), width=(1e-6,), pad_count=4, pad_strategy="perimeter")
    g = build_pdn(floorplan(die=die), TECH, cfg)
    d = np.hypot(g.node_x - die / 2, g.node_y - die / 2)
    centre = np.flatnonzero(d <= d.min() * (1 + 1e-9))
    return g.with_sources(centre, np.full(len(centre), 0.1 / len(centre)))


@pytest.mark.parametrize("n", [4, 5, 8])
def test_symmetric_grid_symmetric_voltage(n):
    g = _grid_with_center_sink(n)
    v = ir_drop(g, TECH, 300.0).voltage
    assert ir_drop(g, TECH, 300.0).worst_drop > 0
    key = {(round(x, 9), round(y, 9)): k for k, (x, y) in enumerate(zip(g.node_x, g.node_y))}
    die = 1e-3
    maps = [lambda x, y: (die - x, y), lambda x, y: (x, die - y), lambda x, y: (y, x)]
    for f in maps:
        for k, (x, y) in enumerate(zip(g.node_x, g.node_y)):
            mx, my = f(x, y)
            assert abs(v[k] - v[key[(round(mx, 9), round(my, 9))]]) <= 1e-10 * g.vdd


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(3, 200), pads=st.integers(1, 3))
def test_cg_matches_dense_oracle(seed, n, pads):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, n, extra_edges=int(rng.integers(0, n)), n_pads=min(pads, n - 1), n_sources=5)
    res = ir_drop(g, TECH)
    v = dense_oracle(g, res.resistance)
    assert np.max(np.abs(res.voltage - v)) <= 1e-8 * np.max(np.abs(v))
    kcl = kcl_residual(g, branch_currents(g, res))
    assert np.max(np.abs(kcl)) <= 1e-9 * g.total_current()


def test_superposition():
    rng = np.random.default_rng(8)
    g = random_graph(rng, 80, n_sources=0)
    s1 = g.with_sources([3, 7], [0.01, 0.02])
    s2 = g.with_sources([11, 40], [0.03, 0.005])
    both = g.with_sources([3, 7, 11, 40], [0.01, 0.02, 0.03, 0.005])
    v0 = ir_drop(g, TECH).voltage
    v = ir_drop(s1, TECH).voltage + ir_drop(s2, TECH).voltage - v0
    np.testing.assert_allclose(ir_drop(both, TECH).voltage, v, rtol=1e-8)


def test_raising_a_sink_does_not_lower_worst_drop():
    rng = np.random.default_rng(9)
    g = random_graph(rng, 60, n_sources=6)
    base = ir_drop(g, TECH).worst_drop
    for k in range(len(g.source_nodes)):
        cur = g.source_currents.copy()
        cur[k] *= 1.5
        assert ir_drop(g.with_sources(g.source_nodes, cur), TECH).worst_drop >= base


def test_joule_power_matches_source_work():
    g = random_graph(np.random.default_rng(10), 50, n_sources=4)
    res = ir_drop(g, TECH)
    heat = joule_power(g, branch_currents(g, res), res.resistance).sum()
    # power delivered by the pads equals dissipation: sum over sinks of I * drop
    assert heat == pytest.approx(float(g.source_vector() @ res.drop), rel=1e-8)
