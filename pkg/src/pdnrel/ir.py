"""Nodal analysis of the PDN: conductance Laplacian and branch currents, solved by Jacobi-preconditioned CG."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .core import TechParams
from .errors import ConvergenceError, NumericalError, ValidationError
from .pdn import PdnGraph

DEFAULT_TEMPERATURE = 358.15  # K, used when no temperature field is supplied
CG_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class SpdSystem:
    """``matrix @ x = rhs`` over the non-pad nodes. ``row_node[k]`` is the node of row k."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    row_node: np.ndarray
    node_row: np.ndarray  # -1 for eliminated (pad) nodes

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def indptr(self):
        return self.matrix.indptr

    @property
    def indices(self):
        return self.matrix.indices

    @property
    def data(self):
        return self.matrix.data


def laplacian(n: int, a, b, g, diag_extra=None) -> sp.csr_matrix:
    """Weighted graph Laplacian with optional extra diagonal (conductance to a fixed potential)."""
    a = np.asarray(a)
    b = np.asarray(b)
    g = np.asarray(g, dtype=float)
    rows = np.concatenate([a, b, a, b])
    cols = np.concatenate([b, a, a, b])
    vals = np.concatenate([-g, -g, g, g])
    m = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    if diag_extra is not None:
        m = m + sp.diags(np.asarray(diag_extra, dtype=float), format="csr")
    m.sum_duplicates()
    m.sort_indices()
    return m


def assemble(pdn: PdnGraph, resistance=None, pad_voltage=None, sinks=None) -> SpdSystem:
    """Stamp the conductance matrix with pads folded in as Dirichlet nodes.

    Rows are the non-pad nodes in id order. A pad neighbour adds ``g`` to the
    diagonal and ``g * pad_voltage`` to the right-hand side; sinks subtract their
    current. ``resistance`` overrides the graph's edge resistances.
    """
    r = pdn.resistance if resistance is None else np.asarray(resistance, dtype=float)
    vpad = pdn.vdd if pad_voltage is None else pad_voltage
    sinks = pdn.source_vector() if sinks is None else np.asarray(sinks, dtype=float)
    if len(pdn.pads) == 0:
        raise ValidationError("cannot assemble: no pads allocated")
    if np.any(~(r > 0)):
        raise ValidationError("edge resistances must be > 0")
    g = 1.0 / r
    is_pad = pdn.pad_mask
    row_node = np.flatnonzero(~is_pad)
    node_row = np.full(pdn.n_nodes, -1)
    node_row[row_node] = np.arange(len(row_node))

    a, b = pdn.edge_a, pdn.edge_b
    pa, pb = is_pad[a], is_pad[b]
    inner = ~pa & ~pb
    diag = np.zeros(len(row_node))
    rhs = -sinks[row_node].astype(float)
    # pad-to-node edges: b free, a pad (or the reverse)
    for free, pinned in ((b, pa & ~pb), (a, pb & ~pa)):
        np.add.at(diag, node_row[free[pinned]], g[pinned])
        np.add.at(rhs, node_row[free[pinned]], g[pinned] * vpad)
    m = laplacian(len(row_node), node_row[a[inner]], node_row[b[inner]], g[inner], diag)

    d = m.diagonal()
    if np.any(d <= 0):
        k = int(np.flatnonzero(d <= 0)[0])
        raise ValidationError(f"floating node {int(row_node[k])}: no incident conductance")
    # a free component with no pad neighbour would make the matrix singular
    labels = pdn.components()
    anchored = np.zeros(labels.max() + 1, dtype=bool)
    anchored[labels[pdn.pads]] = True
    loose = row_node[~anchored[labels[row_node]]]
    if len(loose):
        raise ValidationError(f"floating node {int(loose[0])}: no path to any pad")
    rhs.setflags(write=False)
    return SpdSystem(matrix=m, rhs=rhs, row_node=row_node, node_row=node_row)


def solve_spd(system, rhs=None, tol: float = CG_TOL, max_iter: int | None = None, x0=None) -> np.ndarray:
    """Conjugate gradient with Jacobi preconditioning.

    ``system`` is an SpdSystem or any sparse/dense SPD matrix (then ``rhs`` is
    required). Stops when ``||b - Ax|| <= tol * ||b||`` measured on the true
    residual. Raises ConvergenceError after ``max_iter`` (default ``20 n``)
    iterations or on a non-positive curvature step.
    """
    if isinstance(system, SpdSystem):
        A = system.matrix
        b = system.rhs if rhs is None else rhs
    else:
        A = system
        b = rhs
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    if max_iter is None:
        max_iter = 20 * n
    diag = A.diagonal() if sp.issparse(A) else np.diag(A)
    if np.any(diag <= 0):
        raise ConvergenceError("matrix has a non-positive diagonal entry", residual=np.inf, iterations=0)
    inv_diag = 1.0 / diag
    bnorm = np.linalg.norm(b)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    if bnorm == 0.0 and x0 is None:
        return x
    r = b - A @ x
    target = tol * bnorm
    if np.linalg.norm(r) <= target:
        return x
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    for it in range(1, max_iter + 1):
        Ap = A @ p
        pAp = p @ Ap
        if not pAp > 0:
            raise ConvergenceError("matrix is not positive definite", residual=np.linalg.norm(r) / bnorm,
                                   iterations=it)
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        if np.linalg.norm(r) <= target:
            # confirm on the true residual; recurrence drift can fake convergence
            r = b - A @ x
            if np.linalg.norm(r) <= target:
                return x
            z = inv_diag * r
            p = z.copy()
            rz = r @ z
            continue
        z = inv_diag * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    if not np.all(np.isfinite(x)):
        raise NumericalError("CG produced non-finite values")
    raise ConvergenceError("CG did not converge", residual=float(np.linalg.norm(b - A @ x) / bnorm),
                           iterations=max_iter)


def edge_temperature(pdn: PdnGraph, temperature) -> np.ndarray:
    """Per-edge temperature: mean of endpoint node temperatures, or a uniform value."""
    if temperature is None:
        return np.full(pdn.n_edges, DEFAULT_TEMPERATURE)
    t = np.asarray(temperature, dtype=float)
    if t.ndim == 0:
        return np.full(pdn.n_edges, float(t))
    if t.shape != (pdn.n_nodes,):
        raise ValidationError(f"node temperature array has shape {t.shape}, expected ({pdn.n_nodes},)")
    return 0.5 * (t[pdn.edge_a] + t[pdn.edge_b])


def scaled_resistance(pdn: PdnGraph, tech: TechParams, temperature=None) -> np.ndarray:
    te = edge_temperature(pdn, temperature)
    if not np.all(np.isfinite(te)):
        raise ValidationError("temperature must be finite")
    return pdn.resistance * tech.resistivity_ratio(te)


@dataclass(frozen=True, eq=False)
class IrResult:
    voltage: np.ndarray  # V per node
    drop: np.ndarray  # Vdd - V per node
    resistance: np.ndarray  # temperature-scaled edge resistances used by the solve
    vdd: float

    @property
    def worst_drop(self) -> float:
        return float(self.drop.max()) if len(self.drop) else 0.0

    @property
    def worst_node(self) -> int:
        return int(np.argmax(self.drop))


def ir_drop(pdn: PdnGraph, tech: TechParams, temperature=None, resistance=None, tol: float = CG_TOL) -> IrResult:
    """Static IR drop with resistances scaled by rho(T)/rho0 at each edge midpoint.

    ``temperature`` is a per-node array, a uniform value (K) or None for 358.15 K.
    The solve runs in drop form (pads at 0 V, sinks as injections), so a network
    without load returns exactly Vdd everywhere.
    """
    r = scaled_resistance(pdn, tech, temperature) if resistance is None else np.asarray(resistance, dtype=float)
    system = assemble(pdn, resistance=r, pad_voltage=0.0, sinks=-pdn.source_vector())
    drop = np.zeros(pdn.n_nodes)
    drop[system.row_node] = solve_spd(system, tol=tol)
    voltage = pdn.vdd - drop
    for a in (drop, voltage, r):
        a.setflags(write=False)
    return IrResult(voltage=voltage, drop=drop, resistance=r, vdd=pdn.vdd)


@dataclass(frozen=True, eq=False)
class BranchCurrents:
    current: np.ndarray  # A, positive from edge_a to edge_b
    density: np.ndarray  # A/m^2, |I| / (w t)


def branch_currents(pdn: PdnGraph, v, resistance=None) -> BranchCurrents:
    """Ohm's-law edge currents from node voltages (or an IrResult)."""
    if isinstance(v, IrResult):
        resistance = v.resistance if resistance is None else resistance
        v = v.voltage
    v = np.asarray(v, dtype=float)
    if v.shape != (pdn.n_nodes,):
        raise ValidationError(f"voltage vector has shape {v.shape}, expected ({pdn.n_nodes},)")
    r = pdn.resistance if resistance is None else np.asarray(resistance, dtype=float)
    current = (v[pdn.edge_a] - v[pdn.edge_b]) / r
    density = np.abs(current) / (pdn.width * pdn.thickness)
    current.setflags(write=False)
    density.setflags(write=False)
    return BranchCurrents(current=current, density=density)


def kcl_residual(pdn: PdnGraph, currents: BranchCurrents) -> np.ndarray:
    """Net current leaving each node through edges and sinks; pads reported as 0."""
    net = pdn.source_vector()
    np.add.at(net, pdn.edge_a, currents.current)
    np.add.at(net, pdn.edge_b, -currents.current)
    net[pdn.pads] = 0.0
    return net


def joule_power(pdn: PdnGraph, currents: BranchCurrents, resistance) -> np.ndarray:
    """I^2 R dissipated in each edge (W)."""
    return currents.current ** 2 * np.asarray(resistance)
