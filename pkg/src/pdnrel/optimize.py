"""Wire-width sizing of the PDN by projected gradient descent.

The design variables are width multipliers, one per (tier, metal layer) group.
The objective blends a smoothed worst IR drop with a smoothed worst steady-state
EM stress, each normalised by its value at the starting point.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .core import TechParams
from .em import drift_force
from .errors import ValidationError
from .ir import DEFAULT_TEMPERATURE, branch_currents, edge_temperature, ir_drop
from .pdn import PdnGraph


def smooth_max(values, beta: float) -> float:
    """(1/beta) log sum exp(beta v); exceeds max(v) by at most log(n)/beta."""
    v = np.asarray(values, dtype=float)
    return float(logsumexp(beta * v) / beta)


@dataclass(frozen=True)
class SizingOptions:
    m_min: float = 0.25
    m_max: float = 4.0
    w_ir: float = 0.5
    w_em: float = 0.5
    beta: float = 50.0  # applied to values normalised by their initial maximum
    fd_rel_step: float = 1e-4
    armijo: float = 1e-4
    max_halvings: int = 20
    jobs: int = 1

    def __post_init__(self):
        if not (0 < self.m_min <= self.m_max):
            raise ValidationError("need 0 < m_min <= m_max")
        if not (self.beta > 0):
            raise ValidationError("smoothing beta must be > 0")
        if self.w_ir < 0 or self.w_em < 0:
            raise ValidationError("objective weights must be >= 0")


@dataclass
class Evaluation:
    objective: float
    worst_drop: float
    worst_sigma: float
    area: float


class SizingProblem:
    """Objective and gradient over the feasible width set of one loaded PDN.

    ``scales`` fixes the normalisation of the two terms; by default they are the
    worst drop and worst stress at ``vars0`` (falling back to 1 when zero).
    """

    def __init__(self, pdn: PdnGraph, tech: TechParams, budget: float | None = None, temperature=None,
                 options: SizingOptions = SizingOptions(), vars0=None, scales=None):
        self.pdn = pdn
        self.tech = tech
        self.options = options
        self.temperature = DEFAULT_TEMPERATURE if temperature is None else temperature
        self.groups = pdn.edge_groups()
        gindex = {g: k for k, g in enumerate(self.groups)}
        self.edge_group = np.array([gindex.get((t, l), -1) if kind == 0 else -1
                                    for t, l, kind in zip(pdn.edge_tier.tolist(), pdn.edge_layer.tolist(),
                                                          pdn.edge_kind.tolist())], dtype=int)
        wire = pdn.wire_mask
        vol = pdn.width * pdn.length * pdn.thickness
        self.group_area = np.bincount(self.edge_group[wire], weights=vol[wire], minlength=len(self.groups))
        self.budget = float(self.group_area.sum()) if budget is None else float(budget)
        self.edge_T = edge_temperature(pdn, self.temperature)
        self._scales = (1.0, 1.0)
        x0 = np.ones(len(self.groups)) if vars0 is None else np.asarray(vars0, dtype=float)
        if scales is None:
            drops, sigmas = self.fields(x0)
            scales = (drops.max() if len(drops) else 0.0, sigmas.max() if len(sigmas) else 0.0)
        self._scales = tuple(float(s) if s > 0 else 1.0 for s in scales)

    @property
    def n_vars(self) -> int:
        return len(self.groups)

    @property
    def scales(self):
        return self._scales

    def area(self, m) -> float:
        return float(np.dot(np.asarray(m, dtype=float), self.group_area))

    def sized(self, m) -> PdnGraph:
        m = np.asarray(m, dtype=float)
        factor = np.where(self.edge_group >= 0, m[np.maximum(self.edge_group, 0)], 1.0)
        return self.pdn.with_edge_scale(factor)

    def fields(self, m):
        """Node drops (V) and per-wire steady peak stress (Pa) for multipliers ``m``."""
        g = self.sized(m)
        ir = ir_drop(g, self.tech, self.temperature)
        cur = branch_currents(g, ir)
        wire = g.wire_mask
        sigma = drift_force(cur.density[wire], self.edge_T[wire], self.tech) * g.length[wire] / 2.0
        return ir.drop, sigma

    def evaluate(self, m) -> Evaluation:
        o = self.options
        drops, sigma = self.fields(m)
        s_ir, s_em = self._scales
        f = 0.0
        if o.w_ir:
            f += o.w_ir * smooth_max(drops / s_ir, o.beta)
        if o.w_em and len(sigma):
            f += o.w_em * smooth_max(sigma / s_em, o.beta)
        return Evaluation(objective=f, worst_drop=float(drops.max()),
                          worst_sigma=float(sigma.max()) if len(sigma) else 0.0, area=self.area(m))

    def objective(self, m) -> float:
        return self.evaluate(m).objective

    def gradient(self, m) -> np.ndarray:
        """Central differences with step ``fd_rel_step * m_g`` per group."""
        m = np.asarray(m, dtype=float)

        def partial(k):
            h = self.options.fd_rel_step * m[k]
            up, dn = m.copy(), m.copy()
            up[k] += h
            dn[k] -= h
            return (self.objective(up) - self.objective(dn)) / (2.0 * h)

        if self.options.jobs > 1 and self.n_vars > 1:
            with ThreadPoolExecutor(max_workers=self.options.jobs) as pool:
                return np.array(list(pool.map(partial, range(self.n_vars))))
        return np.array([partial(k) for k in range(self.n_vars)])

    def project(self, m) -> np.ndarray:
        """Clip to bounds, then shrink the excess above ``m_min`` uniformly until the area fits."""
        o = self.options
        m = np.clip(np.asarray(m, dtype=float), o.m_min, o.m_max)
        floor = o.m_min * self.group_area.sum()
        if floor > self.budget * (1 + 1e-12):
            raise ValidationError(f"area budget {self.budget:.6g} is below the minimum-width area {floor:.6g}")
        area = self.area(m)
        if area > self.budget:
            excess = self.area(m - o.m_min)
            s = max(0.0, (self.budget - floor) / excess)
            m = o.m_min + s * (m - o.m_min)
        return m

    def is_feasible(self, m, rtol: float = 1e-9) -> bool:
        o = self.options
        m = np.asarray(m)
        return bool(np.all(m >= o.m_min * (1 - rtol)) and np.all(m <= o.m_max * (1 + rtol))
                    and self.area(m) <= self.budget * (1 + rtol))


@dataclass
class OptResult:
    vars: np.ndarray
    pdn: PdnGraph
    history: list = field(default_factory=list)  # dicts: iter, objective, worst_drop, worst_sigma, area
    reason: str = ""

    def save_history(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "objective", "worst_drop_V", "worst_sigma_Pa", "area_m3"])
            for h in self.history:
                w.writerow([h["iter"], *(f"{h[k]:.9g}" for k in ("objective", "worst_drop", "worst_sigma", "area"))])


def optimize(problem: SizingProblem, vars0=None, iters: int = 50, tol: float = 1e-6, step0: float | None = None):
    """Projected gradient descent with Armijo backtracking (step halved up to 20 times).

    Stops after ``iters`` accepted steps, when the relative improvement drops
    below ``tol``, or when no halving yields sufficient decrease.
    """
    o = problem.options
    x = np.ones(problem.n_vars) if vars0 is None else np.asarray(vars0, dtype=float)
    if o.m_min * problem.group_area.sum() > problem.budget * (1 + 1e-12):
        raise ValidationError("infeasible start: budget violated even at the lower width bounds")
    x = problem.project(x)
    ev = problem.evaluate(x)
    history = [{"iter": 0, **vars(ev)}]
    reason = "max iterations"
    step = step0
    for it in range(1, iters + 1):
        g = problem.gradient(x)
        gmax = float(np.max(np.abs(g))) if len(g) else 0.0
        if gmax == 0.0:
            reason = "zero gradient"
            break
        if step is None:
            step = 0.25 * float(np.mean(x)) / gmax
        accepted = None
        trial = step
        for _ in range(o.max_halvings + 1):
            x_new = problem.project(x - trial * g)
            move = x_new - x
            if np.max(np.abs(move)) <= 1e-12 * np.max(np.abs(x)):
                break
            ev_new = problem.evaluate(x_new)
            if ev_new.objective <= ev.objective + o.armijo * float(g @ move):
                accepted = (x_new, ev_new)
                break
            trial /= 2.0
        if accepted is None:
            reason = "stationary"
            break
        improvement = (ev.objective - accepted[1].objective) / max(abs(ev.objective), 1e-300)
        x, ev = accepted
        history.append({"iter": it, **vars(ev)})
        step = 2.0 * trial
        if improvement < tol:
            reason = "converged"
            break
    return OptResult(vars=x, pdn=problem.sized(x), history=history, reason=reason)
