"""Korhonen electromigration stress model for two-terminal interconnect segments.

Stress obeys ``d(sigma)/dt = d/dx[kappa (d(sigma)/dx + G)]`` on ``0 <= x <= L``
with blocked (zero-flux) ends. ``x = 0`` is the cathode, where tensile stress
builds up and voids nucleate once it reaches ``sigma_crit``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .core import K_B, Q_E, TechParams
from .errors import NumericalError, ValidationError
from .ir import BranchCurrents, edge_temperature
from .pdn import PdnGraph

DEFAULT_POINTS = 101
# time steps per L^2/kappa when the caller gives no dt
DEFAULT_STEPS_PER_TAU = 1000
# crossing detection slack, so sigma_max == sigma_crit (mortal by convention) still nucleates
_CROSS_RTOL = 1e-9


def drift_force(j, T, tech: TechParams):
    """Electron-wind stress gradient G = e Z* rho(T) |j| / Omega (Pa/m)."""
    return Q_E * tech.Zstar * tech.resistivity(T) * np.abs(j) / tech.Omega


def diffusivity(T, tech: TechParams):
    """Atomic diffusivity D0 exp(-Ea / kT), Ea in eV (m^2/s)."""
    T = np.asarray(T, dtype=float)
    return tech.D0 * np.exp(-tech.Ea * Q_E / (K_B * T))


def kappa(T, tech: TechParams):
    """Stress diffusivity D B Omega / (k T) (m^2/s)."""
    T = np.asarray(T, dtype=float)
    if np.any(T <= 0):
        raise ValidationError("temperature must be > 0 K")
    return diffusivity(T, tech) * tech.B_mod * tech.Omega / (K_B * T)


def mttf_black(j, T, A_const: float = 1e3, n_exp: float = 2.0, Ea: float = 0.86):
    """Black's equation A |j|^-n exp(Ea / kT) in hours; infinite where j == 0."""
    j = np.abs(np.asarray(j, dtype=float))
    T = np.asarray(T, dtype=float)
    arrhenius = np.exp(Ea * Q_E / (K_B * T))
    with np.errstate(divide="ignore"):
        out = np.where(j > 0, A_const * np.power(np.where(j > 0, j, 1.0), -n_exp) * arrhenius, np.inf)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class EmSegment:
    id: int
    length: float
    width: float
    thickness: float
    j: float  # A/m^2, signed
    T: float  # K
    tech: TechParams = field(default_factory=TechParams)
    n_points: int = DEFAULT_POINTS

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0 and self.thickness > 0):
            raise ValidationError(f"segment {self.id}: length, width and thickness must be > 0")
        if self.n_points < 3:
            raise ValidationError(f"segment {self.id}: need at least 3 grid points")
        if not (250.0 <= self.T <= 450.0):
            raise ValidationError(f"segment {self.id}: temperature {self.T} K outside [250, 450] K")
        if not math.isfinite(self.j):
            raise ValidationError(f"segment {self.id}: current density must be finite")

    @property
    def G(self) -> float:
        return float(drift_force(self.j, self.T, self.tech))

    @property
    def kappa(self) -> float:
        return float(kappa(self.T, self.tech))

    @property
    def tau(self) -> float:
        """Diffusion time L^2 / kappa (s)."""
        return self.length ** 2 / self.kappa

    @property
    def sigma_max(self) -> float:
        return self.G * self.length / 2.0

    def grid(self) -> np.ndarray:
        return np.linspace(0.0, self.length, self.n_points)


@dataclass(frozen=True, eq=False)
class StressProfile:
    x: np.ndarray
    sigma: np.ndarray
    t: float

    def mean(self) -> float:
        return spatial_mean(self.sigma)


@dataclass(frozen=True, eq=False)
class StressHistory:
    x: np.ndarray
    times: np.ndarray
    sigma: np.ndarray  # (n_saved, n_points)

    def at(self, k: int) -> StressProfile:
        return StressProfile(self.x, self.sigma[k], float(self.times[k]))

    @property
    def final(self) -> StressProfile:
        return self.at(-1)


@dataclass(frozen=True, eq=False)
class SegmentEmResult:
    segment_id: int
    j: float
    T: float
    G: float
    kappa: float
    sigma_max: float
    blech_immortal: bool
    t_nuc: float
    profile: StressProfile


def spatial_mean(sigma) -> float:
    """Trapezoidal mean over a uniform grid; the quantity the blocked-boundary scheme conserves."""
    s = np.asarray(sigma, dtype=float)
    return float((s.sum(axis=-1) - 0.5 * (s[..., 0] + s[..., -1])) / (s.shape[-1] - 1))


def steady_state(seg: EmSegment):
    """Long-time profile from zero-mean initial stress: ``G (L/2 - x)``; returns (profile, sigma_max)."""
    x = seg.grid()
    G = seg.G
    return StressProfile(x=x, sigma=G * (seg.length / 2.0 - x), t=math.inf), G * seg.length / 2.0


def blech_check(seg: EmSegment) -> bool:
    """True when the segment is immortal, i.e. ``G L / 2 < sigma_crit`` (a tie is mortal)."""
    return seg.sigma_max < seg.tech.sigma_crit


class Tridiagonal:
    """Thomas-algorithm factorisation of a fixed tridiagonal matrix.

    ``lower[0]`` and ``upper[-1]`` are ignored. ``solve`` accepts a right-hand
    side of shape ``(n,)`` or ``(n, batch)``.
    """

    def __init__(self, lower, diag, upper):
        lower = [float(v) for v in lower]
        diag = [float(v) for v in diag]
        upper = [float(v) for v in upper]
        n = len(diag)
        cp = [0.0] * n
        den = [0.0] * n
        den[0] = diag[0]
        cp[0] = upper[0] / den[0] if n > 1 else 0.0
        for i in range(1, n):
            den[i] = diag[i] - lower[i] * cp[i - 1]
            if den[i] == 0.0:
                raise NumericalError("zero pivot in tridiagonal solve")
            cp[i] = upper[i] / den[i] if i < n - 1 else 0.0
        self.n = n
        self.lower = lower
        self.cp = cp
        self.den = den

    def solve(self, rhs):
        rhs = np.asarray(rhs, dtype=float)
        if rhs.ndim == 1:
            return np.array(self._solve_list(rhs.tolist()))
        n, lower, cp, den = self.n, self.lower, self.cp, self.den
        y = np.empty_like(rhs)
        y[0] = rhs[0] / den[0]
        for i in range(1, n):
            y[i] = (rhs[i] - lower[i] * y[i - 1]) / den[i]
        for i in range(n - 2, -1, -1):
            y[i] -= cp[i] * y[i + 1]
        return y

    def _solve_list(self, d):
        n, lower, cp, den = self.n, self.lower, self.cp, self.den
        y = [0.0] * n
        prev = d[0] / den[0]
        y[0] = prev
        for i in range(1, n):
            prev = (d[i] - lower[i] * prev) / den[i]
            y[i] = prev
        for i in range(n - 2, -1, -1):
            prev = y[i] - cp[i] * prev
            y[i] = prev
        return y


def thomas_solve(lower, diag, upper, rhs):
    return Tridiagonal(lower, diag, upper).solve(rhs)


def _implicit_operator(n: int, r: float):
    """Coefficients of ``I - dt A`` for the blocked-boundary stencil, ``r = kappa dt / h^2``.

    Boundary rows use a ghost node mirrored so that the total flux vanishes.
    """
    lower = [-r] * n
    upper = [-r] * n
    diag = [1.0 + 2.0 * r] * n
    upper[0] = -2.0 * r
    lower[n - 1] = -2.0 * r
    return lower, diag, upper


def _boundary_source(n: int, drive: float) -> np.ndarray:
    """Per-step forcing ``dt * s``; ``drive = dt * kappa * G / h``."""
    s = np.zeros(n)
    s[0] = 2.0 * drive
    s[-1] = -2.0 * drive
    return s


def transient_solve(seg: EmSegment, dt: float | None = None, t_end: float | None = None, sigma0=None,
                    save_every: int = 1) -> StressHistory:
    """Backward-Euler march of the stress PDE from ``sigma0`` (default zero) to ``t_end``.

    ``dt`` defaults to ``(L^2/kappa) / 1000`` and ``t_end`` to ``10 L^2 / (pi^2 kappa)``.
    The last step is shortened to land exactly on ``t_end``.
    """
    tau = seg.tau
    dt = tau / DEFAULT_STEPS_PER_TAU if dt is None else dt
    t_end = 10.0 * tau / math.pi ** 2 if t_end is None else t_end
    if not (dt > 0) or not (t_end >= 0):
        raise ValidationError("need dt > 0 and t_end >= 0")
    n = seg.n_points
    h = seg.length / (n - 1)
    x = seg.grid()
    sigma = np.zeros(n) if sigma0 is None else np.array(sigma0, dtype=float)
    if sigma.shape != (n,):
        raise ValidationError(f"initial profile has shape {sigma.shape}, expected ({n},)")
    k, G = seg.kappa, seg.G

    def stepper(step):
        op = Tridiagonal(*_implicit_operator(n, k * step / h ** 2))
        return op, _boundary_source(n, step * k * G / h)

    full = stepper(dt)
    n_full = int(math.floor(t_end / dt + 1e-9))
    remainder = t_end - n_full * dt
    times, saved = [0.0], [sigma.copy()]
    t = 0.0
    steps = [full] * n_full
    if remainder > 1e-12 * dt:
        steps.append(stepper(remainder))
    for count, (op, src) in enumerate(steps, start=1):
        sigma = op.solve(sigma + src)
        t = min(t + dt, t_end) if count <= n_full else t_end
        if not np.all(np.isfinite(sigma)):
            raise NumericalError(f"segment {seg.id}: stress became non-finite at t={t:.3e} s")
        if count % save_every == 0 or count == len(steps):
            times.append(t)
            saved.append(sigma.copy())
    return StressHistory(x=x, times=np.array(times), sigma=np.array(saved))


def _crossing(times, cathode, level: float) -> float:
    """First time ``cathode`` reaches ``level``, linearly interpolated; inf if never."""
    hit = np.flatnonzero(cathode >= level)
    if len(hit) == 0:
        return math.inf
    k = int(hit[0])
    if k == 0:
        return float(times[0])
    s0, s1 = cathode[k - 1], cathode[k]
    t0, t1 = times[k - 1], times[k]
    return float(t0 + (level - s0) / (s1 - s0) * (t1 - t0))


# Universal (dimensionless) trajectory: s = sigma / (G L), xi = x / L, t' = kappa t / L^2.
# With zero initial stress every segment follows the same curve, so one march serves all.
_TRAJ_T0 = 1e-9
_TRAJ_EPS0 = 0.04
_TRAJ_LATE = 0.1
_TRAJ_TMAX = 50.0


@lru_cache(maxsize=16)
def universal_trajectory(n_points: int, level: int):
    """Dimensionless march with geometric steps ``dt' = eps * max(t', t0)`` (capped at ``eps * 0.1``).

    ``eps = 0.04 / 2**level``; each level halves every step. Stops once the
    cathode stress reaches 1/2 (its steady value) within the crossing slack.
    Returns (times, cathode stress, profiles).
    """
    eps = _TRAJ_EPS0 / 2 ** level
    n = n_points
    h = 1.0 / (n - 1)
    s = [0.0] * n
    times, cathode, profiles = [0.0], [0.0], [s]
    t = 0.0
    stop = 0.5 * (1.0 - _CROSS_RTOL)
    while cathode[-1] < stop:
        dt = eps * min(max(t, _TRAJ_T0), _TRAJ_LATE)
        op = Tridiagonal(*_implicit_operator(n, dt / h ** 2))
        rhs = list(s)
        rhs[0] += 2.0 * dt / h
        rhs[-1] -= 2.0 * dt / h
        s = op._solve_list(rhs)
        t += dt
        times.append(t)
        cathode.append(s[0])
        profiles.append(s)
        if t > _TRAJ_TMAX:
            raise NumericalError("dimensionless stress trajectory failed to approach steady state")
    return np.array(times), np.array(cathode), np.array(profiles)


def _normalised_threshold(G, L, sigma_crit):
    with np.errstate(divide="ignore"):
        c = np.where(G > 0, sigma_crit / (np.asarray(G) * L), np.inf)
    # mortal segments have c <= 1/2; clamp rounding at the tie
    return np.minimum(c, 0.5) * (1.0 - _CROSS_RTOL)


def universal_nucleation(c, n_points: int = DEFAULT_POINTS, rtol: float = 0.01, max_level: int = 8):
    """Dimensionless nucleation times for thresholds ``c`` (already <= 1/2).

    Halves the step size until no threshold moves by more than ``rtol`` between
    successive refinements. Returns (times, level used).
    """
    c = np.atleast_1d(np.asarray(c, dtype=float))
    if len(c) == 0:
        return c.copy(), 0

    def lookup(level):
        times, cathode, _ = universal_trajectory(n_points, level)
        # the BE cathode stress rises monotonically, searchsorted is valid
        k = np.searchsorted(cathode, c, side="left")
        k = np.clip(k, 1, len(times) - 1)
        s0, s1 = cathode[k - 1], cathode[k]
        t0, t1 = times[k - 1], times[k]
        return t0 + (c - s0) / (s1 - s0) * (t1 - t0)

    prev = lookup(0)
    for level in range(1, max_level + 1):
        cur = lookup(level)
        if np.all(np.abs(cur - prev) < rtol * np.abs(cur)):
            return cur, level
        prev = cur
    raise NumericalError("nucleation time did not converge under step refinement")


def nucleation_time(seg: EmSegment, dt: float | None = None, n_points: int | None = None,
                    rtol: float = 0.01, max_refine: int = 10) -> float:
    """First time the cathode stress reaches ``sigma_crit`` from a stress-free start (s).

    Immortal segments return inf. With ``dt`` given, the segment is marched with
    uniform steps, the crossing interpolated between the bracketing steps, and dt
    halved until the estimate moves by less than ``rtol``. Without ``dt`` the shared
    dimensionless trajectory is used, refined the same way.
    """
    if n_points is not None and n_points != seg.n_points:
        seg = EmSegment(seg.id, seg.length, seg.width, seg.thickness, seg.j, seg.T, seg.tech, n_points)
    if blech_check(seg):
        return math.inf
    level = float(_normalised_threshold(seg.G, seg.length, seg.tech.sigma_crit))
    if dt is None:
        t_norm, _ = universal_nucleation(level, seg.n_points, rtol=rtol)
        return float(t_norm[0]) * seg.tau
    level_pa = level * seg.G * seg.length
    prev = None
    for _ in range(max_refine):
        t_nuc = _march_to_crossing(seg, dt, level_pa)
        if prev is not None and abs(t_nuc - prev) < rtol * t_nuc:
            return t_nuc
        prev = t_nuc
        dt /= 2.0
    raise NumericalError(f"segment {seg.id}: nucleation time did not converge under dt refinement")


def _march_to_crossing(seg: EmSegment, dt: float, level: float, max_steps: int = 5_000_000) -> float:
    n = seg.n_points
    h = seg.length / (n - 1)
    k, G = seg.kappa, seg.G
    op = Tridiagonal(*_implicit_operator(n, k * dt / h ** 2))
    drive = 2.0 * dt * k * G / h
    s = [0.0] * n
    t = 0.0
    prev = 0.0
    for _ in range(max_steps):
        s[0] += drive
        s[-1] -= drive
        s = op._solve_list(s)
        t += dt
        if s[0] >= level:
            return (t - dt) + (level - prev) / (s[0] - prev) * dt
        prev = s[0]
    raise NumericalError(f"segment {seg.id}: no nucleation within {max_steps} steps")


@dataclass(frozen=True)
class EmConfig:
    n_points: int = DEFAULT_POINTS
    rtol: float = 0.01  # dt-refinement convergence threshold for t_nuc
    include_vias: bool = False


def segments_from_pdn(pdn: PdnGraph, currents: BranchCurrents, temperature, tech: TechParams,
                      cfg: EmConfig = EmConfig()):
    """Edge ids and per-edge (L, w, t, signed j, T) arrays for the analysed edges."""
    keep = np.ones(pdn.n_edges, dtype=bool) if cfg.include_vias else pdn.wire_mask
    keep &= pdn.length > 0
    ids = np.flatnonzero(keep)
    te = edge_temperature(pdn, temperature)[ids]
    j = np.sign(currents.current[ids]) * currents.density[ids]
    return ids, pdn.length[ids], pdn.width[ids], pdn.thickness[ids], j, te


def nucleation_times(G, L, T, tech: TechParams, n_points: int = DEFAULT_POINTS, rtol: float = 0.01):
    """Vectorised nucleation time (s) for stress-free segments; inf where immortal."""
    G = np.asarray(G, dtype=float)
    L = np.broadcast_to(np.asarray(L, dtype=float), G.shape)
    T = np.broadcast_to(np.asarray(T, dtype=float), G.shape)
    mortal = G * L / 2.0 >= tech.sigma_crit
    out = np.full(G.shape, np.inf)
    if np.any(mortal):
        c = _normalised_threshold(G[mortal], L[mortal], tech.sigma_crit)
        t_norm, _ = universal_nucleation(c, n_points, rtol=rtol)
        out[mortal] = t_norm * L[mortal] ** 2 / kappa(T[mortal], tech)
    return out


def analyze_pdn(pdn: PdnGraph, currents: BranchCurrents, temperature, tech: TechParams,
                cfg: EmConfig = EmConfig()) -> list:
    """Per-edge EM results sorted by ascending nucleation time (ties by edge id).

    ``temperature`` is a per-node array or a uniform value (K). Immortal segments
    skip the transient solve and carry their steady profile; mortal ones carry the
    profile at the moment of nucleation.
    """
    ids, L, w, th, j, T = segments_from_pdn(pdn, currents, temperature, tech, cfg)
    if np.any((T < 250.0) | (T > 450.0)):
        raise ValidationError("segment temperature outside [250, 450] K")
    G = drift_force(j, T, tech)
    kap = kappa(T, tech)
    smax = G * L / 2.0
    immortal = smax < tech.sigma_crit
    t_nuc = np.full(len(ids), np.inf)
    t_norm = np.zeros(len(ids))
    level = 0
    mortal = np.flatnonzero(~immortal)
    if len(mortal):
        c = _normalised_threshold(G[mortal], L[mortal], tech.sigma_crit)
        t_norm[mortal], level = universal_nucleation(c, cfg.n_points, rtol=cfg.rtol)
        t_nuc[mortal] = t_norm[mortal] * L[mortal] ** 2 / kap[mortal]
        times, _, profiles = universal_trajectory(cfg.n_points, level)

    xi = np.linspace(0.0, 1.0, cfg.n_points)
    results = []
    for k, eid in enumerate(ids):
        if immortal[k]:
            sigma = G[k] * L[k] * (0.5 - xi)
            t_prof = math.inf
        else:
            q = int(np.clip(np.searchsorted(times, t_norm[k]), 1, len(times) - 1))
            f = (t_norm[k] - times[q - 1]) / (times[q] - times[q - 1])
            sigma = G[k] * L[k] * ((1 - f) * profiles[q - 1] + f * profiles[q])
            t_prof = float(t_nuc[k])
        results.append(SegmentEmResult(
            segment_id=int(eid), j=float(j[k]), T=float(T[k]), G=float(G[k]), kappa=float(kap[k]),
            sigma_max=float(smax[k]), blech_immortal=bool(immortal[k]), t_nuc=float(t_nuc[k]),
            profile=StressProfile(x=xi * L[k], sigma=sigma, t=t_prof),
        ))
    results.sort(key=lambda r: (r.t_nuc, r.segment_id))
    return results
