"""Pseudo-spectral Navier-Stokes integration on the periodic box.

The velocity is advanced in Fourier space with classical RK4 and the exact
viscous integrating factor ``exp(-nu |k|^2 h)``.  The nonlinear term is
formed in divergence form from 2/3-dealiased products (rotational form is
available as an option) and is Leray-projected, which eliminates the
pressure.  The mean velocity is pinned to zero after every step.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from functools import cached_property

import numpy as np
from scipy.integrate import cumulative_simpson, cumulative_trapezoid, simpson, trapezoid

from .fields import Grid, ScalarField, VectorField, project_coefficients

__all__ = [
    "SolverConfig",
    "BlowUpError",
    "Trajectory",
    "EnergyBudget",
    "SeparableTestFunction",
    "nonlinear_term",
    "advance",
    "step",
    "simulate",
    "compute_pressure",
    "poisson_residual",
    "gradient_energy",
    "time_integral",
    "pressure_coefficients",
    "time_derivative",
    "ns_residual",
    "energy_budget",
    "local_energy_residual",
    "lagrange_weights",
]


@dataclass(frozen=True)
class SolverConfig:
    """Time-stepping parameters.

    ``dt`` above the explicit diffusion bound ``0.5 h^2 / nu`` issues a
    warning only; the integrating factor keeps the scheme stable.
    """

    viscosity: float = 1.0
    dt: float = 1e-3
    t_end: float = 0.1
    dealias: bool = True
    snapshot_stride: int = 1
    nonlinear: str = "divergence"

    def __post_init__(self):
        if not self.viscosity > 0:
            raise ValueError("viscosity must be positive")
        if not self.dt > 0 or not self.t_end > 0:
            raise ValueError("dt and t_end must be positive")
        if int(self.snapshot_stride) != self.snapshot_stride or self.snapshot_stride < 1:
            raise ValueError("snapshot_stride must be a positive integer")
        if self.nonlinear not in ("divergence", "rotational"):
            raise ValueError(f"unknown nonlinear form {self.nonlinear!r}")

    @property
    def n_steps(self):
        return int(round(self.t_end / self.dt))

    @property
    def snapshot_dt(self):
        return self.dt * self.snapshot_stride

    def check_stability(self, grid):
        bound = 0.5 * grid.spacing**2 / self.viscosity
        if self.dt > bound:
            warnings.warn(
                f"dt={self.dt:g} exceeds the explicit diffusion bound {bound:g}; "
                "the integrating factor keeps the step stable",
                RuntimeWarning,
                stacklevel=3,
            )

    def to_dict(self):
        return asdict(self)


class BlowUpError(RuntimeError):
    """Non-finite or runaway state encountered during time stepping."""

    def __init__(self, message, last_time, trajectory=None):
        super().__init__(message)
        self.last_time = last_time
        self.trajectory = trajectory


def lagrange_weights(times, t, order=4):
    """Indices and weights of the local Lagrange interpolant through ``order`` nodes."""
    times = np.asarray(times, dtype=float)
    m = min(order, times.size)
    if m == 1:
        return np.array([0]), np.array([1.0])
    i = int(np.searchsorted(times, t)) - m // 2
    i = min(max(i, 0), times.size - m)
    idx = np.arange(i, i + m)
    nodes = times[idx]
    w = np.ones(m)
    for a in range(m):
        for b in range(m):
            if a != b:
                w[a] *= (t - nodes[b]) / (nodes[a] - nodes[b])
    return idx, w


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Uniformly sampled record of a divergence-free velocity history."""

    grid: Grid
    times: np.ndarray
    snapshots: tuple
    config: SolverConfig
    initial_energy: float
    seed: object = None

    def __post_init__(self):
        times = np.array(self.times, dtype=float)
        if times.ndim != 1 or times.size != len(self.snapshots) or times.size == 0:
            raise ValueError("times and snapshots must be nonempty and of equal length")
        if times.size > 1:
            gaps = np.diff(times)
            if np.any(gaps <= 0):
                raise ValueError("times must be strictly increasing")
            if np.max(np.abs(gaps - gaps.mean())) > 1e-9 * max(gaps.mean(), 1.0):
                raise ValueError("times must be uniformly spaced")
        times.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "snapshots", tuple(self.snapshots))

    def __len__(self):
        return len(self.snapshots)

    @property
    def t_start(self):
        return float(self.times[0])

    @property
    def t_stop(self):
        return float(self.times[-1])

    @property
    def spacing(self):
        return float(self.times[1] - self.times[0]) if len(self) > 1 else self.config.snapshot_dt

    @cached_property
    def energies(self):
        return np.array([u.energy() for u in self.snapshots])

    def contains(self, t0, t1, tol=1e-12):
        return t0 >= self.t_start - tol and t1 <= self.t_stop + tol

    def at(self, t):
        """Velocity at time ``t``: the stored snapshot if ``t`` is a node, else cubic interpolation."""
        if not self.contains(t, t):
            raise ValueError(f"time {t} outside the trajectory [{self.t_start}, {self.t_stop}]")
        hit = np.flatnonzero(np.abs(self.times - t) <= 1e-12 * max(1.0, abs(t)))
        if hit.size:
            return self.snapshots[int(hit[0])]
        idx, w = lagrange_weights(self.times, t)
        data = sum(wi * self.snapshots[i].data for i, wi in zip(idx, w))
        return VectorField(self.grid, data, divfree=True)


def _products(grid, u, dealias):
    """Real-transform coefficients of ``u_i u_j`` for ``i <= j``."""
    out = {}
    for i in range(grid.dim):
        for j in range(i, grid.dim):
            c = grid.forward(u[i] * u[j])
            if dealias:
                c = c * grid.dealias_mask
            out[i, j] = out[j, i] = c
    return out


def nonlinear_term(grid, uh, dealias=True, form="divergence"):
    """Projected nonlinear tendency ``-P div(u (x) u)`` in Fourier space."""
    u = grid.inverse(uh)
    k = grid.odd_wavenumbers
    if form == "divergence":
        prod = _products(grid, u, dealias)
        g = np.stack([sum(1j * k[j] * prod[i, j] for j in range(grid.dim)) for i in range(grid.dim)])
        return -project_coefficients(grid, g)
    if grid.dim == 2:
        w = grid.inverse(1j * k[0] * uh[1] - 1j * k[1] * uh[0])
        lamb = np.stack([u[1] * w, -u[0] * w])
    else:
        w = np.stack(
            [
                grid.inverse(1j * k[1] * uh[2] - 1j * k[2] * uh[1]),
                grid.inverse(1j * k[2] * uh[0] - 1j * k[0] * uh[2]),
                grid.inverse(1j * k[0] * uh[1] - 1j * k[1] * uh[0]),
            ]
        )
        lamb = np.cross(u, w, axis=0)
    lh = grid.forward(lamb)
    if dealias:
        lh = lh * grid.dealias_mask
    return project_coefficients(grid, lh)


def _zero_mean(uh):
    uh[(slice(None),) + (0,) * (uh.ndim - 1)] = 0.0
    return uh


def advance(grid, uh, h, viscosity, n_steps=1, dealias=True, form="divergence"):
    """Integrating-factor RK4 on Fourier coefficients; ``viscosity`` may be zero here."""
    e_half = np.exp(-viscosity * grid.k2 * (h / 2))
    e_full = e_half * e_half
    uh = np.array(uh, dtype=complex)
    for _ in range(n_steps):
        k1 = nonlinear_term(grid, uh, dealias, form)
        k2 = nonlinear_term(grid, e_half * (uh + (h / 2) * k1), dealias, form)
        k3 = nonlinear_term(grid, e_half * uh + (h / 2) * k2, dealias, form)
        k4 = nonlinear_term(grid, e_full * uh + h * e_half * k3, dealias, form)
        uh = e_full * uh + (h / 6) * (e_full * k1 + 2 * e_half * (k2 + k3) + k4)
        _zero_mean(uh)
    return uh


def step(u, cfg):
    """One integrating-factor RK4 step of size ``cfg.dt``."""
    uh = advance(u.grid, u.spectral, cfg.dt, cfg.viscosity, 1, cfg.dealias, cfg.nonlinear)
    if not np.all(np.isfinite(uh)):
        raise BlowUpError("non-finite velocity after one step", last_time=0.0)
    return VectorField.from_spectral(u.grid, uh, divfree=True)


def simulate(u0, cfg, seed=None, runaway_factor=1e3):
    """Integrate from ``u0`` to ``cfg.t_end`` storing every ``snapshot_stride`` steps.

    Raises
    ------
    BlowUpError
        When the state becomes non-finite or its energy exceeds
        ``runaway_factor`` times the initial energy.  The partial record
        up to the last valid snapshot is attached.
    """
    grid = u0.grid
    cfg.check_stability(grid)
    n_steps = cfg.n_steps
    if abs(n_steps * cfg.dt - cfg.t_end) > 1e-9 * cfg.t_end:
        raise ValueError("t_end must be an integer multiple of dt")
    if n_steps % cfg.snapshot_stride:
        raise ValueError("the number of steps must be a multiple of snapshot_stride")
    uh = _zero_mean(np.array(u0.spectral, dtype=complex))
    if cfg.dealias:
        uh = uh * grid.dealias_mask
    first = VectorField.from_spectral(grid, uh, divfree=True)
    e0 = first.energy()
    snaps, times = [first], [0.0]
    for block in range(n_steps // cfg.snapshot_stride):
        uh = advance(grid, uh, cfg.dt, cfg.viscosity, cfg.snapshot_stride, cfg.dealias, cfg.nonlinear)
        t = (block + 1) * cfg.snapshot_stride * cfg.dt
        snap = VectorField.from_spectral(grid, uh, divfree=True)
        energy = snap.energy()
        if not np.isfinite(energy) or energy > runaway_factor * max(e0, 1e-300):
            partial = Trajectory(grid, times, snaps, cfg, e0, seed)
            raise BlowUpError(f"loss of resolution near t={t:g}", last_time=times[-1], trajectory=partial)
        snaps.append(snap)
        times.append(t)
    return Trajectory(grid, np.array(times), tuple(snaps), cfg, e0, seed)


def pressure_coefficients(grid, u, dealias=False):
    """Fourier coefficients of the zero-mean pressure of velocity samples ``u``."""
    prod = _products(grid, u, dealias)
    k = grid.odd_wavenumbers
    rhs = np.zeros(grid.spectral_shape, dtype=complex)
    for i in range(grid.dim):
        for j in range(grid.dim):
            kk = grid.wavenumbers[i] ** 2 if i == j else k[i] * k[j]
            rhs = rhs - kk * prod[i, j]
    k2 = np.where(grid.k2 == 0, 1.0, grid.k2)
    ph = np.where(grid.k2 == 0, 0.0, rhs / k2)
    return ph


def compute_pressure(u, dealias=False):
    """Zero-mean ``P`` with ``-Laplace P = div div (u (x) u)``."""
    return ScalarField.from_spectral(u.grid, pressure_coefficients(u.grid, u.data, dealias))


def poisson_residual(u, p, dealias=False):
    """Relative spectral residual of ``-Laplace P - div div(u (x) u)``."""
    g = u.grid
    prod = _products(g, u.data, dealias)
    k = g.odd_wavenumbers
    src = sum(
        -(g.wavenumbers[i] ** 2 if i == j else k[i] * k[j]) * prod[i, j]
        for i in range(g.dim)
        for j in range(g.dim)
    )
    src = np.where(g.k2 == 0, 0.0, src)
    res = g.k2 * p.spectral - src
    scale = np.max(np.abs(src))
    return float(np.max(np.abs(res)) / scale) if scale > 0 else float(np.max(np.abs(res)))


def time_derivative(u, cfg):
    """``du/dt`` of the semi-discrete system at state ``u``."""
    g = u.grid
    uh = u.spectral
    rhs = nonlinear_term(g, uh, cfg.dealias, cfg.nonlinear) - cfg.viscosity * g.k2 * uh
    return VectorField.from_spectral(g, rhs, divfree=True)


def ns_residual(traj):
    """Largest relative mismatch between consecutive snapshots and one solver block.

    Each stored snapshot is advanced by ``snapshot_stride`` steps of the
    trajectory's own configuration and compared to the next snapshot.
    """
    cfg = traj.config
    worst = 0.0
    for a, b in zip(traj.snapshots[:-1], traj.snapshots[1:]):
        pred = advance(traj.grid, a.spectral, cfg.dt, cfg.viscosity, cfg.snapshot_stride, cfg.dealias, cfg.nonlinear)
        ref = math.sqrt(b.energy()) or 1.0
        diff = VectorField.from_spectral(traj.grid, pred - b.spectral).energy()
        worst = max(worst, math.sqrt(diff) / ref)
    return worst


@dataclass(frozen=True)
class EnergyBudget:
    """Energy identity ``|u(t)|^2 + 2 nu int_0^t |grad u|^2 - |u0|^2`` on the snapshot times."""

    times: np.ndarray
    energy: np.ndarray
    dissipation_rate: np.ndarray
    cumulative_dissipation: np.ndarray
    residual: np.ndarray
    initial_energy: float
    rule: str = "simpson"

    @property
    def max_residual(self):
        return float(np.max(self.residual))

    @property
    def max_abs_residual(self):
        return float(np.max(np.abs(self.residual)))

    @property
    def relative_residual(self):
        if self.initial_energy == 0:
            return self.max_abs_residual
        return self.max_abs_residual / self.initial_energy


def gradient_energy(u):
    """``int |grad u|^2 dx`` from the spectrum."""
    g = u.grid
    return sum(g.spectral_inner(g.k2 * u.spectral[a], u.spectral[a]) for a in range(g.dim))


def _cumulative(y, x, rule):
    if len(x) == 1:
        return np.zeros(1)
    if rule == "simpson" and len(x) >= 3:
        return cumulative_simpson(y, x=x, initial=0.0)
    return cumulative_trapezoid(y, x=x, initial=0.0)


def time_integral(y, x, rule="simpson"):
    """Integral of samples ``y`` over the nodes ``x`` (Simpson or trapezoid)."""
    y = np.asarray(y, dtype=float)
    if len(x) == 1:
        return 0.0
    if rule == "simpson" and len(x) >= 3:
        return float(simpson(y, x=x))
    return float(trapezoid(y, x=x))


def energy_budget(traj, rule="simpson"):
    """Energy budget with cumulative dissipation by composite Simpson (or trapezoid)."""
    nu = traj.config.viscosity
    rate = np.array([2 * nu * gradient_energy(u) for u in traj.snapshots])
    energy = traj.energies
    cum = _cumulative(rate, traj.times, rule)
    e0 = float(traj.initial_energy)
    return EnergyBudget(traj.times, energy, rate, cum, energy + cum - e0, e0, rule)


class SeparableTestFunction:
    """Nonnegative weight ``theta(t) chi(x)`` with a smooth bump ``theta``.

    ``theta`` is ``exp(-1/(1-tau^2))`` in ``tau = (t - center)/half_width``,
    so it vanishes with all derivatives at the ends of its support.
    """

    def __init__(self, spatial, center, half_width):
        self.spatial = np.asarray(spatial, dtype=float)
        self.center = float(center)
        self.half_width = float(half_width)

    def theta(self, t):
        tau = (np.asarray(t, dtype=float) - self.center) / self.half_width
        inside = np.abs(tau) < 1
        safe = np.where(inside, tau, 0.0)
        return np.where(inside, np.exp(-1.0 / (1.0 - safe**2)), 0.0)

    def dtheta(self, t):
        tau = (np.asarray(t, dtype=float) - self.center) / self.half_width
        inside = np.abs(tau) < 1
        safe = np.where(inside, tau, 0.0)
        val = np.exp(-1.0 / (1.0 - safe**2)) * (-2 * safe / (1.0 - safe**2) ** 2) / self.half_width
        return np.where(inside, val, 0.0)

    def support(self):
        return self.center - self.half_width, self.center + self.half_width


def _local_energy_fields(u, p, nu):
    """Spatial fluxes of the local energy balance at one time."""
    g = u.grid
    half = 0.5 * np.sum(u.data**2, axis=0)
    flux = u.data * (half + p.samples)
    k = g.odd_wavenumbers
    fh = g.forward(flux)
    div_flux = g.inverse(sum(1j * k[a] * fh[a] for a in range(g.dim)))
    uh = u.spectral
    grad2 = nu * sum(g.inverse(1j * k[b] * uh[a]) ** 2 for a in range(g.dim) for b in range(g.dim))
    lap_half = nu * g.inverse(-g.k2 * g.forward(half))
    return half, div_flux, grad2, lap_half


def local_energy_residual(traj, test_function, return_terms=False, rule="simpson"):
    """Distributional local energy balance paired with a space-time weight.

    Evaluates ``int int [ -|u|^2/2 d_t phi + (div(u(|u|^2/2 + P)) + nu |grad u|^2
    - nu Laplace |u|^2/2) phi ] dx dt``, which vanishes for smooth solutions.
    The weight must vanish at the ends of the stored time range.
    """
    g = traj.grid
    dv = g.cell_volume
    chi = test_function.spatial
    t_lo, t_hi = test_function.support()
    if t_lo < traj.t_start - 1e-12 or t_hi > traj.t_stop + 1e-12:
        raise ValueError("test function support must lie inside the trajectory")
    terms = {"time": [], "flux": [], "dissipation": [], "laplacian": []}
    for t, u in zip(traj.times, traj.snapshots):
        th, dth = float(test_function.theta(t)), float(test_function.dtheta(t))
        if th == 0.0 and dth == 0.0:
            for key in terms:
                terms[key].append(0.0)
            continue
        p = compute_pressure(u)
        half, div_flux, grad2, lap_half = _local_energy_fields(u, p, traj.config.viscosity)
        terms["time"].append(-dth * float(np.sum(half * chi)) * dv)
        terms["flux"].append(th * float(np.sum(div_flux * chi)) * dv)
        terms["dissipation"].append(th * float(np.sum(grad2 * chi)) * dv)
        terms["laplacian"].append(-th * float(np.sum(lap_half * chi)) * dv)
    integrals = {key: time_integral(val, traj.times, rule) for key, val in terms.items()}
    residual = sum(integrals.values())
    if return_terms:
        integrals["scale"] = sum(abs(v) for v in integrals.values())
        return residual, integrals
    return residual
