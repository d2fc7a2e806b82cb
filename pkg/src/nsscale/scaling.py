"""Canonical rescaling ``u_eps(s, y) = eps u(t0 + eps^2 s, x0 + eps y)``.

A rescaled field keeps the ``n`` samples per axis and lives on the box of
side ``L/eps``; its nodes are the source nodes translated by ``x0``.  The
translation is applied as a Fourier phase shift, so the construction is
exact for every ``eps > 0``, dyadic or not.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .fields import Grid, VectorField
from .norms import Region, dissipation, f_norm, mixed_norm, NormSpec
from .solver import Trajectory

__all__ = [
    "ScaleParams",
    "ScalingFit",
    "rescale_field",
    "rescale_trajectory",
    "rescale_region",
    "scaling_exponent_fit",
    "QUANTITIES",
]


@dataclass(frozen=True)
class ScaleParams:
    epsilon: float
    t0: float = 0.0
    x0: tuple = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.t0 < 0:
            raise ValueError("t0 must be nonnegative")

    @property
    def dyadic(self):
        j = -math.log2(self.epsilon)
        return abs(j - round(j)) < 1e-12 and j >= -1e-12

    def center(self, dim):
        return np.zeros(dim) if self.x0 is None else np.asarray(self.x0, dtype=float)

    def compose(self, inner):
        """Parameters of rescaling by ``self`` and then by ``inner``."""
        dim = len(self.x0) if self.x0 is not None else (len(inner.x0) if inner.x0 is not None else 3)
        x0 = self.center(dim) + self.epsilon * inner.center(dim)
        return ScaleParams(self.epsilon * inner.epsilon, self.t0 + self.epsilon**2 * inner.t0, tuple(x0))


def _shifted(u, x0, epsilon):
    """``epsilon * u(x0 + x_j)`` on the dilated grid."""
    g = u.grid
    phase = np.exp(1j * sum(k * x0[a] for a, k in enumerate(g.odd_wavenumbers)))
    new_grid = Grid(g.dim, g.n, g.length / epsilon)
    # Nyquist coefficients of a real field are real; the Nyquist-free
    # shift keeps them so and the shifted field stays real.
    nyq_shift = np.ones(g.spectral_shape, dtype=complex)
    for a, (m, k) in enumerate(zip(g.modes, g.wavenumbers)):
        nyq = np.abs(m) == g.n // 2
        if np.any(nyq):
            nyq_shift = nyq_shift * np.where(nyq, np.cos(k * x0[a]), 1.0)
    return VectorField.from_spectral(new_grid, epsilon * u.spectral * phase * nyq_shift, divfree=u.divfree)


def rescale_field(source, sp, s=0.0, allow_interpolation=False):
    """Rescaled velocity at frame time ``s``.

    Parameters
    ----------
    source : VectorField or Trajectory
        A field is taken to be the state at ``sp.t0`` (then ``s`` must be 0).
    allow_interpolation : bool
        Permit cubic interpolation in time when ``t0 + eps^2 s`` is not a
        stored snapshot time.
    """
    if isinstance(source, VectorField):
        if s != 0:
            raise ValueError("a single field can only be rescaled at s = 0")
        u = source
    else:
        t = sp.t0 + sp.epsilon**2 * s
        if not source.contains(t, t):
            raise ValueError(f"source time {t} outside the trajectory")
        on_node = np.any(np.abs(source.times - t) <= 1e-12 * max(1.0, t))
        if not on_node and not allow_interpolation:
            raise ValueError(f"source time {t} is not a snapshot; pass allow_interpolation=True")
        u = source.at(t)
    return _shifted(u, sp.center(u.grid.dim), sp.epsilon)


def rescale_trajectory(traj, sp, s_range=None):
    """Rescale every snapshot with source time in the requested window.

    The induced times are ``(tau - t0)/eps^2``; the time step becomes
    ``dt/eps^2`` and the viscosity is unchanged, so the result is again a
    solution of the same equations.
    """
    eps2 = sp.epsilon**2
    tol = 1e-12 * max(1.0, traj.t_stop)
    if s_range is None:
        lo, hi = sp.t0, traj.t_stop
    else:
        lo, hi = sp.t0 + eps2 * s_range[0], sp.t0 + eps2 * s_range[1]
    if not traj.contains(lo, hi):
        raise ValueError(f"rescaled window [{lo}, {hi}] is outside the source trajectory")
    sel = np.flatnonzero((traj.times >= lo - tol) & (traj.times <= hi + tol))
    if sel.size == 0:
        raise ValueError("no snapshots inside the rescaled window")
    x0 = sp.center(traj.grid.dim)
    snaps = tuple(_shifted(traj.snapshots[i], x0, sp.epsilon) for i in sel)
    times = (traj.times[sel] - sp.t0) / eps2
    cfg = traj.config
    new_cfg = replace(cfg, dt=cfg.dt / eps2, t_end=cfg.t_end / eps2)
    e_start = traj.at(min(max(sp.t0, traj.t_start), traj.t_stop)).energy() / sp.epsilon
    e0 = max(e_start, float(max(u.energy() for u in snaps)))
    return Trajectory(snaps[0].grid, times, snaps, new_cfg, e0, traj.seed)


def rescale_region(region, sp, dim):
    """The region in rescaled variables corresponding to a source region.

    Discrete node counts of the two regions agree exactly when ``x0`` is a
    source grid node.
    """
    eps = sp.epsilon
    t0 = (region.t0 - sp.t0) / eps**2
    t1 = (region.t1 - sp.t0) / eps**2
    if region.lower is None:
        return Region(t0, t1)
    x0 = sp.center(dim)
    lower = tuple((np.asarray(region.lower) - x0) / eps)
    size = tuple(np.asarray(region.size) / eps)
    return Region(t0, t1, lower, size)


def _grad_lp(n, p):
    def evaluate(traj, region):
        return mixed_norm(traj, NormSpec(order=n, p_t=p, q_x=p, region=region)) ** p

    return evaluate


QUANTITIES = {
    "dissipation": lambda traj, region: dissipation(traj, region),
    "f_norm": lambda traj, region: f_norm(traj, region),
    "grad_l2": _grad_lp(1, 2.0),
}


@dataclass(frozen=True)
class ScalingFit:
    slope: float
    intercept: float
    r2: float
    epsilons: tuple
    values: tuple


def scaling_exponent_fit(quantity, traj, epsilons, t0=0.0, x0=None, region=None, n=None, p=None):
    """Least-squares slope of ``log quantity(u_eps)`` against ``log eps``.

    ``quantity`` is a name in :data:`QUANTITIES`, ``"grad_lp"`` (with ``n``
    and ``p``), or a callable ``(trajectory, region) -> float``.  The
    source window ``region`` (default: ``[t0, end]`` times the full box) is
    mapped to the matching window of every rescaled trajectory.
    """
    if quantity == "grad_lp":
        evaluate = _grad_lp(int(n), float(p))
    elif isinstance(quantity, str):
        evaluate = QUANTITIES[quantity]
    else:
        evaluate = quantity
    epsilons = tuple(float(e) for e in epsilons)
    if len(epsilons) < 3:
        raise ValueError("need at least three epsilons for a fit")
    region = Region(t0, traj.t_stop) if region is None else region
    if region.t0 < t0:
        raise ValueError("the source window must start at or after t0")
    values = []
    for eps in epsilons:
        sp = ScaleParams(eps, t0, x0)
        rt = rescale_trajectory(traj, sp, s_range=((region.t0 - t0) / eps**2, (region.t1 - t0) / eps**2))
        val = float(evaluate(rt, rescale_region(region, sp, traj.grid.dim)))
        if not val > 0 or not math.isfinite(val):
            raise ValueError(f"degenerate quantity {val} at epsilon {eps}")
        values.append(val)
    x, y = np.log(epsilons), np.log(values)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return ScalingFit(float(slope), float(intercept), r2, epsilons, tuple(values))
