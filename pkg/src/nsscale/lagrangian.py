"""Backward flow of the mollified velocity, tube integrals and local frames.

For a base point ``(t, x)`` and a scale ``eps`` the path ``X(s)`` solves
``dX/ds = u_eps(s, X)`` backwards from ``X(t) = x`` over ``[t - 4 eps^2, t]``,
where ``u_eps`` is the velocity mollified by the standard bump of width
``eps``.  Along the path the module evaluates

* tube integrals ``int_{t-4eps^2}^t int_{B_2eps} F(s, X(s) + y) dy ds`` of the
  pivot integrand ``F = |M((-Laplace)^(-delta/2) grad^2 P)|^(1+gamma) +
  |grad u|^2 + |grad^2 P|``, with the ball integral done by the exact
  Fourier multiplier of the ball;
* the good-set test ``(1/eps) * tube <= eta_star * eps^delta`` and the
  measure of its complement on a lattice of base points;
* local frames ``v_eps(s, y) = eps u(t + eps^2 s, X + eps y) - eps u_eps(t +
  eps^2 s, X)`` and ``P_eps = eps^2 P(t + eps^2 s, X + eps y) + eps y .
  U'(s)`` with ``U' = eps^2 (d_t u_eps + (u_eps . grad) u_eps)(t + eps^2 s, X)``
  on ``Q_2 = (-4, 0) x B_2``.

Every off-grid value is an exact trigonometric evaluation; values between
snapshots come from cubic Lagrange interpolation of Fourier coefficients.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from itertools import product
from typing import Optional

import numpy as np
from scipy.integrate import simpson

from .fields import evaluate_coefficients, full_coefficients, multi_indices
from .harmonic import Mollifier, ball_multiplier, default_ladder, mollify
from .norms import pivot_exponents, pivot_integrands
from .solver import compute_pressure, lagrange_weights, time_derivative

__all__ = [
    "SpectralHistory",
    "FlowPath",
    "PivotIntegrand",
    "GoodSetParams",
    "BaseLattice",
    "ComplementMeasure",
    "FlowFrame",
    "BallRule",
    "ball_rule",
    "ball_volume",
    "mollified_history",
    "integrate_flow",
    "tube_integral",
    "tube_average",
    "good_set_values",
    "good_set_indicator",
    "synthetic_threshold",
    "complement_measure_check",
    "build_local_frames",
    "build_local_frame",
    "frame_integrals",
    "change_of_variables_check",
    "ckn_criterion",
    "derivative_at_basepoint",
    "fd_weights",
    "write_frame",
]

STEPS_PER_WINDOW = 32  # RK4 steps over 4 eps^2, so h = eps^2 / 8
_TIME_TOL = 1e-12


def ball_volume(dim, radius=1.0):
    return (math.pi if dim == 2 else 4.0 * math.pi / 3.0) * radius**dim


class SpectralHistory:
    """Lazily computed per-snapshot fields with time-interpolated trigonometric evaluation.

    Parameters
    ----------
    traj : Trajectory
    fields : callable
        ``fields(index) -> ndarray`` of shape ``(m, *grid.shape)``.
    cache_size : int
        Number of snapshots whose Fourier coefficients are kept.
    tol : float
        Relative tolerance of the non-uniform FFT.
    """

    def __init__(self, traj, fields, cache_size=16, tol=1e-13):
        self.traj = traj
        self.tol = tol
        self.grid = traj.grid
        self._fields = fields
        self._cache = OrderedDict()
        self._cache_size = cache_size
        self._last = (None, None)

    def coefficients(self, i):
        if i in self._cache:
            self._cache.move_to_end(i)
            return self._cache[i]
        data = np.asarray(self._fields(i), dtype=float)
        coeffs = full_coefficients(self.grid, data)
        self._cache[i] = coeffs
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return coeffs

    def coefficients_at(self, t):
        if self._last[0] == t:
            return self._last[1]
        traj = self.traj
        tol = _TIME_TOL * max(1.0, abs(t))
        if t < traj.t_start - tol or t > traj.t_stop + tol:
            raise ValueError(f"time {t} outside the trajectory [{traj.t_start}, {traj.t_stop}]")
        hit = np.flatnonzero(np.abs(traj.times - t) <= tol)
        if hit.size:
            out = self.coefficients(int(hit[0]))
        else:
            idx, w = lagrange_weights(traj.times, t)
            out = sum(wi * self.coefficients(int(i)) for i, wi in zip(idx, w))
        self._last = (t, out)
        return out

    def evaluate(self, t, points):
        """Values at ``points`` (``(P, dim)``) and time ``t``; shape ``(m, P)``."""
        coeffs = self.coefficients_at(t)
        return evaluate_coefficients(self.grid, coeffs, points, self.tol)


def _check_scale(traj, epsilon):
    g = traj.grid
    if epsilon > g.length / 16 * (1 + 1e-12):
        raise ValueError(f"epsilon {epsilon:g} exceeds L/16 = {g.length / 16:g}")
    if len(traj) > 1 and traj.spacing > epsilon**2 / 4 * (1 + 1e-9):
        raise ValueError(
            f"snapshot spacing {traj.spacing:g} exceeds eps^2/4 = {epsilon**2 / 4:g}; "
            "store snapshots more often"
        )


def _check_window(traj, epsilon, t):
    tol = _TIME_TOL * max(1.0, abs(t))
    if t - 4 * epsilon**2 < traj.t_start - tol:
        raise ValueError(f"window underflow: t - 4 eps^2 = {t - 4 * epsilon**2:g} precedes the first snapshot")
    if t > traj.t_stop + tol:
        raise ValueError(f"base time {t:g} is after the last snapshot")


def mollified_history(traj, epsilon, cache_size=16):
    moll = Mollifier(traj.grid.dim, epsilon)
    return SpectralHistory(traj, lambda i: mollify(traj.snapshots[i], moll).data, cache_size)


@dataclass(frozen=True)
class FlowPath:
    """Backward path of a batch of base points.

    ``times`` ascend from ``t - 4 eps^2`` to ``t``; ``positions`` has shape
    ``(len(times), P, dim)`` and ends with the base points themselves.
    """

    base_t: float
    base_x: np.ndarray
    epsilon: float
    times: np.ndarray
    positions: np.ndarray
    jacobian_det: Optional[np.ndarray] = None

    @property
    def frame_times(self):
        return (self.times - self.base_t) / self.epsilon**2

    def select(self, i):
        det = None if self.jacobian_det is None else self.jacobian_det[:, i : i + 1]
        return FlowPath(self.base_t, self.base_x[i : i + 1], self.epsilon, self.times, self.positions[:, i : i + 1], det)


def integrate_flow(traj, epsilon, t, x, with_jacobian=False, substeps=1, history=None, fd_step=1e-5):
    """Backward RK4 path of the mollified velocity from ``X(t) = x``.

    The window ``[t - 4 eps^2, t]`` is split into 32 steps of size
    ``eps^2/8`` (each optionally subdivided ``substeps`` times).  With
    ``with_jacobian`` the flow gradient is estimated by central differences
    of neighbouring paths and its determinant is stored.
    """
    _check_scale(traj, epsilon)
    _check_window(traj, epsilon, t)
    g = traj.grid
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != g.dim:
        raise ValueError(f"base points must have {g.dim} coordinates")
    n_base = x.shape[0]
    hist = mollified_history(traj, epsilon) if history is None else history
    pts = x
    if with_jacobian:
        offsets = [np.eye(g.dim)[a] * sgn * fd_step for a in range(g.dim) for sgn in (1, -1)]
        pts = np.concatenate([x] + [x + o for o in offsets])

    def velocity(tau, X):
        return hist.evaluate(tau, X).T

    big = epsilon**2 / 8
    h = big / substeps
    X = pts.copy()
    out = [X.copy()]
    times = [t]
    for j in range(STEPS_PER_WINDOW):
        ta = t - j * big
        for sub in range(substeps):
            tb = ta - sub * h
            k1 = velocity(tb, X)
            k2 = velocity(tb - h / 2, X - (h / 2) * k1)
            k3 = velocity(tb - h / 2, X - (h / 2) * k2)
            k4 = velocity(tb - h, X - h * k3)
            X = X - (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        out.append(X.copy())
        times.append(t - (j + 1) * big)
    positions = np.stack(out[::-1])
    times = np.array(times[::-1])
    det = None
    if with_jacobian:
        jac = np.empty((positions.shape[0], n_base, g.dim, g.dim))
        for a in range(g.dim):
            plus = positions[:, n_base * (1 + 2 * a) : n_base * (2 + 2 * a)]
            minus = positions[:, n_base * (2 + 2 * a) : n_base * (3 + 2 * a)]
            jac[..., a] = (plus - minus) / (2 * fd_step)
        det = np.linalg.det(jac)
        positions = positions[:, :n_base]
    return FlowPath(float(t), x.copy(), float(epsilon), times, positions, det)


class PivotIntegrand:
    """Per-snapshot pivot integrand, or a synthetic space-time constant.

    ``terms`` selects which of ``"mterm"``, ``"grad"`` and ``"hess"`` enter
    the sum.
    """

    TERMS = ("mterm", "grad", "hess")

    def __init__(self, traj, delta, gamma, ladder=None, terms=TERMS, constant=None, cache_size=32):
        self.traj = traj
        self.delta = float(delta)
        self.gamma = float(gamma)
        self.ladder = default_ladder(traj.grid) if ladder is None else ladder
        self.terms = tuple(terms)
        unknown = set(self.terms) - set(self.TERMS)
        if unknown:
            raise ValueError(f"unknown terms {sorted(unknown)}")
        self.constant = constant
        self._sum = {}
        self._parts = OrderedDict()
        self._cache_size = cache_size

    @classmethod
    def synthetic(cls, traj, value, delta=0.625, gamma=1.0 / 7.0):
        return cls(traj, delta, gamma, constant=float(value))

    def parts(self, i):
        """``(mterm, grad, hess)`` samples at snapshot ``i``."""
        if i in self._parts:
            self._parts.move_to_end(i)
            return self._parts[i]
        out = pivot_integrands(self.traj.snapshots[i], self.delta, self.gamma, self.ladder)
        self._parts[i] = out
        if len(self._parts) > self._cache_size:
            self._parts.popitem(last=False)
        return out

    def field(self, i):
        if self.constant is not None:
            return np.full(self.traj.grid.shape, self.constant)
        if i not in self._sum:
            named = dict(zip(self.TERMS, self.parts(i)))
            self._sum[i] = sum(named[name] for name in self.terms)
        return self._sum[i]

    def averaged_history(self, radius, cache_size=16):
        """History of the exact ball average of the integrand at ``radius``."""
        g = self.traj.grid
        mult = ball_multiplier(g, radius)

        def fields(i):
            if self.constant is not None:
                return np.full((1,) + g.shape, self.constant)
            return g.inverse(g.forward(self.field(i)) * mult)[None]

        return SpectralHistory(self.traj, fields, cache_size)


def tube_integral(traj, path, integrand, history=None):
    """``int_{t-4eps^2}^t int_{B_2eps} F(s, X(s) + y) dy ds`` for every base point.

    Space: exact ball average of the trigonometric interpolant of ``F``.
    Time: composite Simpson over the 33 path nodes.
    """
    eps = path.epsilon
    hist = integrand.averaged_history(2 * eps) if history is None else history
    vals = np.stack([hist.evaluate(tau, X)[0] for tau, X in zip(path.times, path.positions)])
    time_int = simpson(vals, x=path.times, axis=0)
    return time_int * ball_volume(traj.grid.dim, 2 * eps)


def tube_average(traj, path, integrand, normalization="average", history=None):
    """Tube integral divided by the tube measure (``"average"``) or by ``(2 eps)^(dim+2)`` (``"cylinder"``)."""
    integral = tube_integral(traj, path, integrand, history)
    eps = path.epsilon
    dim = traj.grid.dim
    if normalization == "average":
        return integral / (4 * eps**2 * ball_volume(dim, 2 * eps))
    if normalization == "cylinder":
        return integral / (2 * eps) ** (dim + 2)
    raise ValueError(f"unknown normalization {normalization!r}")


@dataclass(frozen=True)
class GoodSetParams:
    delta: float
    eta_star: float
    epsilon: float
    gamma: float = 1.0 / 7.0

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if not self.eta_star > 0 or not self.epsilon > 0:
            raise ValueError("eta_star and epsilon must be positive")

    @classmethod
    def from_s(cls, s, eta_star, epsilon):
        delta, gamma = pivot_exponents(s)
        return cls(delta, eta_star, epsilon, gamma)

    @property
    def threshold(self):
        return self.eta_star * self.epsilon**self.delta


def good_set_values(traj, params, t, x, integrand=None, path=None, histories=None):
    """``(1/eps) * tube integral`` per base point and the threshold ``eta_star eps^delta``."""
    eps = params.epsilon
    if t < 4 * eps**2 - _TIME_TOL:
        raise ValueError(f"base time {t:g} is below 4 eps^2 = {4 * eps**2:g}")
    histories = {} if histories is None else histories
    if integrand is None:
        integrand = PivotIntegrand(traj, params.delta, params.gamma)
    if path is None:
        if "velocity" not in histories:
            histories["velocity"] = mollified_history(traj, eps)
        path = integrate_flow(traj, eps, t, x, history=histories["velocity"])
    if "tube" not in histories:
        histories["tube"] = integrand.averaged_history(2 * eps)
    values = tube_integral(traj, path, integrand, histories["tube"]) / eps
    return values, params.threshold


def good_set_indicator(traj, params, t, x, integrand=None, path=None, histories=None):
    """Membership of base points ``(t, x)`` in the good set."""
    values, threshold = good_set_values(traj, params, t, x, integrand, path, histories)
    return values <= threshold


def synthetic_threshold(dim, epsilon, value):
    """``(1/eps) * c * 4 eps^2 * |B_2eps|``: the good-set functional of the constant integrand ``c``."""
    return value * 4 * epsilon**2 * ball_volume(dim, 2 * epsilon) / epsilon


@dataclass(frozen=True)
class BaseLattice:
    """Cell-centred lattice of base points ``n_t x n_x^dim`` in a space-time box."""

    t0: float
    t1: float
    n_t: int = 16
    n_x: int = 16
    lower: Optional[tuple] = None
    size: Optional[tuple] = None

    def spatial_box(self, grid):
        lower = np.zeros(grid.dim) if self.lower is None else np.asarray(self.lower, dtype=float)
        size = np.full(grid.dim, grid.length) if self.size is None else np.asarray(self.size, dtype=float)
        return lower, size

    def times(self):
        dt = (self.t1 - self.t0) / self.n_t
        return self.t0 + (np.arange(self.n_t) + 0.5) * dt

    def points(self, grid):
        lower, size = self.spatial_box(grid)
        axes = [lower[a] + (np.arange(self.n_x) + 0.5) * size[a] / self.n_x for a in range(grid.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def box_measure(self, grid):
        _, size = self.spatial_box(grid)
        return (self.t1 - self.t0) * float(np.prod(size))

    def cell_measure(self, grid):
        return self.box_measure(grid) / (self.n_t * self.n_x**grid.dim)


@dataclass(frozen=True)
class ComplementMeasure:
    measured_measure: float
    bound_ratio: float
    n_bad: int
    n_total: int
    error_bar: float
    box_measure: float
    values: np.ndarray = field(repr=False, default=None)
    threshold: float = 0.0
    bad: np.ndarray = field(repr=False, default=None)


def complement_measure_check(traj, params, lattice, integrand=None):
    """Measure of the bad set on a base lattice and its ratio to ``eps^(4-delta) (E0 + E0^(1+gamma)) / eta_star``."""
    g = traj.grid
    eps = params.epsilon
    if lattice.times()[0] < 4 * eps**2 - _TIME_TOL:
        raise ValueError("every base time must be at least 4 eps^2")
    if integrand is None:
        integrand = PivotIntegrand(traj, params.delta, params.gamma)
    pts = lattice.points(g)
    histories = {"velocity": mollified_history(traj, eps), "tube": integrand.averaged_history(2 * eps)}
    values = []
    for t in lattice.times():
        vals, threshold = good_set_values(traj, params, float(t), pts, integrand, histories=histories)
        values.append(vals)
    values = np.stack(values)
    bad = values > params.threshold
    n_bad = int(np.count_nonzero(bad))
    n_total = int(bad.size)
    box = lattice.box_measure(g)
    measured = box * n_bad / n_total
    e0 = float(traj.initial_energy)
    denom = eps ** (4 - params.delta) * (e0 + e0 ** (1 + params.gamma)) / params.eta_star
    ratio = measured / denom if denom > 0 else 0.0
    return ComplementMeasure(measured, ratio, n_bad, n_total, lattice.cell_measure(g), box, values, params.threshold, bad)


@dataclass(frozen=True)
class BallRule:
    """Quadrature on ``B_radius`` with composite radial Gauss-Legendre intervals."""

    points: np.ndarray
    weights: np.ndarray
    radius: np.ndarray


def ball_rule(dim, breaks=(0.0, 0.5, 1.0, 2.0), n_radial=5, n_polar=5, n_azimuth=10):
    """Tensor rule: composite radial GL, GL in ``cos(theta)`` and uniform azimuth (uniform angle in 2D)."""
    xr, wr = np.polynomial.legendre.leggauss(n_radial)
    radii, rw = [], []
    for a, b in zip(breaks[:-1], breaks[1:]):
        radii.append(0.5 * (b - a) * (xr + 1) + a)
        rw.append(0.5 * (b - a) * wr)
    radii, rw = np.concatenate(radii), np.concatenate(rw)
    phi = 2 * np.pi * np.arange(n_azimuth) / n_azimuth
    wphi = np.full(n_azimuth, 2 * np.pi / n_azimuth)
    if dim == 2:
        r, ph = np.meshgrid(radii, phi, indexing="ij")
        w = np.outer(rw * radii, wphi)
        pts = np.stack([r * np.cos(ph), r * np.sin(ph)], axis=-1)
    else:
        mu, wmu = np.polynomial.legendre.leggauss(n_polar)
        r, m, ph = np.meshgrid(radii, mu, phi, indexing="ij")
        w = (rw * radii**2)[:, None, None] * wmu[None, :, None] * wphi[None, None, :]
        sin = np.sqrt(1 - m**2)
        pts = np.stack([r * sin * np.cos(ph), r * sin * np.sin(ph), r * m], axis=-1)
    pts = pts.reshape(-1, dim)
    return BallRule(pts, w.ravel(), np.linalg.norm(pts, axis=-1))


def _frame_node_indices():
    """Path nodes used as frame times: step 1/2 on ``[-4, -1]`` and 1/8 on ``[-1, 0]``."""
    coarse = list(range(0, 25, 4))
    fine = list(range(25, STEPS_PER_WINDOW + 1))
    return np.array(coarse + fine)


def _frame_time_weights(s):
    """Composite Simpson weights on the two uniform blocks; also the ``[-1, 0]`` block alone."""
    w_all = np.zeros(s.size)
    w_q1 = np.zeros(s.size)
    split = int(np.flatnonzero(np.isclose(s, -1.0))[0])
    for lo, hi, target in ((0, split, w_all), (split, s.size - 1, w_all), (split, s.size - 1, w_q1)):
        sel = np.arange(lo, hi + 1)
        target[sel] += simpson(np.eye(sel.size), x=s[sel], axis=1)
    return w_all, w_q1


@dataclass(frozen=True)
class FlowFrame:
    """Local rescaled data around one base point on ``Q_2``.

    Arrays are indexed ``[frame time, (component,) quadrature node]``.
    ``grad_v2`` holds ``|grad_y v_eps|^2 = eps^4 |grad u|^2``, ``hess_p``
    holds ``|grad_y^2 P_eps| = eps^4 |grad^2 P|`` and ``mterm`` the frame
    version ``eps^((4-delta)(1+gamma)) M(...)^(1+gamma)`` of the maximal term.
    """

    base_t: float
    base_x: np.ndarray
    epsilon: float
    delta: float
    gamma: float
    path: FlowPath
    s: np.ndarray
    s_weights: np.ndarray
    s_weights_q1: np.ndarray
    rule: BallRule
    v: np.ndarray
    p: np.ndarray
    grad_v2: np.ndarray
    hess_p: np.ndarray
    mterm: np.ndarray
    star: np.ndarray
    star_scale: np.ndarray
    U: np.ndarray
    U_prime: np.ndarray
    f_delta_tube: Optional[float] = None
    good: Optional[bool] = None


def _frame_fields(traj, integrand):
    def fields(i):
        u = traj.snapshots[i]
        mterm, grad, hess = integrand.parts(i)
        p = compute_pressure(u).samples
        return np.concatenate([u.data, p[None], grad[None], hess[None], mterm[None]])

    return fields


def _material_fields(traj, epsilon):
    g = traj.grid
    moll = Mollifier(g.dim, epsilon)
    k = g.odd_wavenumbers

    def fields(i):
        u = traj.snapshots[i]
        ue = mollify(u, moll)
        due = mollify(time_derivative(u, traj.config), moll)
        grad = [g.inverse(1j * k[j] * ue.spectral[c]) for c in range(g.dim) for j in range(g.dim)]
        return np.concatenate([ue.data, due.data, np.stack(grad)])

    return fields


def build_local_frames(traj, epsilon, delta, t, x, gamma=None, ladder=None, rule=None, star_rule=None,
                       params=None, integrand=None, histories=None, tol=1e-10):
    """Local frames for a batch of base points sharing the base time ``t``.

    Parameters
    ----------
    params : GoodSetParams, optional
        When given, each frame also records its tube value and good-set flag.
    histories : dict, optional
        Shared caches; reuse one dict across calls on the same trajectory
        and scale.
    tol : float
        Non-uniform FFT tolerance for the frame samples (the path itself is
        always integrated at full precision).
    """
    g = traj.grid
    dim = g.dim
    gamma = pivot_exponents_from_delta(delta) if gamma is None else gamma
    if t < 4 * epsilon**2 - _TIME_TOL:
        raise ValueError(f"base time {t:g} is below 4 eps^2")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n_base = x.shape[0]
    rule = ball_rule(dim) if rule is None else rule
    star_rule = ball_rule(dim, breaks=(0.0, 0.5, 1.0), n_radial=16) if star_rule is None else star_rule
    histories = {} if histories is None else histories
    if integrand is None:
        integrand = histories.get("integrand") or PivotIntegrand(traj, delta, gamma, ladder)
    histories.setdefault("integrand", integrand)
    if "velocity" not in histories:
        histories["velocity"] = mollified_history(traj, epsilon)
    if "frame" not in histories:
        histories["frame"] = SpectralHistory(traj, _frame_fields(traj, integrand), cache_size=8, tol=tol)
    if "raw" not in histories:
        histories["raw"] = SpectralHistory(traj, lambda i: traj.snapshots[i].data, cache_size=8, tol=tol)
    if "material" not in histories:
        histories["material"] = SpectralHistory(traj, _material_fields(traj, epsilon), cache_size=8)
    path = integrate_flow(traj, epsilon, t, x, history=histories["velocity"])

    nodes = _frame_node_indices()
    s = path.frame_times[nodes]
    w_all, w_q1 = _frame_time_weights(s)
    phi = Mollifier(dim, 1.0).profile(star_rule.points) * star_rule.weights
    n_q = rule.points.shape[0]
    fr, mat, raw = histories["frame"], histories["material"], histories["raw"]
    frac_scale = epsilon ** ((4 - delta) * (1 + gamma))
    v = np.empty((nodes.size, n_base, dim, n_q))
    p = np.empty((nodes.size, n_base, n_q))
    grad_v2 = np.empty_like(p)
    hess_p = np.empty_like(p)
    mterm = np.empty_like(p)
    star = np.empty((nodes.size, n_base, dim))
    star_scale = np.empty((nodes.size, n_base))
    U = np.empty((nodes.size, n_base, dim))
    Up = np.empty_like(U)
    for a, k in enumerate(nodes):
        tau = float(path.times[k])
        X = path.positions[k]
        base = mat.evaluate(tau, X)
        ue = base[:dim]
        due = base[dim : 2 * dim]
        grad = base[2 * dim :].reshape(dim, dim, n_base)
        uprime = epsilon**2 * (due + np.einsum("jp,ijp->ip", ue, grad))
        pts = (X[:, None, :] + epsilon * rule.points[None]).reshape(-1, dim)
        vals = fr.evaluate(tau, pts).reshape(-1, n_base, n_q)
        v[a] = np.moveaxis(epsilon * vals[:dim] - epsilon * ue[:, :, None], 0, 1)
        ydotU = np.einsum("qd,dp->pq", rule.points, uprime)
        p[a] = epsilon**2 * vals[dim] + epsilon * ydotU
        grad_v2[a] = epsilon**4 * vals[dim + 1]
        hess_p[a] = epsilon**4 * vals[dim + 2]
        mterm[a] = frac_scale * vals[dim + 3]
        spts = (X[:, None, :] + epsilon * star_rule.points[None]).reshape(-1, dim)
        us = raw.evaluate(tau, spts).reshape(dim, n_base, -1)
        vs = epsilon * us - epsilon * ue[:, :, None]
        star[a] = np.einsum("dpq,q->pd", vs, phi)
        star_scale[a] = epsilon * np.max(np.abs(us), axis=(0, 2))
        U[a] = ue.T
        Up[a] = uprime.T

    tube = good = None
    if params is not None:
        if "tube" not in histories:
            histories["tube"] = PivotIntegrand.averaged_history(integrand, 2 * epsilon)
        tube = tube_integral(traj, path, integrand, histories["tube"]) / epsilon
        good = tube <= params.threshold
    frames = []
    for i in range(n_base):
        frames.append(
            FlowFrame(
                base_t=float(t),
                base_x=x[i].copy(),
                epsilon=float(epsilon),
                delta=float(delta),
                gamma=float(gamma),
                path=path.select(i),
                s=s,
                s_weights=w_all,
                s_weights_q1=w_q1,
                rule=rule,
                v=v[:, i],
                p=p[:, i],
                grad_v2=grad_v2[:, i],
                hess_p=hess_p[:, i],
                mterm=mterm[:, i],
                star=star[:, i],
                star_scale=star_scale[:, i],
                U=U[:, i],
                U_prime=Up[:, i],
                f_delta_tube=None if tube is None else float(tube[i]),
                good=None if good is None else bool(good[i]),
            )
        )
    return frames


def pivot_exponents_from_delta(delta):
    """``gamma`` matching ``delta = 5s/(1+4s)``."""
    s = delta / (5 - 4 * delta)
    return pivot_exponents(s)[1]


def build_local_frame(traj, epsilon, delta, t, x, **kwargs):
    """Single base point version of :func:`build_local_frames`."""
    return build_local_frames(traj, epsilon, delta, t, np.atleast_2d(x), **kwargs)[0]


def frame_integrals(frame, radius=2.0, q1=False):
    """Frame integrals of ``|grad v|^2``, ``|grad^2 P|`` and the maximal term over ``(-r^2, 0) x B_r``.

    Supported cylinders: ``Q_2`` (default) and ``Q_1`` (``radius=1, q1=True``).
    """
    ws = frame.s_weights_q1 if q1 else frame.s_weights
    mask = frame.rule.radius <= radius * (1 + 1e-12)
    wy = np.where(mask, frame.rule.weights, 0.0)
    return {
        "grad": float(ws @ frame.grad_v2 @ wy),
        "hess": float(ws @ frame.hess_p @ wy),
        "mterm": float(ws @ frame.mterm @ wy),
    }


def change_of_variables_check(traj, frames, histories=None):
    """Compare frame integrals of ``eps^4 (|grad u|^2 + |grad^2 P|)`` on ``Q_2`` with ``eps^(2-dim)`` times the lab tube integral.

    Returns an array of rows ``(frame_value, scaled_lab_value, relative_error)``.
    """
    histories = {} if histories is None else histories
    out = []
    by_path = {}
    for f in frames:
        by_path.setdefault((f.base_t, f.epsilon), []).append(f)
    for (t, eps), group in by_path.items():
        key = ("cov", eps)
        if key not in histories:
            integ = PivotIntegrand(traj, group[0].delta, group[0].gamma, terms=("grad", "hess"))
            histories[key] = integ.averaged_history(2 * eps)
        positions = np.concatenate([f.path.positions for f in group], axis=1)
        path = FlowPath(t, np.stack([f.base_x for f in group]), eps, group[0].path.times, positions)
        lab = tube_integral(traj, path, None, histories[key])
        scale = eps ** (2 - traj.grid.dim)
        for f, val in zip(group, lab):
            fi = frame_integrals(f)
            frame_val = fi["grad"] + fi["hess"]
            lab_val = scale * val
            rel = abs(frame_val - lab_val) / max(abs(lab_val), 1e-300)
            out.append((frame_val, lab_val, rel))
    return np.array(out)


@dataclass(frozen=True)
class CKNResult:
    sup_energy: float
    dissipation: float
    pressure: float
    fires: bool
    sup_half: Optional[float]

    @property
    def lhs_terms(self):
        return (self.sup_energy, self.dissipation, self.pressure)

    @property
    def total(self):
        return sum(self.lhs_terms)


def ckn_criterion(frame, p, eta):
    """Hypothesis terms on ``Q_1`` and, when they sum to at most ``eta``, ``sup_{Q_1/2} |v|``.

    Terms: ``sup_s int_{B_1} |v|^2``, ``int int_{Q_1} |grad v|^2`` and
    ``int (int_{B_1} |P|)^p ds``.
    """
    if not p > 1:
        raise ValueError("p must exceed 1")
    rule = frame.rule
    in_b1 = rule.radius <= 1 + 1e-12
    w1 = np.where(in_b1, rule.weights, 0.0)
    q1_times = frame.s >= -1 - 1e-12
    energy = np.einsum("sdq,q->s", frame.v**2, w1)
    sup_energy = float(np.max(energy[q1_times]))
    dissip = float(frame.s_weights_q1 @ frame.grad_v2 @ w1)
    p_l1 = np.abs(frame.p) @ w1
    pressure = float(frame.s_weights_q1 @ (p_l1**p))
    total = sup_energy + dissip + pressure
    fires = total <= eta
    sup_half = None
    if fires:
        in_half = rule.radius <= 0.5 + 1e-12
        times = frame.s >= -0.25 - 1e-12
        mag = np.sqrt(np.sum(frame.v**2, axis=1))
        sup_half = float(np.max(mag[np.ix_(times, in_half)]))
    return CKNResult(sup_energy, dissip, pressure, bool(fires), sup_half)


def fd_weights(order, offsets):
    """Finite-difference weights for the ``order``-th derivative on integer ``offsets``."""
    offsets = np.asarray(offsets, dtype=float)
    n = offsets.size
    mat = np.vstack([offsets**m / math.factorial(m) for m in range(n)])
    rhs = np.zeros(n)
    rhs[order] = 1.0
    return np.linalg.solve(mat, rhs)


def _stencil(order):
    half = (order + 3) // 2
    offs = np.arange(-half, half + 1)
    return offs, fd_weights(order, offs)


def _spectral_derivative_full(grid, coeffs, alpha):
    """Apply ``(i k)^alpha`` to centred full-spectrum coefficients (odd orders drop Nyquist)."""
    m = np.arange(-grid.n // 2, grid.n // 2)
    out = coeffs
    for a, o in enumerate(alpha):
        if o == 0:
            continue
        k = grid.scale * m
        if o % 2:
            k = np.where(m == -grid.n // 2, 0.0, k)
        shape = [1] * coeffs.ndim
        shape[coeffs.ndim - grid.dim + a] = m.size
        out = out * ((1j * k) ** o).reshape(shape)
    return out


@dataclass(frozen=True)
class DerivativeCheck:
    n: int
    local: np.ndarray
    global_: np.ndarray
    expected: float
    ratio: float
    rel_error: float
    indices: tuple


def derivative_at_basepoint(traj, frame, n, step=0.1, history=None):
    """Finite-difference ``grad_y^n v_eps(0, 0)`` against ``eps^(n+1) grad^n u(t, x)``.

    ``ratio`` is the Frobenius ratio of the two tensors (expected
    ``eps^(n+1)``); ``rel_error`` is the largest entry-wise deviation from
    that expectation relative to the largest global entry.
    """
    from .fields import MAX_DERIVATIVE_ORDER

    if n < 1 or n > MAX_DERIVATIVE_ORDER:
        raise ValueError(f"derivative order must lie in [1, {MAX_DERIVATIVE_ORDER}]")
    g = traj.grid
    eps = frame.epsilon
    hist = SpectralHistory(traj, lambda i: traj.snapshots[i].data, cache_size=4) if history is None else history
    coeffs = hist.coefficients_at(frame.base_t)
    X = frame.path.positions[-1, 0]
    U0 = frame.U[-1]
    pairs = multi_indices(g.dim, n)
    alphas = [tuple(a) for a, _ in pairs]
    offsets, wts = [], []
    for alpha in alphas:
        stencils = [_stencil(o) if o else (np.array([0]), np.array([1.0])) for o in alpha]
        offsets.append(np.array(list(product(*[s[0] for s in stencils])), dtype=float) * step)
        wts.append(np.array([np.prod(c) for c in product(*[s[1] for s in stencils])]) / step**n)
    sizes = np.cumsum([0] + [o.shape[0] for o in offsets])
    vals = evaluate_coefficients(g, coeffs, X + eps * np.concatenate(offsets))
    v = eps * vals - eps * U0[:, None]
    local = np.stack([v[:, sizes[r] : sizes[r + 1]] @ wts[r] for r in range(len(alphas))])
    derived = np.concatenate([_spectral_derivative_full(g, coeffs, alpha) for alpha in alphas])
    glob = evaluate_coefficients(g, derived, X[None])[:, 0].reshape(len(alphas), g.dim)
    mult = np.array([w for _, w in pairs], dtype=float)[:, None]
    num = math.sqrt(float(np.sum(mult * local**2)))
    den = math.sqrt(float(np.sum(mult * glob**2)))
    expected = eps ** (n + 1)
    ratio = num / den if den > 0 else 0.0
    scale = expected * float(np.max(np.abs(glob)))
    rel = float(np.max(np.abs(local - expected * glob))) / scale if scale > 0 else float(np.max(np.abs(local)))
    return DerivativeCheck(n, local, glob, expected, ratio, rel, tuple(tuple(a) for a in alphas))


def write_frame(path, frame, grid):
    """Dump a frame in the snapshot format with its base point and scales in the header."""
    from .io import write_snapshot

    meta = {
        "frame": {
            "base_t": frame.base_t,
            "base_x": [float(c) for c in frame.base_x],
            "epsilon": frame.epsilon,
            "delta": frame.delta,
        }
    }
    arrays = [frame.s, frame.rule.points, frame.rule.weights, frame.v, frame.p]
    names = ["s", "y", "y_weights", "v_eps", "p_eps"]
    write_snapshot(path, grid, arrays, time=frame.base_t, names=names, metadata=meta)
