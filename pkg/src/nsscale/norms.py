"""Space-time norms, scale classification and budget evaluators.

Space-time integrals combine the grid cell volume with a time rule on the
snapshot nodes.  The default time rule integrates the piecewise-linear
interpolant exactly (composite trapezoid, with interpolated endpoints when
a window edge falls between snapshots); ``rule="simpson"`` is available
when both window edges are snapshot times.
"""
from __future__ import annotations

import csv
import io as _io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.integrate import simpson

from .fields import ScalarField, VectorField, derivative_multiplier, multi_indices
from .harmonic import Mollifier, ball_mask, default_ladder, maximal_function, periodic_distance2
from .solver import gradient_energy, pressure_coefficients

__all__ = [
    "Region",
    "Sample",
    "NormSpec",
    "ScaleClass",
    "PivotBudget",
    "Theorem1Gap",
    "ReportRow",
    "REPORT_HEADER",
    "time_weights",
    "lebesgue_norm",
    "weak_norm",
    "level_set_measure",
    "dyadic_reconstruction",
    "gradient_tensor_magnitude",
    "mixed_norm",
    "space_time_sample",
    "dissipation",
    "f_norm",
    "scale_classify",
    "pivot_budget",
    "pivot_exponents",
    "theorem1_gap",
    "is_admissible",
    "local_l1_control_check",
    "format_real",
    "rows_to_csv",
]

REPORT_HEADER = ("quantity", "n", "p", "q", "s", "delta", "gamma", "region", "value", "ratio", "admissible")


@dataclass(frozen=True)
class Region:
    """Axis-aligned space-time box ``[t0, t1] x prod [lo_a, lo_a + size_a)``.

    ``lower`` and ``size`` default to the whole periodic box.  Boxes may
    wrap around the period.
    """

    t0: float
    t1: float
    lower: Optional[tuple] = None
    size: Optional[tuple] = None

    def __post_init__(self):
        if not self.t1 > self.t0:
            raise ValueError("region needs t1 > t0")
        if (self.lower is None) != (self.size is None):
            raise ValueError("give both lower and size, or neither")
        if self.size is not None and any(s <= 0 for s in self.size):
            raise ValueError("region sizes must be positive")

    @property
    def duration(self):
        return self.t1 - self.t0

    def spatial_mask(self, grid):
        if self.lower is None:
            return np.ones(grid.shape, dtype=bool)
        mask = np.ones(grid.shape, dtype=bool)
        for a, x in enumerate(grid.coordinates()):
            size = self.size[a]
            if size >= grid.length:
                continue
            rel = np.mod(x - self.lower[a], grid.length)
            mask &= rel < size * (1 - 1e-12)
        return mask

    def spatial_measure(self, grid):
        return float(np.count_nonzero(self.spatial_mask(grid))) * grid.cell_volume

    def label(self):
        if self.lower is None:
            return f"[{format_real(self.t0)},{format_real(self.t1)}]xbox"
        lo = ";".join(format_real(v) for v in self.lower)
        sz = ";".join(format_real(v) for v in self.size)
        return f"[{format_real(self.t0)},{format_real(self.t1)}]x[{lo}]+[{sz}]"


@dataclass(frozen=True)
class Sample:
    """Values with quadrature weights; the weights sum to the region measure."""

    values: np.ndarray
    weights: np.ndarray

    @classmethod
    def from_field(cls, f, mask=None):
        data = f.samples
        w = np.full(data.shape, f.grid.cell_volume)
        if mask is not None:
            return cls(data[mask], w[mask])
        return cls(data.ravel(), w.ravel())

    @classmethod
    def coerce(cls, f, weight=1.0):
        if isinstance(f, Sample):
            return f
        if isinstance(f, ScalarField):
            return cls.from_field(f)
        values = np.asarray(f, dtype=float).ravel()
        return cls(values, np.broadcast_to(np.asarray(weight, dtype=float), values.shape).ravel())

    @property
    def measure(self):
        return float(np.sum(self.weights))


def time_weights(times, t0, t1, rule="trapezoid"):
    """Weights ``w`` with ``sum w_i g(t_i)`` approximating ``int_t0^t1 g``.

    The trapezoid rule integrates the piecewise-linear interpolant of the
    samples exactly over ``[t0, t1]``; Simpson requires ``t0`` and ``t1`` to
    be sample times.
    """
    times = np.asarray(times, dtype=float)
    tol = 1e-12 * max(1.0, abs(t1))
    if t0 < times[0] - tol or t1 > times[-1] + tol:
        raise ValueError(f"time window [{t0}, {t1}] is outside [{times[0]}, {times[-1]}]")
    w = np.zeros(times.size)
    if times.size == 1:
        return w
    if rule == "simpson":
        sel = np.flatnonzero((times >= t0 - tol) & (times <= t1 + tol))
        if sel.size < 2 or abs(times[sel[0]] - t0) > tol or abs(times[sel[-1]] - t1) > tol:
            raise ValueError("Simpson weights need window edges on sample times")
        if sel.size == 2:
            w[sel] = 0.5 * (times[sel[1]] - times[sel[0]])
        else:
            w[sel] = simpson(np.eye(sel.size), x=times[sel], axis=1)
        return w
    if rule != "trapezoid":
        raise ValueError(f"unknown time rule {rule!r}")
    for i in range(times.size - 1):
        a, b = times[i], times[i + 1]
        lo, hi = max(a, t0), min(b, t1)
        if hi <= lo:
            continue
        h = b - a
        # integrals of the two hat functions over [lo, hi]
        wa = ((b - lo) ** 2 - (b - hi) ** 2) / (2 * h)
        wb = ((hi - a) ** 2 - (lo - a) ** 2) / (2 * h)
        w[i] += wa
        w[i + 1] += wb
    return w


def lebesgue_norm(f, p, weight=1.0):
    """``(sum |f|^p w)^(1/p)``, a quasi-norm for ``p < 1``; ``max |f|`` for ``p = inf``.

    ``f`` may be a :class:`Sample`, a ScalarField (cell-volume weights) or
    an array with a scalar or broadcastable ``weight``.
    """
    if not p > 0:
        raise ValueError(f"exponent must be positive, got {p}")
    s = Sample.coerce(f, weight)
    mag = np.abs(s.values)
    if math.isinf(p):
        return float(np.max(mag[s.weights > 0])) if mag.size else 0.0
    total = float(np.sum(mag**p * s.weights))
    return total ** (1.0 / p)


def weak_norm(f, p, weight=1.0):
    """``sup_lambda lambda |{|f| >= lambda}|^(1/p)`` over the sample magnitudes.

    The supremum of ``lambda |{|f| > lambda}|^(1/p)`` over all real levels is
    approached from below at a sample magnitude, which gives this form.
    """
    if not p > 0:
        raise ValueError(f"exponent must be positive, got {p}")
    s = Sample.coerce(f, weight)
    mag = np.abs(s.values)
    keep = mag > 0
    if not np.any(keep):
        return 0.0
    mag, w = mag[keep], s.weights[keep]
    order = np.argsort(-mag, kind="stable")
    mag, w = mag[order], w[order]
    cum = np.cumsum(w)
    # at each distinct level use the measure of everything at or above it
    last = np.r_[mag[1:] != mag[:-1], True]
    return float(np.max(mag[last] * cum[last] ** (1.0 / p)))


def level_set_measure(f, lam, weight=1.0):
    """Measure of ``{|f| >= lam}``."""
    if not lam > 0:
        raise ValueError("level must be positive")
    s = Sample.coerce(f, weight)
    return float(np.sum(s.weights[np.abs(s.values) >= lam]))


def dyadic_reconstruction(f, p, levels_per_octave=4, weight=1.0):
    """Reconstruct ``||f||_p^p`` from level-set measures on the levels ``2^(k/levels_per_octave)``.

    Each shell ``lambda_k <= |f| < lambda_(k+1)`` contributes its measure
    times ``(lambda_k lambda_(k+1))^(p/2)``.
    """
    s = Sample.coerce(f, weight)
    mag = np.abs(s.values)
    positive = mag[mag > 0]
    if positive.size == 0:
        return 0.0
    k_lo = int(math.floor(levels_per_octave * math.log2(positive.min()))) - 1
    k_hi = int(math.ceil(levels_per_octave * math.log2(positive.max()))) + 1
    levels = 2.0 ** (np.arange(k_lo, k_hi + 1) / levels_per_octave)
    measures = np.array([level_set_measure(s, lam) for lam in levels])
    drops = measures[:-1] - measures[1:]
    reps = np.sqrt(levels[:-1] * levels[1:]) ** p
    return float(np.sum(reps * drops))


def gradient_tensor_magnitude(u, order):
    """Pointwise ``|grad^n u|`` (Frobenius over all index slots).

    Uses the multinomial identity: the full tensor of ``n``-th derivatives
    has each mixed partial ``d^alpha`` repeated ``n!/alpha!`` times.
    """
    if isinstance(u, ScalarField):
        comps, grid = [u.spectral], u.grid
    else:
        comps, grid = list(u.spectral), u.grid
    if order == 0:
        return np.sqrt(sum(grid.inverse(c) ** 2 for c in comps))
    total = np.zeros(grid.shape)
    for alpha, weight in multi_indices(grid.dim, order):
        mult = derivative_multiplier(grid, tuple(alpha))
        for c in comps:
            total += weight * grid.inverse(c * mult) ** 2
    return np.sqrt(total)


def fractional_magnitude(u, d):
    """Pointwise modulus of ``(-Laplace)^(d/2) u`` (component-wise multiplier)."""
    grid = u.grid
    k2 = grid.k2
    mult = np.where(k2 == 0, 0.0, np.where(k2 == 0, 1.0, k2) ** (d / 2))
    comps = [u.spectral] if isinstance(u, ScalarField) else list(u.spectral)
    return np.sqrt(sum(grid.inverse(c * mult) ** 2 for c in comps))


@dataclass(frozen=True)
class NormSpec:
    """``L^{p_t}_t L^{q_x}_x`` norm of ``|grad^n u|`` or of ``|(-Laplace)^{d/2} u|`` over a region."""

    order: float = 0
    p_t: float = 2.0
    q_x: float = 2.0
    region: Optional[Region] = None
    fractional: bool = False

    def __post_init__(self):
        if not (self.p_t > 0 and self.q_x > 0):
            raise ValueError("exponents must be positive")
        if not self.fractional and (int(self.order) != self.order or self.order < 0):
            raise ValueError("integer derivative order required unless fractional=True")

    def magnitude(self, u):
        if self.fractional:
            return fractional_magnitude(u, self.order)
        return gradient_tensor_magnitude(u, int(self.order))


def _region_or_full(traj, region):
    if region is None:
        if len(traj) < 2:
            raise ValueError("a trajectory with one snapshot has no time extent")
        return Region(traj.t_start, traj.t_stop)
    if not traj.contains(region.t0, region.t1):
        raise ValueError(f"region [{region.t0}, {region.t1}] outside the trajectory")
    return region


def space_time_sample(traj, integrand, region=None, rule="trapezoid"):
    """Sample of ``integrand(u)`` (pointwise array) over a space-time region."""
    region = _region_or_full(traj, region)
    tw = time_weights(traj.times, region.t0, region.t1, rule)
    mask = region.spatial_mask(traj.grid)
    vals, wts = [], []
    for w, u in zip(tw, traj.snapshots):
        if w == 0:
            continue
        vals.append(np.asarray(integrand(u))[mask])
        wts.append(np.full(vals[-1].shape, w * traj.grid.cell_volume))
    if not vals:
        return Sample(np.zeros(0), np.zeros(0))
    return Sample(np.concatenate(vals), np.concatenate(wts))


def mixed_norm(traj, spec, rule="trapezoid"):
    """``|| || f(t) ||_{L^q_x} ||_{L^p_t}`` with ``f`` selected by ``spec``."""
    region = _region_or_full(traj, spec.region)
    tw = time_weights(traj.times, region.t0, region.t1, rule)
    mask = region.spatial_mask(traj.grid)
    dv = traj.grid.cell_volume
    tol = 1e-12 * max(1.0, abs(region.t1))
    inside = (traj.times >= region.t0 - tol) & (traj.times <= region.t1 + tol)
    use = inside if math.isinf(spec.p_t) else tw != 0
    spatial = np.zeros(len(traj))
    for i in np.flatnonzero(use):
        mag = spec.magnitude(traj.snapshots[i])[mask]
        spatial[i] = lebesgue_norm(mag, spec.q_x, dv)
    if math.isinf(spec.p_t):
        return float(np.max(spatial[inside])) if np.any(inside) else 0.0
    return float(np.sum(tw * spatial**spec.p_t)) ** (1.0 / spec.p_t)


def dissipation(traj, region=None, rule="trapezoid"):
    """``int int |grad u|^2 dx dt`` over the full box and the region's time window."""
    region = _region_or_full(traj, region)
    if region.lower is not None:
        s = space_time_sample(traj, lambda u: gradient_tensor_magnitude(u, 1) ** 2, region, rule)
        return float(np.sum(s.values * s.weights))
    tw = time_weights(traj.times, region.t0, region.t1, rule)
    return float(sum(w * gradient_energy(u) for w, u in zip(tw, traj.snapshots) if w != 0))


def f_norm(traj, region=None, rule="trapezoid"):
    """``int int |u|^(10/3) dx dt``."""
    s = space_time_sample(traj, lambda u: np.sqrt(np.sum(u.data**2, axis=0)), region, rule)
    return float(np.sum(np.abs(s.values) ** (10.0 / 3.0) * s.weights))


@dataclass(frozen=True)
class ScaleClass:
    """Scale-line classification of a pair ``(d, p)``.

    ``label`` is the single label chosen by precedence
    ``nonlinear_limit > energy > critical > nonlinear_admissible > none``;
    ``lines`` lists every relation that holds.
    """

    label: str
    slack: float
    lines: frozenset = field(default_factory=frozenset)


def scale_classify(d, p, tol=1e-12):
    """Classify ``(d, p)`` against ``5/p = d + 3/2``, ``5/p = d + 1`` and ``4/p vs d + 1``."""
    if not p > 0:
        raise ValueError("p must be positive")
    inv = 0.0 if math.isinf(p) else 1.0 / p
    lines = set()
    if abs(5 * inv - (d + 1.5)) <= tol:
        lines.add("energy")
    if abs(5 * inv - (d + 1)) <= tol:
        lines.add("critical")
    slack = 4 * inv - (d + 1)
    if abs(slack) <= tol:
        lines.add("nonlinear_limit")
    elif slack > 0:
        lines.add("nonlinear_admissible")
    for label in ("nonlinear_limit", "energy", "critical", "nonlinear_admissible"):
        if label in lines:
            return ScaleClass(label, slack, frozenset(lines))
    return ScaleClass("none", slack, frozenset(lines))


def is_admissible(n, p):
    """``4/p > n + 1`` (boundary excluded)."""
    return 4.0 / p - (n + 1) > 1e-12


def pivot_exponents(s):
    """``(delta, gamma) = (5s/(1+4s), s/(1+3s))``."""
    if not 0 < s < 1:
        raise ValueError(f"s must lie in (0, 1), got {s}")
    return 5 * s / (1 + 4 * s), s / (1 + 3 * s)


@dataclass(frozen=True)
class PivotBudget:
    s: float
    delta: float
    gamma: float
    i_grad: float
    i_hess_p: float
    i_max_frac: float
    initial_energy: float

    @property
    def total(self):
        return self.i_grad + self.i_hess_p + self.i_max_frac

    @property
    def rhs(self):
        e = self.initial_energy
        return e + e ** (1 + self.gamma)

    @property
    def ratio(self):
        return self.total / self.rhs if self.rhs > 0 else 0.0

    @property
    def hardy_ratio(self):
        """``int ||grad^2 P||_1 / int ||grad u||_2^2``; bounded but not certified."""
        return self.i_hess_p / self.i_grad if self.i_grad > 0 else 0.0


def pressure_hessian(u):
    """Samples of ``d_i d_j P`` as ``(dim, dim, *shape)`` and their Fourier coefficients."""
    g = u.grid
    ph = pressure_coefficients(g, u.data)
    hess_h = np.empty((g.dim, g.dim) + g.spectral_shape, dtype=complex)
    for i in range(g.dim):
        for j in range(i, g.dim):
            m = [0] * g.dim
            m[i] += 1
            m[j] += 1
            hess_h[i, j] = hess_h[j, i] = ph * derivative_multiplier(g, tuple(m))
    return g.inverse(hess_h), hess_h


def pivot_integrands(u, delta, gamma, ladder=None, mode="discrete"):
    """Pointwise ``|M((-Laplace)^(-delta/2) grad^2 P)|^(1+gamma)``, ``|grad u|^2`` and ``|grad^2 P|``."""
    g = u.grid
    ladder = default_ladder(g) if ladder is None else ladder
    hess, hess_h = pressure_hessian(u)
    hess_mag = np.sqrt(np.sum(hess**2, axis=(0, 1)))
    k2 = g.k2
    smooth = np.where(k2 == 0, 0.0, np.where(k2 == 0, 1.0, k2) ** (-delta / 2))
    frac = g.inverse(hess_h * smooth)
    frac_mag = ScalarField(g, np.sqrt(np.sum(frac**2, axis=(0, 1))))
    mterm = maximal_function(frac_mag, ladder, mode).samples ** (1 + gamma)
    grad2 = gradient_tensor_magnitude(u, 1) ** 2
    return mterm, grad2, hess_mag


def pivot_budget(traj, s, ladder=None, region=None, rule="trapezoid", mode="discrete"):
    """The three space-time integrals of the pivot quantity at exponent ``s``."""
    delta, gamma = pivot_exponents(s)
    region = _region_or_full(traj, region)
    tw = time_weights(traj.times, region.t0, region.t1, rule)
    mask = region.spatial_mask(traj.grid)
    dv = traj.grid.cell_volume
    totals = np.zeros(3)
    for w, u in zip(tw, traj.snapshots):
        if w == 0:
            continue
        terms = pivot_integrands(u, delta, gamma, ladder, mode)
        totals += w * dv * np.array([float(np.sum(t[mask])) for t in terms])
    i_max, i_grad, i_hess = (float(v) for v in totals)
    return PivotBudget(s, delta, gamma, i_grad, i_hess, i_max, float(traj.initial_energy))


@dataclass(frozen=True)
class Theorem1Gap:
    n: int
    p: float
    gamma: float
    lhs: float
    rhs_ref: float
    admissible: bool

    @property
    def ratio(self):
        return self.lhs / self.rhs_ref


def theorem1_gap(traj, n, p, gamma, region=None, rule="trapezoid"):
    """Space-time ``L^p`` norm of ``grad^n u`` against ``||u0||^(2(1+gamma)/p) + 1``."""
    region = _region_or_full(traj, region)
    lhs = mixed_norm(traj, NormSpec(order=n, p_t=p, q_x=p, region=region), rule)
    rhs = float(traj.initial_energy) ** ((1 + gamma) / p) + 1.0
    return Theorem1Gap(n, p, gamma, lhs, rhs, is_admissible(n, p))


@dataclass(frozen=True)
class L1ControlCheck:
    lhs: float
    rhs: float
    pairing: float
    maximal_term: float

    @property
    def ratio(self):
        if self.rhs == 0:
            return 0.0 if self.lhs == 0 else math.inf
        return self.lhs / self.rhs


def local_l1_control_check(f, s, p, center=None, ladder=None, mode="discrete"):
    """``||f||_{L^1(B_1)}`` against ``|int f phi| + ||M((-Laplace)^(-s) grad f)||_{L^p(B_1)}``.

    ``phi`` is the standard bump supported in ``B_1`` around ``center``
    (default: the box center).
    """
    if not 0 < s < 0.5:
        raise ValueError(f"s must lie in (0, 1/2), got {s}")
    g = f.grid
    if g.length < 4:
        raise ValueError("the unit ball must fit well inside the box (L >= 4)")
    center = np.full(g.dim, g.length / 2) if center is None else np.asarray(center, dtype=float)
    ladder = default_ladder(g) if ladder is None else ladder
    mask = ball_mask(g, center, 1.0)
    dv = g.cell_volume
    lhs = float(np.sum(np.abs(f.samples[mask]))) * dv
    r = np.sqrt(periodic_distance2(g, center))
    weights = Mollifier(g.dim, 1.0).profile(r[..., None])
    pairing = abs(float(np.sum(f.samples * weights)) * dv)
    k2 = g.k2
    mult = np.where(k2 == 0, 0.0, np.where(k2 == 0, 1.0, k2) ** (-s))
    k = g.odd_wavenumbers
    grad = VectorField.from_spectral(g, np.stack([1j * ka * f.spectral * mult for ka in k]))
    mf = maximal_function(grad, ladder, mode).samples
    mterm = lebesgue_norm(mf[mask], p, dv)
    return L1ControlCheck(lhs, pairing + mterm, pairing, mterm)


def format_real(x):
    """17 significant digits, round-trip exact for float64."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "%.17g" % float(x)


@dataclass(frozen=True)
class ReportRow:
    quantity: str
    value: float
    n: Optional[float] = None
    p: Optional[float] = None
    q: Optional[float] = None
    s: Optional[float] = None
    delta: Optional[float] = None
    gamma: Optional[float] = None
    region: str = ""
    ratio: Optional[float] = None
    admissible: Optional[bool] = None
    task: str = ""

    def cells(self):
        out = []
        for key in REPORT_HEADER:
            val = getattr(self, key)
            out.append(val if isinstance(val, str) else format_real(val))
        return out


def rows_to_csv(rows: Sequence[ReportRow], extra_columns=()):
    """Render rows with the fixed report header (plus optional trailing columns)."""
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(REPORT_HEADER) + list(extra_columns))
    for row in rows:
        tail = [getattr(row, c) for c in extra_columns]
        writer.writerow(row.cells() + [t if isinstance(t, str) else format_real(t) for t in tail])
    return buf.getvalue()
