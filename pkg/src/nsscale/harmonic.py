"""Fourier multipliers, ball averages and local pressure splitting.

All operators act on zero-mean periodic fields.  Ball averages come in two
flavours: ``"discrete"`` averages over the grid nodes inside the ball (the
count-normalized indicator, exactly reproducible by brute force) and
``"exact"`` applies the Fourier multiplier of the normalized continuous
ball indicator.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate, special

from .fields import (
    ScalarField,
    VectorField,
    derivative_multiplier,
    MultiIndex,
)

__all__ = [
    "Mollifier",
    "RadiiLadder",
    "default_ladder",
    "fractional_laplacian",
    "riesz_apply",
    "ball_average",
    "ball_mask",
    "ball_multiplier",
    "maximal_function",
    "magnitude",
    "mollify",
    "divcurl_product",
    "double_divergence",
    "hardy_norm_estimate",
    "pressure_decompose_local",
    "PressureSplit",
    "smoothstep_cutoff",
]

_ZERO_MEAN_TOL = 1e-10


def _bump(r):
    r = np.asarray(r, dtype=float)
    inside = r < 1
    safe = np.where(inside, r, 0.0)
    return np.where(inside, np.exp(-1.0 / (1.0 - safe**2)), 0.0)


@lru_cache(maxsize=4)
def _bump_constant(dim):
    area = 2 * math.pi if dim == 2 else 4 * math.pi
    val, _ = integrate.quad(lambda r: float(_bump(r)) * r ** (dim - 1), 0.0, 1.0, epsabs=1e-16, epsrel=1e-13, limit=200)
    return 1.0 / (area * val)


@lru_cache(maxsize=4)
def _radial_rule(n_nodes):
    x, w = np.polynomial.legendre.leggauss(n_nodes)
    return 0.5 * (x + 1), 0.5 * w


@dataclass(frozen=True)
class Mollifier:
    """The standard bump ``c exp(-1/(1-|x|^2))`` with unit integral, rescaled to width ``epsilon``.

    The Fourier transform is tabulated by Gauss-Legendre quadrature of the
    radial integral, which converges spectrally for this profile.
    """

    dim: int
    width: float
    nodes: int = 256

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError("dim must be 2 or 3")
        if not self.width > 0:
            raise ValueError("mollifier width must be positive")

    @property
    def constant(self):
        return _bump_constant(self.dim)

    def profile(self, y):
        """Unscaled profile ``phi(y)`` for points ``y`` of shape ``(..., dim)``."""
        r = np.linalg.norm(np.asarray(y, dtype=float), axis=-1)
        return self.constant * _bump(r)

    def scaled(self, y):
        """``epsilon^-dim phi(y / epsilon)``."""
        return self.profile(np.asarray(y) / self.width) / self.width**self.dim

    def transform(self, xi):
        """``phi_hat(xi) = int phi(y) exp(-i xi . y) dy`` for radial frequencies ``xi``."""
        xi = np.asarray(xi, dtype=float)
        r, w = _radial_rule(self.nodes)
        prof = self.constant * _bump(r) * w
        flat = xi.reshape(-1, 1) * r
        if self.dim == 3:
            kern = np.sinc(flat / np.pi) * r**2
            val = 4 * np.pi * (kern @ prof)
        else:
            kern = special.j0(flat) * r
            val = 2 * np.pi * (kern @ prof)
        return val.reshape(xi.shape)

    def multiplier(self, grid):
        return _mollifier_multiplier(grid, self.width, self.nodes)


@lru_cache(maxsize=32)
def _mollifier_multiplier(grid, width, nodes):
    kmag = grid.kmag
    flat, inv = np.unique(kmag, return_inverse=True)
    vals = Mollifier(grid.dim, width, nodes).transform(flat * width)
    out = vals[inv].reshape(kmag.shape)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class RadiiLadder:
    """Dyadic radii ``r_min * 2^j`` for ``j = 0..count-1``."""

    r_min: float
    count: int

    def __post_init__(self):
        if not self.r_min > 0 or self.count < 1:
            raise ValueError("r_min must be positive and count at least one")

    @property
    def radii(self):
        return tuple(self.r_min * 2.0**j for j in range(self.count))

    @property
    def r_max(self):
        return self.radii[-1]

    def validate(self, grid):
        if self.r_max > grid.length / 4 * (1 + 1e-12):
            raise ValueError(f"largest radius {self.r_max:g} exceeds a quarter of the box {grid.length:g}")


def default_ladder(grid, r_min=None, count=None):
    """Ladder starting at the grid spacing and doubling while ``r <= L/4``."""
    r_min = grid.spacing if r_min is None else r_min
    if count is None:
        count = int(math.floor(math.log2(grid.length / 4 / r_min) + 1e-12)) + 1
    return RadiiLadder(r_min, count)


def _check_zero_mean(f, what):
    scale = max(float(np.max(np.abs(f.samples))), 1.0)
    if abs(f.mean()) > _ZERO_MEAN_TOL * scale:
        raise ValueError(f"{what} requires a zero-mean field (mean = {f.mean():.3e})")


def _power_multiplier(grid, power):
    k2 = grid.k2
    safe = np.where(k2 == 0, 1.0, k2)
    return np.where(k2 == 0, 0.0, safe**power)


def fractional_laplacian(f, power):
    """``(-Laplace)^power f`` via the multiplier ``|k|^(2 power)``; the zero mode is removed."""
    if power < 0:
        _check_zero_mean(f, "a negative fractional power")
    if power == 0:
        coeffs = np.array(f.spectral)
        coeffs[(0,) * f.grid.dim] = 0.0
        return ScalarField.from_spectral(f.grid, coeffs)
    return ScalarField.from_spectral(f.grid, f.spectral * _power_multiplier(f.grid, power))


def riesz_apply(f, numerator, laplacian_power):
    """Apply ``(i k)^numerator |k|^(2 laplacian_power)``."""
    m = MultiIndex(numerator)
    if m.order + 2 * laplacian_power <= 0:
        _check_zero_mean(f, "a multiplier of nonpositive homogeneity")
    mult = derivative_multiplier(f.grid, tuple(m)) * _power_multiplier(f.grid, laplacian_power)
    if laplacian_power == 0 and m.order == 0:
        mult = np.where(f.grid.k2 == 0, 0.0, 1.0)
    return ScalarField.from_spectral(f.grid, f.spectral * mult)


def periodic_distance2(grid, center=None):
    """Squared periodic distance of every node to ``center`` (default: the origin)."""
    center = np.zeros(grid.dim) if center is None else np.asarray(center, dtype=float)
    total = np.zeros(grid.shape)
    for a, x in enumerate(grid.coordinates()):
        d = np.mod(x - center[a] + grid.length / 2, grid.length) - grid.length / 2
        total = total + d**2
    return total


def ball_mask(grid, center, radius):
    """Nodes within periodic distance ``radius`` of ``center``."""
    return periodic_distance2(grid, center) <= radius**2 * (1 + 1e-12)


def _offsets_in_ball(grid, radius):
    """Integer offsets ``m`` with ``|m| h <= radius`` (tie-tolerant)."""
    reach = int(math.floor(radius / grid.spacing + 1e-9))
    lim = (radius / grid.spacing) ** 2 * (1 + 1e-12)
    rng = np.arange(-reach, reach + 1)
    mesh = np.meshgrid(*([rng] * grid.dim), indexing="ij")
    m2 = sum(m**2 for m in mesh)
    keep = m2 <= lim
    return np.stack([m[keep] for m in mesh], axis=-1)


def discrete_ball_offsets(grid, radius):
    return _offsets_in_ball(grid, radius)


@lru_cache(maxsize=64)
def _discrete_ball_spectrum(grid, radius):
    offsets = _offsets_in_ball(grid, radius)
    kernel = np.zeros(grid.shape)
    idx = tuple(np.mod(offsets[:, a], grid.n) for a in range(grid.dim))
    np.add.at(kernel, idx, 1.0)
    kernel /= offsets.shape[0]
    out = grid.forward(kernel)
    out.setflags(write=False)
    return out


def ball_multiplier(grid, radius):
    """Fourier multiplier of the normalized continuous ball indicator."""
    return _exact_ball_spectrum(grid, radius)


@lru_cache(maxsize=64)
def _exact_ball_spectrum(grid, radius):
    z = grid.kmag * radius
    small = z < 1e-3
    zs = np.where(small, 1.0, z)
    if grid.dim == 3:
        val = 3 * (np.sin(zs) - zs * np.cos(zs)) / zs**3
        series = 1 - z**2 / 10 + z**4 / 280
    else:
        val = 2 * special.j1(zs) / zs
        series = 1 - z**2 / 8 + z**4 / 192
    out = np.where(small, series, val)
    out.setflags(write=False)
    return out


def ball_average(f, radius, mode="discrete"):
    """Average of ``f`` over the ball of given radius around every node.

    ``f`` is a ScalarField or an array with trailing axes ``grid.shape``
    (pass ``grid`` via the field).  ``mode`` selects the grid-node average
    or the exact continuous one.
    """
    grid = f.grid
    spec = _discrete_ball_spectrum(grid, radius) if mode == "discrete" else _exact_ball_spectrum(grid, radius)
    return ScalarField.from_spectral(grid, f.spectral * spec)


def ball_average_array(grid, data, radius, mode="discrete"):
    """Ball averages of a stack of arrays with trailing axes ``grid.shape``."""
    spec = _discrete_ball_spectrum(grid, radius) if mode == "discrete" else _exact_ball_spectrum(grid, radius)
    return grid.inverse(grid.forward(data) * spec)


def magnitude(f):
    """Pointwise modulus of a scalar, vector, or stacked-tensor field as a ScalarField."""
    if isinstance(f, ScalarField):
        return ScalarField(f.grid, np.abs(f.samples))
    if isinstance(f, VectorField):
        return ScalarField(f.grid, np.sqrt(np.sum(f.data**2, axis=0)))
    raise TypeError(f"cannot take the magnitude of {type(f).__name__}")


def maximal_function(f, ladder, mode="discrete"):
    """Discrete Hardy-Littlewood maximal function of ``|f|`` over the ladder radii.

    Vector fields are reduced to their pointwise Euclidean modulus first.
    """
    a = magnitude(f)
    ladder.validate(a.grid)
    best = None
    for r in ladder.radii:
        avg = ball_average(a, r, mode).samples
        best = avg if best is None else np.maximum(best, avg)
    return ScalarField(a.grid, best)


def mollify(u, m):
    """Convolve every component with the rescaled bump ``m`` (a Fourier multiplier)."""
    grid = u.grid
    if m.width > grid.length / 16 * (1 + 1e-12):
        raise ValueError(f"mollifier width {m.width:g} exceeds L/16 = {grid.length / 16:g}")
    if m.dim != grid.dim:
        raise ValueError("mollifier and grid dimensions differ")
    mult = m.multiplier(grid)
    if isinstance(u, ScalarField):
        return ScalarField.from_spectral(grid, u.spectral * mult)
    return VectorField.from_spectral(grid, u.spectral * mult, divfree=u.divfree)


def velocity_gradient(u):
    """Samples of ``d_j u_i`` with shape ``(dim, dim, *shape)``, index order ``[i, j]``."""
    g = u.grid
    k = g.odd_wavenumbers
    return np.stack([np.stack([g.inverse(1j * k[j] * u.spectral[i]) for j in range(g.dim)]) for i in range(g.dim)])


def divcurl_product(u):
    """Pointwise ``sum_ij d_i u_j d_j u_i``."""
    grad = velocity_gradient(u)
    return ScalarField(u.grid, np.einsum("ij...,ji...->...", grad, grad))


def double_divergence(tensor, grid=None):
    """Spectral ``sum_ij d_i d_j A_ij``; ``tensor`` is ``(dim, dim, *shape)`` samples or a VectorField ``u`` (``A = u u``)."""
    if isinstance(tensor, VectorField):
        grid = tensor.grid
        tensor = tensor.data[:, None] * tensor.data[None, :]
    tensor = np.asarray(tensor, dtype=float)
    ah = grid.forward(tensor)
    out = np.zeros(grid.spectral_shape, dtype=complex)
    k = grid.odd_wavenumbers
    for i in range(grid.dim):
        for j in range(grid.dim):
            kk = grid.wavenumbers[i] ** 2 if i == j else k[i] * k[j]
            out = out - kk * ah[i, j]
    return ScalarField.from_spectral(grid, out)


def hardy_norm_estimate(f, scales, return_profile=False):
    """``L^1`` norm of ``sup_j |phi_{r_j} * f|`` with ``phi`` the standard bump.

    With ``return_profile`` the running value after each scale is also
    returned; it is nondecreasing by construction.
    """
    _check_zero_mean(f, "the Hardy surrogate")
    grid = f.grid
    scales.validate(grid)
    best = np.zeros(grid.shape)
    profile = []
    for r in scales.radii:
        mult = Mollifier(grid.dim, r).multiplier(grid)
        conv = np.abs(grid.inverse(f.spectral * mult))
        best = np.maximum(best, conv)
        profile.append(float(np.sum(best)) * grid.cell_volume)
    value = profile[-1]
    return (value, profile) if return_profile else value


def smoothstep_cutoff(grid, center, inner, outer):
    """Quintic radial cutoff: one for ``rho <= inner``, zero for ``rho >= outer``, C^2 in between."""
    rho = np.sqrt(periodic_distance2(grid, center))
    tau = np.clip((rho - inner) / (outer - inner), 0.0, 1.0)
    return 1.0 - tau**3 * (10 - 15 * tau + 6 * tau**2)


@dataclass(frozen=True)
class PressureSplit:
    """Near-field and far-field parts of a local pressure."""

    r1: ScalarField
    r2: ScalarField
    cutoff: np.ndarray
    inner_mask: np.ndarray
    additivity_error: float
    precondition_residual: float
    harmonic_residual: float
    max_grad_r2: float
    l2_ratio: float

    def __iter__(self):
        yield self.r1
        yield self.r2


def pressure_decompose_local(R, A, inner_radius, outer_radius, center, tol=1e-8):
    """Split ``R`` with ``-Laplace R = div div A`` near ``center`` into near and far parts.

    ``R1 = (-Laplace)^-1 div div (psi A)`` with ``psi`` the quintic cutoff
    equal to one on the ball of radius ``(inner + outer)/2`` and vanishing
    outside the outer ball; ``R2 = R - R1`` is harmonic where ``psi = 1``.

    Parameters
    ----------
    R : ScalarField
    A : array_like, shape ``(dim, dim, *grid.shape)``
    """
    grid = R.grid
    if not 0 < inner_radius < outer_radius:
        raise ValueError("need 0 < inner_radius < outer_radius")
    A = np.asarray(A, dtype=float)
    if A.shape != (grid.dim, grid.dim) + grid.shape:
        raise ValueError(f"A must have shape {(grid.dim, grid.dim) + grid.shape}")
    outer_mask = ball_mask(grid, center, outer_radius)
    inner_mask = ball_mask(grid, center, inner_radius)

    src = double_divergence(A, grid).samples
    lap_r = grid.inverse(grid.k2 * R.spectral)
    scale = max(float(np.max(np.abs(lap_r))), float(np.max(np.abs(src))), 1e-300)
    pre = float(np.max(np.abs(lap_r - src)[outer_mask])) / scale
    if pre > tol:
        raise ValueError(f"-Laplace R = div div A fails on the outer ball (relative residual {pre:.2e})")

    mid = 0.5 * (inner_radius + outer_radius)
    psi = smoothstep_cutoff(grid, center, mid, outer_radius)
    dd = double_divergence(psi * A, grid)
    r1 = ScalarField.from_spectral(grid, np.where(grid.k2 == 0, 0.0, dd.spectral / np.where(grid.k2 == 0, 1.0, grid.k2)))
    r2 = ScalarField(grid, R.samples - r1.samples)
    additivity = float(np.max(np.abs((r1.samples + r2.samples - R.samples)[inner_mask])))

    lap_r2 = grid.inverse(-grid.k2 * r2.spectral)
    harmonic = float(np.max(np.abs(lap_r2[inner_mask]))) / scale
    k = grid.odd_wavenumbers
    grad = np.sqrt(sum(grid.inverse(1j * ka * r2.spectral) ** 2 for ka in k))
    max_grad = float(np.max(grad[inner_mask]))

    a_norm = math.sqrt(float(np.sum((A**2)[:, :, outer_mask])) * grid.cell_volume)
    r1_norm = math.sqrt(float(np.sum(r1.samples[inner_mask] ** 2)) * grid.cell_volume)
    ratio = r1_norm / a_norm if a_norm > 0 else 0.0
    return PressureSplit(r1, r2, psi, inner_mask, additivity, pre, harmonic, max_grad, ratio)
