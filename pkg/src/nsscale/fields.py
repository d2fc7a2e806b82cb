"""Periodic grids and real fields with exact spectral duals.

Every field lives on the torus ``[0, L)^dim`` sampled on ``n`` points per
axis.  Samples are the primary storage; the real-to-complex transform is
computed lazily and cached.  Spectral operators use the usual conventions:
wavenumbers ``k = 2*pi/L * m`` with integer ``m`` in ``[-n/2, n/2)``, and odd
derivatives annihilate the Nyquist plane so that every output stays real.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property, lru_cache
from itertools import product

import finufft
import numpy as np
import scipy.fft as sfft

from ._parallel import workers

MAX_DERIVATIVE_ORDER = 12

__all__ = [
    "Grid",
    "MultiIndex",
    "ScalarField",
    "VectorField",
    "make_grid",
    "derivative",
    "gradient",
    "divergence",
    "leray_project",
    "sample_at_points",
    "taylor_green",
    "random_divfree_field",
    "multi_indices",
]


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid on ``[0, length)^dim``."""

    dim: int
    n: int
    length: float

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")
        n = int(self.n)
        if n != self.n or n < 8 or n & (n - 1):
            raise ValueError(f"n_per_axis must be a power of two >= 8, got {self.n}")
        if not self.length > 0:
            raise ValueError(f"box_length must be positive, got {self.length}")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "length", float(self.length))

    @property
    def shape(self):
        return (self.n,) * self.dim

    @property
    def spectral_shape(self):
        return (self.n,) * (self.dim - 1) + (self.n // 2 + 1,)

    @property
    def axes(self):
        return tuple(range(-self.dim, 0))

    @property
    def size(self):
        return self.n**self.dim

    @property
    def spacing(self):
        return self.length / self.n

    @property
    def cell_volume(self):
        return self.spacing**self.dim

    @property
    def volume(self):
        return self.length**self.dim

    @property
    def scale(self):
        """Conversion factor from integer modes to wavenumbers."""
        return 2 * np.pi / self.length

    @cached_property
    def modes(self):
        """Integer mode numbers per axis, broadcastable to ``spectral_shape``."""
        out = []
        for a in range(self.dim):
            if a == self.dim - 1:
                m = np.arange(self.n // 2 + 1, dtype=float)
            else:
                m = np.fft.fftfreq(self.n, 1.0 / self.n)
            shape = [1] * self.dim
            shape[a] = m.size
            out.append(m.reshape(shape))
        return tuple(out)

    @cached_property
    def wavenumbers(self):
        return tuple(self.scale * m for m in self.modes)

    @cached_property
    def odd_wavenumbers(self):
        """Wavenumbers with the Nyquist plane zeroed (used by odd derivatives)."""
        nyq = self.n // 2
        return tuple(np.where(np.abs(m) == nyq, 0.0, k) for m, k in zip(self.modes, self.wavenumbers))

    @cached_property
    def k2(self):
        return sum(k**2 for k in self.wavenumbers)

    @cached_property
    def kmag(self):
        return np.sqrt(self.k2)

    @cached_property
    def dealias_mask(self):
        cut = self.n / 3.0
        mask = np.ones(self.spectral_shape, dtype=bool)
        for m in self.modes:
            mask = mask & (np.abs(m) <= cut)
        return mask

    @cached_property
    def rfft_weights(self):
        """Multiplicity of each stored coefficient in the full spectrum."""
        w = np.full(self.n // 2 + 1, 2.0)
        w[0] = 1.0
        w[-1] = 1.0
        shape = [1] * self.dim
        shape[-1] = w.size
        return np.broadcast_to(w.reshape(shape), self.spectral_shape)

    def coordinates(self):
        """Tuple of ``dim`` coordinate arrays of shape ``self.shape`` (ij indexing)."""
        x = np.arange(self.n) * self.spacing
        return tuple(np.meshgrid(*([x] * self.dim), indexing="ij"))

    def points(self):
        """All grid nodes as an ``(n**dim, dim)`` array, row-major."""
        return np.stack([c.ravel() for c in self.coordinates()], axis=-1)

    def forward(self, data):
        return sfft.rfftn(data, axes=self.axes, workers=workers())

    def inverse(self, coeffs):
        return sfft.irfftn(coeffs, s=self.shape, axes=self.axes, workers=workers())

    def spectral_inner(self, a, b):
        """Physical-space integral of ``f*g`` from real-transform coefficients."""
        s = np.sum(self.rfft_weights * (a * np.conj(b)).real)
        return float(s) * self.cell_volume / self.size


def make_grid(dim, n_per_axis, box_length):
    return Grid(dim, n_per_axis, box_length)


class MultiIndex(tuple):
    """Derivative orders per axis."""

    def __new__(cls, orders, cap=MAX_DERIVATIVE_ORDER):
        orders = tuple(int(o) for o in orders)
        if any(o < 0 for o in orders):
            raise ValueError(f"negative derivative order in {orders}")
        if sum(orders) > cap:
            raise ValueError(f"total derivative order {sum(orders)} exceeds cap {cap}")
        return super().__new__(cls, orders)

    @property
    def order(self):
        return sum(self)


def multi_indices(dim, order):
    """All multi-indices of total ``order`` in ``dim`` variables, with multinomial weights."""
    out = []
    for m in product(range(order + 1), repeat=dim):
        if sum(m) == order:
            weight = math.factorial(order)
            for o in m:
                weight //= math.factorial(o)
            out.append((MultiIndex(m), weight))
    return out


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


class ScalarField:
    """Real scalar field on a :class:`Grid`."""

    def __init__(self, grid, samples):
        samples = np.array(samples, dtype=np.float64)
        if samples.shape != grid.shape:
            raise ValueError(f"samples shape {samples.shape} does not match grid {grid.shape}")
        self.grid = grid
        self.samples = _readonly(samples)

    @classmethod
    def from_spectral(cls, grid, coeffs):
        field = cls(grid, grid.inverse(coeffs))
        field.__dict__["spectral"] = _readonly(coeffs)
        return field

    @classmethod
    def zeros(cls, grid):
        return cls(grid, np.zeros(grid.shape))

    @cached_property
    def spectral(self):
        return _readonly(self.grid.forward(self.samples))

    def mean(self):
        return float(self.samples.mean())

    def integral(self):
        return float(self.samples.sum()) * self.grid.cell_volume

    def norm_l2(self):
        return math.sqrt(float(np.sum(self.samples**2)) * self.grid.cell_volume)

    def __add__(self, other):
        if isinstance(other, ScalarField):
            return ScalarField(self.grid, self.samples + other.samples)
        return ScalarField(self.grid, self.samples + other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, ScalarField):
            return ScalarField(self.grid, self.samples - other.samples)
        return ScalarField(self.grid, self.samples - other)

    def __mul__(self, c):
        if isinstance(c, ScalarField):
            return ScalarField(self.grid, self.samples * c.samples)
        return ScalarField(self.grid, self.samples * c)

    __rmul__ = __mul__

    def __neg__(self):
        return ScalarField(self.grid, -self.samples)

    def __repr__(self):
        return f"ScalarField(grid={self.grid!r})"


class VectorField:
    """Real vector field with ``grid.dim`` components on one grid.

    ``divfree`` records that the field was produced by a divergence-free
    construction (Leray projection or an explicit generator).
    """

    def __init__(self, grid, data, divfree=False):
        data = np.array(data, dtype=np.float64)
        if data.shape != (grid.dim,) + grid.shape:
            raise ValueError(f"data shape {data.shape} does not match {(grid.dim,) + grid.shape}")
        self.grid = grid
        self.data = _readonly(data)
        self.divfree = bool(divfree)

    @classmethod
    def from_spectral(cls, grid, coeffs, divfree=False):
        field = cls(grid, grid.inverse(coeffs), divfree=divfree)
        field.__dict__["spectral"] = _readonly(coeffs)
        return field

    @classmethod
    def from_components(cls, components, divfree=False):
        grid = components[0].grid
        return cls(grid, np.stack([c.samples for c in components]), divfree=divfree)

    @classmethod
    def zeros(cls, grid):
        return cls(grid, np.zeros((grid.dim,) + grid.shape), divfree=True)

    @cached_property
    def spectral(self):
        return _readonly(self.grid.forward(self.data))

    @property
    def components(self):
        return tuple(ScalarField(self.grid, c) for c in self.data)

    def energy(self):
        """Squared L2 norm ``int |u|^2 dx`` (no factor 1/2)."""
        return float(np.sum(self.data**2)) * self.grid.cell_volume

    def mean(self):
        return self.data.reshape(self.grid.dim, -1).mean(axis=1)

    def divergence_ratio(self):
        """``max |div u_hat| / max |k u_hat|``; zero for the zero field.

        The divergence is scaled by the largest spectral gradient magnitude
        so the ratio is independent of the box length.
        """
        g = self.grid
        uh = self.spectral
        div = sum(1j * k * uh[a] for a, k in enumerate(g.odd_wavenumbers))
        ref = np.max(np.abs(uh) * g.kmag)
        if ref == 0:
            return 0.0
        return float(np.max(np.abs(div)) / ref)

    def __add__(self, other):
        return VectorField(self.grid, self.data + other.data, divfree=self.divfree and other.divfree)

    def __sub__(self, other):
        return VectorField(self.grid, self.data - other.data, divfree=self.divfree and other.divfree)

    def __mul__(self, c):
        return VectorField(self.grid, self.data * c, divfree=self.divfree)

    __rmul__ = __mul__

    def __neg__(self):
        return VectorField(self.grid, -self.data, divfree=self.divfree)

    def __repr__(self):
        return f"VectorField(grid={self.grid!r}, divfree={self.divfree})"


@lru_cache(maxsize=256)
def derivative_multiplier(grid, m):
    """Spectral multiplier ``prod_a (i k_a)^m_a`` on the real-transform lattice."""
    m = MultiIndex(m)
    if len(m) != grid.dim:
        raise ValueError(f"multi-index {tuple(m)} has wrong length for dim {grid.dim}")
    mult = np.ones(grid.spectral_shape, dtype=complex)
    for a, o in enumerate(m):
        if o == 0:
            continue
        k = grid.odd_wavenumbers[a] if o % 2 else grid.wavenumbers[a]
        mult = mult * (1j * k) ** o
    mult.setflags(write=False)
    return mult


def derivative(f, m):
    """Spectral derivative ``d^m f``."""
    mult = derivative_multiplier(f.grid, tuple(m))
    return ScalarField.from_spectral(f.grid, f.spectral * mult)


def gradient(f):
    g = f.grid
    coeffs = np.stack([1j * k * f.spectral for k in g.odd_wavenumbers])
    return VectorField.from_spectral(g, coeffs)


def divergence(v):
    g = v.grid
    coeffs = sum(1j * k * v.spectral[a] for a, k in enumerate(g.odd_wavenumbers))
    return ScalarField.from_spectral(g, coeffs)


def project_coefficients(grid, uh):
    """Leray projection of stacked real-transform coefficients ``(dim, ...)``."""
    k = grid.odd_wavenumbers
    kk = sum(ka**2 for ka in k)
    safe = np.where(kk == 0, 1.0, kk)
    kdotu = sum(ka * uh[a] for a, ka in enumerate(k))
    return np.stack([uh[a] - ka * kdotu / safe for a, ka in enumerate(k)])


def leray_project(v):
    """Project onto divergence-free fields; the mean is left unchanged."""
    return VectorField.from_spectral(v.grid, project_coefficients(v.grid, v.spectral), divfree=True)


def full_coefficients(grid, data):
    """Centered full-spectrum coefficients for trigonometric evaluation.

    ``data`` has shape ``(..., *grid.shape)``; the result has the same shape,
    complex, ordered from mode ``-n/2`` to ``n/2 - 1`` along each axis.
    """
    c = sfft.fftn(data, axes=grid.axes, workers=workers()) / grid.size
    return np.fft.fftshift(c, axes=grid.axes)


def evaluate_coefficients(grid, coeffs, points, eps=1e-13):
    """Evaluate trigonometric interpolants at arbitrary points.

    Parameters
    ----------
    coeffs : ndarray
        Output of :func:`full_coefficients`, shape ``(*grid.shape)`` or
        ``(m, *grid.shape)``.
    points : array_like, shape (P, dim)
    eps : float
        Relative tolerance handed to the non-uniform FFT.

    Returns
    -------
    ndarray, shape ``(P,)`` or ``(m, P)``, real.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    single = coeffs.ndim == grid.dim
    if points.shape[0] == 0:
        return np.zeros((0,) if single else (coeffs.shape[0], 0))
    x = np.mod(points.T * grid.scale, 2 * np.pi)
    x = [np.ascontiguousarray(xi) for xi in x]
    c = np.ascontiguousarray(coeffs, dtype=np.complex128)
    fn = finufft.nufft2d2 if grid.dim == 2 else finufft.nufft3d2
    out = fn(*x, c, eps=eps, isign=1, modeord=0, nthreads=workers())
    return out.real


def direct_evaluate(grid, coeffs, points):
    """Reference trigonometric sum, one point at a time (small inputs only)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    m = np.arange(-grid.n // 2, grid.n // 2)
    single = coeffs.ndim == grid.dim
    c = coeffs[None] if single else coeffs
    out = np.empty((c.shape[0], points.shape[0]))
    for p, x in enumerate(points):
        phases = [np.exp(1j * grid.scale * m * xa) for xa in x]
        if grid.dim == 2:
            val = np.einsum("fab,a,b->f", c, *phases)
        else:
            val = np.einsum("fabc,a,b,c->f", c, *phases)
        out[:, p] = val.real
    return out[0] if single else out


def sample_at_points(f, points, method="nufft"):
    """Values of the band-limited interpolant of ``f`` at off-grid points."""
    coeffs = full_coefficients(f.grid, f.samples)
    if method == "direct":
        return direct_evaluate(f.grid, coeffs, points)
    return evaluate_coefficients(f.grid, coeffs, points)


def taylor_green(grid, amplitude=1.0):
    """Taylor-Green vortex with unit mode number in a box of side ``grid.length``.

    In 2D this is the initial datum of the exact decaying solution
    ``u = A exp(-2 nu kappa^2 t) (sin x cos y, -cos x sin y)``.
    """
    c = [grid.scale * xi for xi in grid.coordinates()]
    a = float(amplitude)
    if grid.dim == 2:
        x, y = c
        data = a * np.stack([np.sin(x) * np.cos(y), -np.cos(x) * np.sin(y)])
    else:
        x, y, z = c
        data = a * np.stack(
            [
                np.sin(x) * np.cos(y) * np.cos(z),
                -np.cos(x) * np.sin(y) * np.cos(z),
                np.zeros(grid.shape),
            ]
        )
    return VectorField(grid, data, divfree=True)


def random_divfree_field(grid, spectrum_slope=-5.0 / 3.0, k_peak=2.0, seed=0, energy=1.0):
    """Gaussian random solenoidal field with a broken power-law spectrum.

    The shell spectrum rises as ``k^4`` below ``k_peak`` and follows
    ``k^spectrum_slope`` above it.  Modes outside the 2/3 dealiasing band
    and the mean are zero; the result is rescaled so that
    ``int |u|^2 dx == energy``.
    """
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((grid.dim,) + grid.shape)
    uh = grid.forward(noise)
    kmag = grid.kmag
    ratio = np.where(kmag == 0, 1.0, kmag / k_peak)
    shell = np.where(ratio < 1, ratio**4, ratio**spectrum_slope)
    amp = np.sqrt(shell / np.where(kmag == 0, 1.0, kmag) ** (grid.dim - 1))
    amp = np.where((kmag == 0) | ~grid.dealias_mask, 0.0, amp)
    uh = project_coefficients(grid, uh * amp)
    current = sum(grid.spectral_inner(uh[a], uh[a]) for a in range(grid.dim))
    if current > 0:
        uh = uh * math.sqrt(energy / current)
    return VectorField.from_spectral(grid, uh, divfree=True)
