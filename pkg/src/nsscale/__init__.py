"""Pseudo-spectral periodic Navier-Stokes solver with scaling and local-frame diagnostics."""

__version__ = "0.1.0"

from .fields import Grid, ScalarField, VectorField, make_grid  # noqa: E402
from .solver import SolverConfig, Trajectory, simulate  # noqa: E402

__all__ = ["Grid", "ScalarField", "VectorField", "make_grid", "SolverConfig", "Trajectory", "simulate", "__version__"]
