import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nsscale.fields import make_grid, random_divfree_field, taylor_green
from nsscale.solver import SolverConfig, Trajectory, simulate

settings.register_profile(
    "default", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

TWO_PI = 2 * np.pi


def frozen_trajectory(u, times, cfg=None):
    """Trajectory whose snapshots are all equal to ``u`` (a steady field)."""
    times = np.asarray(times, dtype=float)
    cfg = cfg or SolverConfig(dt=float(times[1] - times[0]), t_end=float(times[-1] - times[0]))
    return Trajectory(u.grid, times, tuple(u for _ in times), cfg, u.energy(), None)


def tg_exact(grid, t, amplitude=1.0, nu=1.0):
    return amplitude * np.exp(-2 * nu * t) * taylor_green(grid, 1.0).data


@pytest.fixture(scope="session")
def grid2():
    return make_grid(2, 32, TWO_PI)


@pytest.fixture(scope="session")
def grid3():
    return make_grid(3, 16, TWO_PI)


@pytest.fixture(scope="session")
def tg_traj(grid2):
    cfg = SolverConfig(viscosity=1.0, dt=1e-3, t_end=0.2, snapshot_stride=10)
    return simulate(taylor_green(grid2, 1.0), cfg)


@pytest.fixture(scope="session")
def random_traj(grid3):
    u0 = random_divfree_field(grid3, seed=3, k_peak=2.0, energy=50.0)
    cfg = SolverConfig(viscosity=0.1, dt=0.005, t_end=0.4, snapshot_stride=2)
    return simulate(u0, cfg, seed=3)


@pytest.fixture(scope="session")
def zero_traj(grid3):
    from nsscale.fields import VectorField

    cfg = SolverConfig(viscosity=1.0, dt=0.005, t_end=0.4, snapshot_stride=2)
    return simulate(VectorField.zeros(grid3), cfg)
