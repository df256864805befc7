from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from pid_distill.errors import ConfigError, InputError


T_MIN = 0.002
T_MAX = 80.0
RHO = 7.0


@dataclass(frozen=True, eq=False)
class TimeGrid:
    times: np.ndarray
    rho: float
    t_min: float
    t_max: float
    kind: str = "edm"

    def __post_init__(self) -> None:
        times = self.times
        if times.ndim != 1 or times.size < 2:
            raise ConfigError(f"grid.n must be >= 2, got {times.size}")
        if times[0] != self.t_max or times[-1] != self.t_min:
            raise ConfigError("grid endpoints must equal t_max and t_min exactly")
        if not np.all(np.diff(times) < 0.0):
            raise ConfigError("grid times must be strictly decreasing")
        times.setflags(write=False)

    @property
    def n(self) -> int:
        return int(self.times.size)

    @property
    def steps(self) -> np.ndarray:
        return self.times[:-1] - self.times[1:]

    @property
    def max_step(self) -> float:
        return float(np.max(self.steps))


def _check_bounds(n: int, t_min: float, t_max: float) -> None:
    if not isinstance(n, int) or n < 2:
        raise ConfigError(f"grid.n must be an integer >= 2, got {n!r}")
    if not (t_min > 0.0) or not math.isfinite(t_min):
        raise ConfigError(f"grid.t_min must be > 0, got {t_min!r}")
    if not (t_max > t_min) or not math.isfinite(t_max):
        raise ConfigError(f"grid.t_max must be > grid.t_min, got t_min={t_min!r} t_max={t_max!r}")


def edm_grid(n: int, *, t_min: float = T_MIN, t_max: float = T_MAX, rho: float = RHO) -> TimeGrid:
    _check_bounds(n, t_min, t_max)
    if not (rho > 0.0) or not math.isfinite(rho):
        raise ConfigError(f"grid.rho must be > 0, got {rho!r}")
    ramp = np.arange(n, dtype=np.float64) / (n - 1)
    hi = t_max ** (1.0 / rho)
    lo = t_min ** (1.0 / rho)
    times = (hi + ramp * (lo - hi)) ** rho
    times[0] = t_max
    times[-1] = t_min
    return TimeGrid(times=times, rho=float(rho), t_min=float(t_min), t_max=float(t_max), kind="edm")


def uniform_grid(n: int, *, t_min: float = T_MIN, t_max: float = T_MAX) -> TimeGrid:
    _check_bounds(n, t_min, t_max)
    times = np.linspace(t_max, t_min, n, dtype=np.float64)
    times[0] = t_max
    times[-1] = t_min
    return TimeGrid(times=times, rho=1.0, t_min=float(t_min), t_max=float(t_max), kind="uniform")


def make_grid(kind: str, n: int, *, t_min: float = T_MIN, t_max: float = T_MAX, rho: float = RHO) -> TimeGrid:
    if kind == "edm":
        return edm_grid(n, t_min=t_min, t_max=t_max, rho=rho)
    if kind == "uniform":
        return uniform_grid(n, t_min=t_min, t_max=t_max)
    raise ConfigError(f"grid.kind must be 'edm' or 'uniform', got {kind!r}")


def sample_index(grid: TimeGrid, rng: np.random.Generator, *, interior: bool = False) -> int:
    """One index i with (t_i, t_{i+1}) inside the grid; ``interior`` also requires t_{i-1}."""
    return int(sample_indices(grid, rng, 1, interior=interior)[0])


def sample_indices(grid: TimeGrid, rng: np.random.Generator, size: int, *, interior: bool = False) -> np.ndarray:
    low = 1 if interior else 0
    if grid.n - 1 <= low:
        raise InputError(f"grid with n={grid.n} has no {'interior ' if interior else ''}index to sample")
    return rng.integers(low, grid.n - 1, size=size)
