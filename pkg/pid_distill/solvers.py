"""Probability-flow ODE dx/dt = (x - D(x, t)) / t and reference solvers on a TimeGrid."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from pid_distill.errors import DomainError, InputError, NumericalError
from pid_distill.teacher import TeacherSpec, denoise
from pid_distill.time_grid import TimeGrid


@dataclass(frozen=True, eq=False)
class Trajectory:
    z: np.ndarray
    times: np.ndarray
    states: np.ndarray  # (n, *z.shape); states[i] = x(z, times[i])

    @property
    def endpoint(self) -> np.ndarray:
        return self.states[-1]


def ode_rhs(teacher: TeacherSpec, x: np.ndarray, t: float | np.ndarray) -> np.ndarray:
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr <= 0.0):
        raise DomainError("ode_rhs requires t > 0")
    return (np.asarray(x, dtype=np.float64) - denoise(teacher, x, t_arr)) / t_arr[..., None]


def _euler_step(teacher: TeacherSpec, x: np.ndarray, t_cur: float, t_next: float) -> np.ndarray:
    return x - (t_cur - t_next) * ode_rhs(teacher, x, t_cur)


def _heun_step(teacher: TeacherSpec, x: np.ndarray, t_cur: float, t_next: float) -> np.ndarray:
    h = t_next - t_cur
    slope = ode_rhs(teacher, x, t_cur)
    predicted = x + h * slope
    # grid stops at t_min > 0, so the corrector is always applicable
    return x + h * 0.5 * (slope + ode_rhs(teacher, predicted, t_next))


_STEPS: dict[str, Callable[[TeacherSpec, np.ndarray, float, float], np.ndarray]] = {
    "euler": _euler_step,
    "heun": _heun_step,
}


def _check_noise(teacher: TeacherSpec, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 0 or z.shape[-1] != teacher.dim:
        raise InputError(f"z has shape {z.shape}, expected (..., {teacher.dim})")
    if not np.all(np.isfinite(z)):
        raise InputError("z must be finite")
    return z


def _solve(teacher: TeacherSpec, grid: TimeGrid, z: np.ndarray, name: str) -> Trajectory:
    z = _check_noise(teacher, z)
    step = _STEPS[name]
    states = np.empty((grid.n,) + z.shape, dtype=np.float64)
    states[0] = z
    for i in range(grid.n - 1):
        nxt = step(teacher, states[i], float(grid.times[i]), float(grid.times[i + 1]))
        if not np.all(np.isfinite(nxt)):
            raise NumericalError(f"{name}: non-finite state at t={grid.times[i + 1]:.6g}", step=i + 1)
        states[i + 1] = nxt
    return Trajectory(z=z, times=grid.times, states=states)


def euler_solve(teacher: TeacherSpec, grid: TimeGrid, z: np.ndarray) -> Trajectory:
    return _solve(teacher, grid, z, "euler")


def heun_solve(teacher: TeacherSpec, grid: TimeGrid, z: np.ndarray) -> Trajectory:
    return _solve(teacher, grid, z, "heun")


SOLVERS: dict[str, Callable[[TeacherSpec, TimeGrid, np.ndarray], Trajectory]] = {
    "euler": euler_solve,
    "heun": heun_solve,
}


def solve_endpoint(teacher: TeacherSpec, grid: TimeGrid, z: np.ndarray, solver: str = "heun") -> np.ndarray:
    """State at t_min only; keeps one state per member instead of the whole trajectory."""
    if solver not in _STEPS:
        raise InputError(f"unknown solver {solver!r}, expected one of {tuple(_STEPS)}")
    x = _check_noise(teacher, z).copy()
    step = _STEPS[solver]
    for i in range(grid.n - 1):
        x = step(teacher, x, float(grid.times[i]), float(grid.times[i + 1]))
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"{solver}: non-finite endpoint", step=grid.n - 1)
    return x


def closed_form_single_gaussian(
    mu: np.ndarray,
    sigma0: float,
    z: np.ndarray,
    t: float,
    t_max: float,
) -> np.ndarray:
    """Exact trajectory of a single Gaussian teacher: dx/dt = t (x - mu) / (sigma0^2 + t^2).

    Separating variables gives ln|x - mu| = ln sqrt(sigma0^2 + t^2) + const, fixed by x(T) = z.
    """
    mu = np.asarray(mu, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if not 0.0 <= t <= t_max:
        raise DomainError(f"closed form requires t in [0, {t_max}], got {t}")
    if t == t_max:
        return z.copy()
    return mu + (z - mu) * np.sqrt((sigma0**2 + t**2) / (sigma0**2 + t_max**2))


def closed_form_trajectory(teacher: TeacherSpec, grid: TimeGrid, z: np.ndarray) -> Trajectory:
    if not teacher.is_single_gaussian:
        raise InputError("closed-form trajectories exist only for single-Gaussian teachers")
    comp = teacher.components[0]
    z = np.asarray(z, dtype=np.float64)
    states = np.stack(
        [closed_form_single_gaussian(teacher.means[0], comp.sigma0, z, float(t), grid.t_max) for t in grid.times]
    )
    return Trajectory(z=z, times=grid.times, states=states)
