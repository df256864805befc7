"""Physics informed distillation residual and its parameter gradient.

Each numerical differentiation mode is a stencil over the time grid: the
student is evaluated at two or three grid times, the derivative estimate is a
difference quotient of two of those evaluations and the residual is anchored
at a weighted average of them. The exact mode replaces the difference
quotient with the forward-mode derivative of the student.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pid_distill.errors import ConfigError, InputError, NumericalError
from pid_distill.student import SMOOTH_ACTIVATIONS, StudentConfig, StudentParams, evaluate, pullback
from pid_distill.teacher import TeacherSpec, denoise, denoiser_jacobian
from pid_distill.time_grid import TimeGrid


DIFF_MODES: tuple[str, ...] = ("upwind", "central", "central3", "exact")
METRICS: tuple[str, ...] = ("squared_l2", "l2", "l1")
FORMS: tuple[str, ...] = ("shifted", "vanilla")


@dataclass(frozen=True)
class LossConfig:
    metric: str = "squared_l2"
    diff_mode: str = "upwind"
    stop_grad: bool = True
    form: str = "shifted"

    def __post_init__(self) -> None:
        if self.metric not in METRICS:
            raise ConfigError(f"loss.metric must be one of {METRICS}, got {self.metric!r}")
        if self.diff_mode not in DIFF_MODES:
            raise ConfigError(f"loss.diff_mode must be one of {DIFF_MODES}, got {self.diff_mode!r}")
        if self.form not in FORMS:
            raise ConfigError(f"loss.form must be one of {FORMS}, got {self.form!r}")

    @property
    def interior(self) -> bool:
        return self.diff_mode == "central3"


def check_compatible(loss: LossConfig, student: StudentConfig) -> None:
    if loss.diff_mode == "exact" and student.activation not in SMOOTH_ACTIVATIONS:
        raise ConfigError(
            f"loss.diff_mode 'exact' needs a smooth activation {SMOOTH_ACTIVATIONS}, got {student.activation!r}"
        )


def numerical_dt_upwind(x_i: np.ndarray, x_j: np.ndarray, t_i: float | np.ndarray, t_j: float | np.ndarray) -> np.ndarray:
    step = np.asarray(t_i, dtype=np.float64) - np.asarray(t_j, dtype=np.float64)
    if np.any(step == 0.0):
        raise InputError("degenerate step: t_i == t_j")
    x_i = np.asarray(x_i, dtype=np.float64)
    x_j = np.asarray(x_j, dtype=np.float64)
    return (x_i - x_j) / (step[..., None] if step.ndim else step)


def distance(metric: str, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distance over the last axis and its gradient with respect to ``a``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"distance operands differ in shape: {a.shape} vs {b.shape}")
    diff = a - b
    if metric == "squared_l2":
        return np.sum(diff * diff, axis=-1), 2.0 * diff
    if metric == "l2":
        norm = np.sqrt(np.sum(diff * diff, axis=-1))
        safe = np.where(norm > 0.0, norm, 1.0)
        return norm, np.where((norm > 0.0)[..., None], diff / safe[..., None], 0.0)
    if metric == "l1":
        return np.sum(np.abs(diff), axis=-1), np.sign(diff)
    raise ConfigError(f"loss.metric must be one of {METRICS}, got {metric!r}")


@dataclass(frozen=True, eq=False)
class Stencil:
    offsets: tuple[int, ...]  # grid offsets from i of each student evaluation
    hi: int  # evaluation at the larger time in the difference quotient
    lo: int
    anchor_weights: tuple[float, ...]


_STENCILS: dict[str, Stencil] = {
    "upwind": Stencil(offsets=(0, 1), hi=0, lo=1, anchor_weights=(1.0, 0.0)),
    "central": Stencil(offsets=(0, 1), hi=0, lo=1, anchor_weights=(0.5, 0.5)),
    "central3": Stencil(offsets=(-1, 0, 1), hi=0, lo=2, anchor_weights=(0.0, 1.0, 0.0)),
}


def _check_indices(grid: TimeGrid, indices: np.ndarray, mode: str) -> None:
    low = 1 if mode == "central3" else 0
    if indices.size and (indices.min() < low or indices.max() > grid.n - 2):
        raise InputError(f"index out of range for {mode} mode: expected {low}..{grid.n - 2}")


def _anchor(stencil: Stencil, times: list[np.ndarray], states: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    weights = stencil.anchor_weights
    t_anchor = sum(w * t for w, t in zip(weights, times) if w)
    if stencil.anchor_weights.count(1.0) == 1:
        return states[weights.index(1.0)], t_anchor
    return sum(w * x for w, x in zip(weights, states) if w), t_anchor


@dataclass(frozen=True, eq=False)
class ResidualTerms:
    losses: np.ndarray
    g_anchor: np.ndarray
    g_deriv: np.ndarray


def _residual(
    teacher: TeacherSpec,
    anchor: np.ndarray,
    deriv: np.ndarray,
    t_anchor: np.ndarray,
    cfg: LossConfig,
) -> ResidualTerms:
    denoised = denoise(teacher, anchor, t_anchor)
    tcol = t_anchor[:, None]
    if cfg.form == "shifted":
        left, target = anchor - tcol * deriv, denoised
    else:
        left, target = deriv, (anchor - denoised) / tcol
    losses, g_left = distance(cfg.metric, left, target)
    if cfg.form == "shifted":
        g_anchor, g_deriv = g_left, -tcol * g_left
    else:
        g_anchor, g_deriv = np.zeros_like(g_left), g_left
    if not cfg.stop_grad:
        g_target = -g_left
        jac_t_g = np.einsum("bij,bi->bj", denoiser_jacobian(teacher, anchor, t_anchor), g_target)
        if cfg.form == "shifted":
            g_anchor = g_anchor + jac_t_g
        else:
            g_anchor = g_anchor + (g_target - jac_t_g) / tcol
    return ResidualTerms(losses=losses, g_anchor=g_anchor, g_deriv=g_deriv)


@dataclass(frozen=True, eq=False)
class BatchResult:
    loss: float
    losses: np.ndarray
    grad: np.ndarray


def pid_batch(
    params: StudentParams,
    student_cfg: StudentConfig,
    teacher: TeacherSpec,
    grid: TimeGrid,
    indices: np.ndarray,
    z: np.ndarray,
    cfg: LossConfig,
) -> BatchResult:
    """Batch-mean PID loss and gradient for independent (i, z) pairs."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    indices = np.broadcast_to(np.asarray(indices, dtype=np.int64), (z.shape[0],))
    _check_indices(grid, indices, cfg.diff_mode)
    if not np.all(np.isfinite(z)):
        raise InputError("z must be finite")
    batch = z.shape[0]

    if cfg.diff_mode == "exact":
        ev = evaluate(params, student_cfg, z, grid.times[indices], tangent=True)
        assert ev.dxdt is not None
        terms = _residual(teacher, ev.x, ev.dxdt, ev.t, cfg)
        grad = pullback(params, student_cfg, ev, terms.g_anchor, terms.g_deriv)
    else:
        stencil = _STENCILS[cfg.diff_mode]
        times = [grid.times[indices + off] for off in stencil.offsets]
        evals = [evaluate(params, student_cfg, z, t) for t in times]
        states = [ev.x for ev in evals]
        anchor, t_anchor = _anchor(stencil, times, states)
        step = times[stencil.hi] - times[stencil.lo]
        deriv = numerical_dt_upwind(states[stencil.hi], states[stencil.lo], times[stencil.hi], times[stencil.lo])
        terms = _residual(teacher, anchor, deriv, t_anchor, cfg)
        g_quotient = terms.g_deriv / step[:, None]
        grad = np.zeros(params.size)
        for k, ev in enumerate(evals):
            g_x = stencil.anchor_weights[k] * terms.g_anchor
            if k == stencil.hi:
                g_x = g_x + g_quotient
            elif k == stencil.lo:
                g_x = g_x - g_quotient
            grad = grad + pullback(params, student_cfg, ev, g_x)

    loss = float(np.mean(terms.losses))
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite PID loss (mode={cfg.diff_mode}, metric={cfg.metric})")
    return BatchResult(loss=loss, losses=terms.losses, grad=grad / batch)


def pid_residual(
    params: StudentParams,
    student_cfg: StudentConfig,
    teacher: TeacherSpec,
    grid: TimeGrid,
    i: int,
    z: np.ndarray,
    cfg: LossConfig,
) -> tuple[float, np.ndarray]:
    result = pid_batch(params, student_cfg, teacher, grid, np.array([i]), np.asarray(z)[None, :], cfg)
    return result.loss, result.grad


def lookup_residual(
    teacher: TeacherSpec,
    grid: TimeGrid,
    states: np.ndarray,
    i: int | np.ndarray,
    cfg: LossConfig,
) -> np.ndarray:
    """PID loss of a tabulated trajectory ``states[n, ..., dim]`` at grid index ``i``."""
    if cfg.diff_mode == "exact":
        raise InputError("exact mode needs a differentiable student, not a lookup table")
    states = np.asarray(states, dtype=np.float64)
    if states.shape[0] != grid.n:
        raise InputError(f"states cover {states.shape[0]} times, grid has {grid.n}")
    single = states.ndim == 2
    table = states[:, None, :] if single else states
    batch = table.shape[1]
    indices = np.broadcast_to(np.asarray(i, dtype=np.int64), (batch,))
    _check_indices(grid, indices, cfg.diff_mode)
    stencil = _STENCILS[cfg.diff_mode]
    rows = np.arange(batch)
    times = [grid.times[indices + off] for off in stencil.offsets]
    picked = [table[indices + off, rows] for off in stencil.offsets]
    anchor, t_anchor = _anchor(stencil, times, picked)
    deriv = numerical_dt_upwind(picked[stencil.hi], picked[stencil.lo], times[stencil.hi], times[stencil.lo])
    losses = _residual(teacher, anchor, deriv, t_anchor, cfg).losses
    return losses[0] if single else losses
