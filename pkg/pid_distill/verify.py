"""Fast invariant suite behind ``pid verify``: each check returns a verdict instead of raising."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from pid_distill.evaluation import energy_distance, heun_order_check, lemma_scaling_check
from pid_distill.persist import params_from_json, params_to_json
from pid_distill.pid_loss import LossConfig, lookup_residual, pid_residual
from pid_distill.solvers import euler_solve
from pid_distill.student import StudentConfig, init_params, student_backward, student_dt_exact, student_forward
from pid_distill.teacher import (
    GaussianComponent,
    TeacherSpec,
    denoise,
    gaussian_teacher,
    log_density,
    prior_noise,
    ring_teacher,
    score,
)
from pid_distill.time_grid import T_MAX, edm_grid


_LOG = logging.getLogger(__name__)

ORDER_GRID = (100, 1000, 10000)


@dataclass(frozen=True)
class CheckResult:
    name: str
    ok: bool
    detail: str


_CHECKS: list[tuple[str, Callable[[], tuple[bool, str]]]] = []


def _check(name: str) -> Callable[[Callable[[], tuple[bool, str]]], Callable[[], tuple[bool, str]]]:
    def register(fn: Callable[[], tuple[bool, str]]) -> Callable[[], tuple[bool, str]]:
        _CHECKS.append((name, fn))
        return fn

    return register


def bimodal_1d() -> TeacherSpec:
    return TeacherSpec(
        dim=1,
        components=(
            GaussianComponent(weight=0.5, mean=(-2.0,), sigma0=0.5),
            GaussianComponent(weight=0.5, mean=(2.0,), sigma0=0.5),
        ),
    )


def _small_student(dim: int = 2, activation: str = "silu") -> StudentConfig:
    return StudentConfig(input_dim=dim, hidden_dims=(8, 8), activation=activation)


@_check("boundary")
def _boundary() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    cfg = _small_student()
    worst = 0.0
    for _ in range(100):
        params = init_params(cfg, rng)
        z = rng.standard_normal(cfg.input_dim) * rng.uniform(0.0, 3.0 * T_MAX)
        worst = max(worst, float(np.max(np.abs(student_forward(params, cfg, z, T_MAX) - z))))
    return worst <= 1e-12, f"max |x(z, T) - z| = {worst:.3e}"


def _relative_gap(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b) / (1.0 + np.abs(b))))


@_check("parameter-gradient")
def _parameter_gradient() -> tuple[bool, str]:
    rng = np.random.default_rng(1)
    cfg = _small_student()
    params = init_params(cfg, rng)
    z = rng.standard_normal((4, cfg.input_dim)) * 20.0
    t = np.array([0.01, 0.5, 7.0, 60.0])
    upstream = rng.standard_normal(z.shape)
    grad = student_backward(params, cfg, z, t, upstream)
    flat = params.flat()
    coords = rng.choice(flat.size, size=min(40, flat.size), replace=False)
    fd = np.empty(coords.size)
    h = 1e-6
    for k, idx in enumerate(coords):
        bump = np.zeros_like(flat)
        bump[idx] = h
        up = np.sum(upstream * student_forward(params.unflatten(flat + bump), cfg, z, t))
        down = np.sum(upstream * student_forward(params.unflatten(flat - bump), cfg, z, t))
        fd[k] = (up - down) / (2.0 * h)
    gap = _relative_gap(grad[coords], fd)
    return gap <= 1e-5, f"max relative gap {gap:.2e} over {coords.size} coordinates"


@_check("time-derivative")
def _time_derivative() -> tuple[bool, str]:
    rng = np.random.default_rng(2)
    cfg = _small_student()
    params = init_params(cfg, rng)
    z = rng.standard_normal((5, cfg.input_dim)) * 30.0
    t = np.array([0.003, 0.2, 1.5, 12.0, 70.0])
    exact = student_dt_exact(params, cfg, z, t)
    h = 1e-6 * t
    fd = (student_forward(params, cfg, z, t + h) - student_forward(params, cfg, z, t - h)) / (2.0 * h[:, None])
    gap = _relative_gap(exact, fd)
    return gap <= 1e-5, f"max relative gap {gap:.2e}"


@_check("pid-gradient")
def _pid_gradient() -> tuple[bool, str]:
    rng = np.random.default_rng(3)
    # a vanishing sigma0 pins D near the mean, so the stop-gradient target stays put under perturbation
    teacher = gaussian_teacher(2, mean=[1.0, -2.0], sigma0=1e-6)
    cfg = _small_student()
    grid = edm_grid(16)
    params = init_params(cfg, rng)
    flat = params.flat()
    worst = 0.0
    for mode in ("upwind", "central", "central3", "exact"):
        loss_cfg = LossConfig(diff_mode=mode)
        z = rng.standard_normal(2) * T_MAX
        i = 5
        _, grad = pid_residual(params, cfg, teacher, grid, i, z, loss_cfg)
        coords = rng.choice(flat.size, size=12, replace=False)
        for idx in coords:
            h = 1e-6
            bump = np.zeros_like(flat)
            bump[idx] = h
            up, _ = pid_residual(params.unflatten(flat + bump), cfg, teacher, grid, i, z, loss_cfg)
            down, _ = pid_residual(params.unflatten(flat - bump), cfg, teacher, grid, i, z, loss_cfg)
            fd = (up - down) / (2.0 * h)
            worst = max(worst, abs(grad[idx] - fd) / (1.0 + abs(fd)))
    return worst <= 1e-5, f"max relative gap {worst:.2e}"


@_check("teacher-consistency")
def _teacher_consistency() -> tuple[bool, str]:
    worst_denoise = 0.0
    worst_score = 0.0
    h = 1e-5
    for teacher in (ring_teacher(), bimodal_1d(), gaussian_teacher(3, sigma0=0.7)):
        direction = np.linspace(1.0, 0.5, teacher.dim)
        for s in np.linspace(-8.0, 8.0, 10):
            x = s * direction
            for t in np.geomspace(0.01, T_MAX, 10):
                sc = score(teacher, x, t)
                gap = np.max(np.abs(denoise(teacher, x, t) - (x + t * t * sc)))
                worst_denoise = max(worst_denoise, float(gap / (1.0 + np.max(np.abs(x)))))
                fd = np.empty(teacher.dim)
                for j in range(teacher.dim):
                    bump = np.zeros(teacher.dim)
                    bump[j] = h
                    fd[j] = (log_density(teacher, x + bump, t) - log_density(teacher, x - bump, t)) / (2.0 * h)
                worst_score = max(worst_score, float(np.max(np.abs(sc - fd)) / (1.0 + np.max(np.abs(sc)))))
    ok = worst_denoise <= 1e-5 and worst_score <= 1e-5
    return ok, f"denoise gap {worst_denoise:.2e}, score gap {worst_score:.2e}"


@_check("euler-lookup-residual")
def _euler_lookup_residual() -> tuple[bool, str]:
    teacher = bimodal_1d()
    grid = edm_grid(32)
    states = euler_solve(teacher, grid, prior_noise(range(8), teacher.dim, grid.t_max)).states
    worst = max(
        float(np.max(lookup_residual(teacher, grid, states, i, LossConfig()))) for i in range(grid.n - 1)
    )
    return worst <= 1e-20, f"max residual {worst:.3e}"


@_check("euler-order")
def _euler_order() -> tuple[bool, str]:
    check = lemma_scaling_check(gaussian_teacher(1, sigma0=5.0), ORDER_GRID)
    return 0.9 <= check.fit.slope <= 1.1, f"slope {check.fit.slope:.3f}"


@_check("heun-order")
def _heun_order() -> tuple[bool, str]:
    check = heun_order_check(gaussian_teacher(1, sigma0=5.0), ORDER_GRID)
    return 1.8 <= check.fit.slope <= 2.2, f"slope {check.fit.slope:.3f}"


@_check("energy-distance")
def _energy_distance() -> tuple[bool, str]:
    rng = np.random.default_rng(4)
    a = rng.standard_normal((300, 2))
    b = rng.standard_normal((200, 2)) + 1.0
    self_gap = energy_distance(a, a[::-1])
    ab, ba = energy_distance(a, b), energy_distance(b, a)
    ok = self_gap == 0.0 and ab == ba and ab > 0.0
    return ok, f"ed(A, A)={self_gap:.1e}, ed(A, B)={ab:.4e}, ed(B, A)={ba:.4e}"


@_check("checkpoint-round-trip")
def _checkpoint_round_trip() -> tuple[bool, str]:
    params = init_params(_small_student(), np.random.default_rng(5))
    restored = params_from_json(json.loads(json.dumps(params_to_json(params))))
    ok = np.array_equal(params.flat(), restored.flat())
    return ok, "lossless" if ok else "floats changed"


def run_checks(names: set[str] | None = None) -> list[CheckResult]:
    results: list[CheckResult] = []
    for name, fn in _CHECKS:
        if names is not None and name not in names:
            continue
        try:
            ok, detail = fn()
        except Exception as exc:  # noqa: BLE001
            _LOG.exception("Verify: %s raised", name)
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        level = logging.INFO if ok else logging.ERROR
        _LOG.log(level, "Verify: %-22s %s  %s", name, "ok" if ok else "FAILED", detail)
        results.append(CheckResult(name=name, ok=ok, detail=detail))
    return results


def check_names() -> list[str]:
    return [name for name, _ in _CHECKS]
