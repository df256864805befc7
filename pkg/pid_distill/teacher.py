"""Analytic Gaussian-mixture teacher under the variance-exploding process x_t = x_0 + t * eps.

Every function accepts a single state of shape ``(dim,)`` or a batch of shape
``(..., dim)``; noise levels are a scalar or an array broadcastable to the batch
shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.special import logsumexp, softmax

from pid_distill.errors import ConfigError, DomainError, InputError


MAX_DIM = 64
MAX_JACOBIAN_DIM = 16
_WEIGHT_TOLERANCE = 1e-12


@dataclass(frozen=True)
class GaussianComponent:
    weight: float
    mean: tuple[float, ...]
    sigma0: float


@dataclass(frozen=True)
class TeacherSpec:
    dim: int
    components: tuple[GaussianComponent, ...]

    def __post_init__(self) -> None:
        if not isinstance(self.dim, int) or self.dim < 1 or self.dim > MAX_DIM:
            raise ConfigError(f"teacher.dim must be an integer in [1, {MAX_DIM}], got {self.dim!r}")
        if not self.components:
            raise ConfigError("teacher.components must not be empty")
        total = 0.0
        for idx, comp in enumerate(self.components):
            where = f"teacher.components[{idx}]"
            if not (comp.weight >= 0.0) or not math.isfinite(comp.weight):
                raise ConfigError(f"{where}.weight must be a probability, got {comp.weight!r}")
            if not (comp.sigma0 > 0.0) or not math.isfinite(comp.sigma0):
                raise ConfigError(f"{where}.sigma0 must be > 0, got {comp.sigma0!r}")
            if len(comp.mean) != self.dim:
                raise ConfigError(f"{where}.mean has length {len(comp.mean)}, expected {self.dim}")
            if not all(math.isfinite(v) for v in comp.mean):
                raise ConfigError(f"{where}.mean must be finite")
            total += comp.weight
        if abs(total - 1.0) > _WEIGHT_TOLERANCE:
            raise ConfigError(f"teacher.components weights sum to {total!r}, expected 1")

    @cached_property
    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.components], dtype=np.float64)

    @cached_property
    def means(self) -> np.ndarray:
        return np.array([c.mean for c in self.components], dtype=np.float64).reshape(-1, self.dim)

    @cached_property
    def sigma0_sq(self) -> np.ndarray:
        return np.array([c.sigma0 for c in self.components], dtype=np.float64) ** 2

    @property
    def is_single_gaussian(self) -> bool:
        return len(self.components) == 1


def gaussian_teacher(dim: int, *, mean: list[float] | None = None, sigma0: float = 1.0) -> TeacherSpec:
    center = tuple(float(v) for v in (mean if mean is not None else [0.0] * dim))
    return TeacherSpec(dim=dim, components=(GaussianComponent(weight=1.0, mean=center, sigma0=float(sigma0)),))


def ring_teacher(*, modes: int = 8, radius: float = 6.0, sigma0: float = 0.3) -> TeacherSpec:
    if modes < 1:
        raise ConfigError(f"teacher.modes must be >= 1, got {modes!r}")
    components = tuple(
        GaussianComponent(
            weight=1.0 / modes,
            mean=(radius * math.cos(2.0 * math.pi * k / modes), radius * math.sin(2.0 * math.pi * k / modes)),
            sigma0=float(sigma0),
        )
        for k in range(modes)
    )
    return TeacherSpec(dim=2, components=components)


def _as_states(teacher: TeacherSpec, x: np.ndarray) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0 or arr.shape[-1] != teacher.dim:
        raise InputError(f"state has shape {arr.shape}, expected (..., {teacher.dim})")
    return arr


def _as_times(t: float | np.ndarray, batch_shape: tuple[int, ...]) -> np.ndarray:
    arr = np.asarray(t, dtype=np.float64)
    try:
        return np.broadcast_to(arr, batch_shape)
    except ValueError as exc:
        raise InputError(f"noise level shape {arr.shape} does not match batch shape {batch_shape}") from exc


def _component_logits(teacher: TeacherSpec, x: np.ndarray, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    var = teacher.sigma0_sq + t[..., None] ** 2
    diff = x[..., None, :] - teacher.means
    sq = np.sum(diff * diff, axis=-1)
    with np.errstate(divide="ignore"):
        log_w = np.log(teacher.weights)
    logits = log_w - 0.5 * sq / var - 0.5 * teacher.dim * np.log(2.0 * math.pi * var)
    return logits, var


def log_density(teacher: TeacherSpec, x: np.ndarray, t: float | np.ndarray) -> np.ndarray:
    x = _as_states(teacher, x)
    t = _as_times(t, x.shape[:-1])
    if np.any(t < 0.0):
        raise DomainError("log_density requires t >= 0")
    logits, _ = _component_logits(teacher, x, t)
    return logsumexp(logits, axis=-1)


def score(teacher: TeacherSpec, x: np.ndarray, t: float | np.ndarray) -> np.ndarray:
    x = _as_states(teacher, x)
    t = _as_times(t, x.shape[:-1])
    if np.any(t <= 0.0):
        raise DomainError("score requires t > 0 (the score diverges at t = 0)")
    logits, var = _component_logits(teacher, x, t)
    gamma = softmax(logits, axis=-1)
    diff = teacher.means - x[..., None, :]
    return np.sum((gamma / var)[..., None] * diff, axis=-2)


def denoise(teacher: TeacherSpec, x: np.ndarray, t: float | np.ndarray) -> np.ndarray:
    """Posterior mean E[x_0 | x_t = x]; returns ``x`` unchanged wherever ``t == 0``."""
    x = _as_states(teacher, x)
    t = _as_times(t, x.shape[:-1])
    if np.any(t < 0.0):
        raise DomainError("denoise requires t >= 0")
    logits, var = _component_logits(teacher, x, t)
    gamma = softmax(logits, axis=-1)
    t_sq = (t**2)[..., None, None]
    blend = (teacher.sigma0_sq[:, None] * x[..., None, :] + t_sq * teacher.means) / var[..., None]
    mean = np.sum(gamma[..., None] * blend, axis=-2)
    return np.where((t == 0.0)[..., None], x, mean)


def denoiser_jacobian(teacher: TeacherSpec, x: np.ndarray, t: float | np.ndarray) -> np.ndarray:
    """Central-difference Jacobian dD/dx, shape ``(..., dim, dim)``; column j is dD/dx_j."""
    if teacher.dim > MAX_JACOBIAN_DIM:
        raise ConfigError(f"denoiser_jacobian supports dim <= {MAX_JACOBIAN_DIM}, teacher has dim {teacher.dim}")
    x = _as_states(teacher, x)
    t = _as_times(t, x.shape[:-1])
    h = 1e-4 * (1.0 + np.max(np.abs(x), axis=-1))
    jac = np.empty(x.shape + (teacher.dim,), dtype=np.float64)
    for j in range(teacher.dim):
        step = np.zeros_like(x)
        step[..., j] = h
        forward = denoise(teacher, x + step, t)
        backward = denoise(teacher, x - step, t)
        jac[..., :, j] = (forward - backward) / (2.0 * h[..., None])
    return jac


def sample_data(teacher: TeacherSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` samples from p_0 as an ``(n, dim)`` array."""
    if n < 0:
        raise InputError(f"sample count must be >= 0, got {n}")
    picks = rng.choice(len(teacher.components), size=n, p=teacher.weights)
    noise = rng.standard_normal((n, teacher.dim))
    return teacher.means[picks] + np.sqrt(teacher.sigma0_sq[picks])[:, None] * noise


def prior_noise(seeds: Sequence[int], dim: int, t_max: float) -> np.ndarray:
    """One z ~ N(0, t_max^2 I) per seed, each from its own stream, as a ``(len(seeds), dim)`` array."""
    if not seeds:
        raise InputError("at least one seed is required")
    return np.stack([np.random.default_rng(seed).standard_normal(dim) * t_max for seed in seeds])
