from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from pid_distill.errors import ConfigError, InputError


OPTIMIZERS: tuple[str, ...] = ("adam", "radam")


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self) -> None:
        if self.name not in OPTIMIZERS:
            raise ConfigError(f"train.optimizer.name must be one of {OPTIMIZERS}, got {self.name!r}")
        for field, value in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not 0.0 <= value < 1.0:
                raise ConfigError(f"train.optimizer.{field} must be in [0, 1), got {value!r}")
        if not self.eps > 0.0:
            raise ConfigError(f"train.optimizer.eps must be > 0, got {self.eps!r}")
        if self.weight_decay < 0.0:
            raise ConfigError(f"train.optimizer.weight_decay must be >= 0, got {self.weight_decay!r}")


@dataclass(frozen=True, eq=False)
class AdamState:
    step: int
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, size: int) -> AdamState:
        return cls(step=0, m=np.zeros(size), v=np.zeros(size))


def _radam_rectifier(step: int, beta2: float) -> float | None:
    """Variance rectification term; None while the approximated SMA length is too short."""
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    beta2_t = beta2**step
    rho_t = rho_inf - 2.0 * step * beta2_t / (1.0 - beta2_t)
    if rho_t <= 5.0:
        return None
    return math.sqrt((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))


def optimizer_step(
    state: AdamState,
    params: np.ndarray,
    grad: np.ndarray,
    lr: float,
    cfg: OptimizerConfig = OptimizerConfig(),
) -> tuple[AdamState, np.ndarray]:
    if params.shape != grad.shape or state.m.shape != params.shape:
        raise InputError(f"optimizer shapes differ: params {params.shape}, grad {grad.shape}, state {state.m.shape}")
    if cfg.weight_decay:
        grad = grad + cfg.weight_decay * params
    step = state.step + 1
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad * grad
    m_hat = m / (1.0 - cfg.beta1**step)
    if cfg.name == "radam":
        rect = _radam_rectifier(step, cfg.beta2)
        if rect is None:
            return AdamState(step=step, m=m, v=v), params - lr * m_hat
        v_hat = np.sqrt(v / (1.0 - cfg.beta2**step))
        return AdamState(step=step, m=m, v=v), params - lr * rect * m_hat / (v_hat + cfg.eps)
    v_hat = np.sqrt(v / (1.0 - cfg.beta2**step))
    return AdamState(step=step, m=m, v=v), params - lr * m_hat / (v_hat + cfg.eps)
