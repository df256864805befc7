from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from pid_distill.errors import ConfigError
from pid_distill.optim import OptimizerConfig
from pid_distill.persist import read_json
from pid_distill.pid_loss import LossConfig, check_compatible
from pid_distill.student import INIT_SCHEMES, StudentConfig
from pid_distill.teacher import MAX_JACOBIAN_DIM, GaussianComponent, TeacherSpec, gaussian_teacher, ring_teacher
from pid_distill.time_grid import RHO, T_MAX, T_MIN, TimeGrid, make_grid


_ENV_PREFIXES: tuple[str, ...] = ("PID_",)


def _env(name: str, *, default: str | None = None) -> str | None:
    for prefix in _ENV_PREFIXES:
        value = os.getenv(f"{prefix}{name}")
        if value is None:
            continue
        value = value.strip()
        return value or default
    return default


def _env_int(name: str, *, default: int) -> int:
    raw = _env(name)
    if raw is None:
        return default
    try:
        return int(raw)
    except (TypeError, ValueError):
        return default


def worker_threads() -> int:
    return max(1, _env_int("THREADS", default=os.cpu_count() or 1))


def log_level() -> str:
    return (_env("LOG_LEVEL", default="INFO") or "INFO").upper()


@dataclass(frozen=True)
class GridConfig:
    n: int = 128
    rho: float = RHO
    t_min: float = T_MIN
    t_max: float = T_MAX
    kind: str = "edm"

    def __post_init__(self) -> None:
        if self.n < 2:
            raise ConfigError(f"grid.n must be >= 2, got {self.n!r}")
        if self.kind not in ("edm", "uniform"):
            raise ConfigError(f"grid.kind must be 'edm' or 'uniform', got {self.kind!r}")
        self.build()

    def build(self) -> TimeGrid:
        return make_grid(self.kind, self.n, t_min=self.t_min, t_max=self.t_max, rho=self.rho)


@dataclass(frozen=True)
class StudentSection:
    hidden_dims: tuple[int, ...] = (64, 64)
    activation: str = "silu"
    sigma_data: float = 0.5
    time_embedding: str = "scalar"
    embedding_frequencies: int = 4
    init: str = "he"

    def __post_init__(self) -> None:
        if self.init not in INIT_SCHEMES:
            raise ConfigError(f"student.init must be one of {INIT_SCHEMES}, got {self.init!r}")


@dataclass(frozen=True)
class TrainSection:
    steps: int = 20000
    batch: int = 256
    lr: float = 1e-3
    optimizer: OptimizerConfig = OptimizerConfig()
    ema_decay: float = 0.999
    seed: int = 0
    log_every: int = 100
    ckpt_every: int = 0
    eval_every: int = 0
    z_pool_seeds: tuple[int, ...] = ()
    index_sampling: str = "random"

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ConfigError(f"train.steps must be >= 1, got {self.steps!r}")
        if self.batch < 1:
            raise ConfigError(f"train.batch must be >= 1, got {self.batch!r}")
        if not self.lr >= 0.0:
            raise ConfigError(f"train.lr must be >= 0, got {self.lr!r}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError(f"train.ema_decay must be in [0, 1), got {self.ema_decay!r}")
        if self.log_every < 1:
            raise ConfigError(f"train.log_every must be >= 1, got {self.log_every!r}")
        if self.ckpt_every < 0:
            raise ConfigError(f"train.ckpt_every must be >= 0, got {self.ckpt_every!r}")
        if self.eval_every < 0:
            raise ConfigError(f"train.eval_every must be >= 0, got {self.eval_every!r}")
        if self.index_sampling not in ("random", "all"):
            raise ConfigError(f"train.index_sampling must be 'random' or 'all', got {self.index_sampling!r}")
        if self.index_sampling == "all" and not self.z_pool_seeds:
            raise ConfigError("train.index_sampling 'all' requires train.z_pool_seeds")


@dataclass(frozen=True)
class EvalConfig:
    n_samples: int = 4096
    reference_n: int = 0
    trajectory_seeds: int = 8
    sample_seed: int = 12345

    def __post_init__(self) -> None:
        if self.n_samples < 1:
            raise ConfigError(f"eval.n_samples must be >= 1, got {self.n_samples!r}")
        if self.reference_n != 0 and self.reference_n < 2:
            raise ConfigError(f"eval.reference_n must be 0 (auto) or >= 2, got {self.reference_n!r}")
        if self.trajectory_seeds < 1:
            raise ConfigError(f"eval.trajectory_seeds must be >= 1, got {self.trajectory_seeds!r}")

    def reference_points(self, grid_n: int) -> int:
        return self.reference_n or max(256, 10 * grid_n)


@dataclass(frozen=True)
class ResolvedConfig:
    teacher: TeacherSpec = field(default_factory=ring_teacher)
    grid: GridConfig = GridConfig()
    student: StudentSection = StudentSection()
    loss: LossConfig = LossConfig()
    train: TrainSection = TrainSection()
    eval: EvalConfig = EvalConfig()
    provenance: Mapping[str, str] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if self.loss.diff_mode == "central3" and self.grid.n < 3:
            raise ConfigError("grid.n must be >= 3 for loss.diff_mode 'central3'")
        if not self.loss.stop_grad and self.teacher.dim > MAX_JACOBIAN_DIM:
            raise ConfigError(f"loss.stop_grad=false needs teacher.dim <= {MAX_JACOBIAN_DIM}")
        check_compatible(self.loss, self.student_config())

    def student_config(self) -> StudentConfig:
        return StudentConfig(
            input_dim=self.teacher.dim,
            hidden_dims=self.student.hidden_dims,
            activation=self.student.activation,
            t_max=self.grid.t_max,
            sigma_data=self.student.sigma_data,
            time_embedding=self.student.time_embedding,
            embedding_frequencies=self.student.embedding_frequencies,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "teacher": teacher_to_dict(self.teacher),
            "grid": dataclasses.asdict(self.grid),
            "student": _plain(dataclasses.asdict(self.student)),
            "loss": dataclasses.asdict(self.loss),
            "train": _plain(dataclasses.asdict(self.train)),
            "eval": dataclasses.asdict(self.eval),
        }

    def with_overrides(self, overrides: Mapping[str, Any]) -> ResolvedConfig:
        """Re-resolve with dotted-path overrides, e.g. ``{"grid.n": 64}``."""
        raw = self.to_dict()
        for dotted, value in overrides.items():
            node = raw
            *parents, leaf = dotted.split(".")
            for key in parents:
                node = node.setdefault(key, {})
            node[leaf] = list(value) if isinstance(value, tuple) else value
        resolved = config_from_dict(raw)
        provenance = {**self.provenance, **{key: "user" for key in overrides}} if self.provenance else {}
        return dataclasses.replace(resolved, provenance=provenance)


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def teacher_to_dict(teacher: TeacherSpec) -> dict[str, Any]:
    return {
        "type": "gmm",
        "dim": teacher.dim,
        "components": [
            {"weight": c.weight, "mean": list(c.mean), "sigma0": c.sigma0} for c in teacher.components
        ],
    }


def _expect_keys(raw: Mapping[str, Any], path: str, allowed: set[str]) -> None:
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown key '{path}.{unknown[0]}'" if path else f"unknown key '{unknown[0]}'")


def _number(value: Any, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path} must be a number, got {value!r}")
    out = float(value)
    if not math.isfinite(out):
        raise ConfigError(f"{path} must be finite, got {value!r}")
    return out


def _integer(value: Any, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path} must be an integer, got {value!r}")
    return value


def _coerce(default: Any, value: Any, path: str, provenance: dict[str, str]) -> Any:
    if dataclasses.is_dataclass(default):
        if not isinstance(value, Mapping):
            raise ConfigError(f"{path} must be an object")
        return _build_section(type(default), value, path, provenance)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be true or false, got {value!r}")
        return value
    if isinstance(default, int):
        return _integer(value, path)
    if isinstance(default, float):
        return _number(value, path)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{path} must be a list of integers, got {value!r}")
        return tuple(_integer(v, f"{path}[{i}]") for i, v in enumerate(value))
    raise ConfigError(f"{path}: unsupported setting")


def _build_section(cls: type, raw: Mapping[str, Any], path: str, provenance: dict[str, str]) -> Any:
    names = {f.name for f in dataclasses.fields(cls)}
    _expect_keys(raw, path, names)
    template = cls()
    kwargs: dict[str, Any] = {}
    for name in sorted(names):
        default = getattr(template, name)
        key = f"{path}.{name}"
        if name in raw:
            kwargs[name] = _coerce(default, raw[name], key, provenance)
            provenance.setdefault(key, "user")
        else:
            _mark_default(default, key, provenance)
    return cls(**kwargs)


def _mark_default(default: Any, key: str, provenance: dict[str, str]) -> None:
    if dataclasses.is_dataclass(default):
        for f in dataclasses.fields(default):
            _mark_default(getattr(default, f.name), f"{key}.{f.name}", provenance)
        return
    provenance[key] = "default"


def _teacher_from_dict(raw: Any, provenance: dict[str, str]) -> TeacherSpec:
    if not isinstance(raw, Mapping):
        raise ConfigError("teacher must be an object")
    kind = raw.get("type", "gmm")
    provenance["teacher"] = "user"
    if kind == "gmm":
        _expect_keys(raw, "teacher", {"type", "dim", "components"})
        if "dim" not in raw or "components" not in raw:
            raise ConfigError("teacher of type 'gmm' needs 'dim' and 'components'")
        dim = _integer(raw["dim"], "teacher.dim")
        comps_raw = raw["components"]
        if not isinstance(comps_raw, list):
            raise ConfigError("teacher.components must be a list")
        components: list[GaussianComponent] = []
        for idx, comp in enumerate(comps_raw):
            where = f"teacher.components[{idx}]"
            if not isinstance(comp, Mapping):
                raise ConfigError(f"{where} must be an object")
            _expect_keys(comp, where, {"weight", "mean", "sigma0"})
            mean = comp.get("mean")
            if not isinstance(mean, list):
                raise ConfigError(f"{where}.mean must be a list of numbers")
            components.append(
                GaussianComponent(
                    weight=_number(comp.get("weight"), f"{where}.weight"),
                    mean=tuple(_number(v, f"{where}.mean[{j}]") for j, v in enumerate(mean)),
                    sigma0=_number(comp.get("sigma0"), f"{where}.sigma0"),
                )
            )
        return TeacherSpec(dim=dim, components=tuple(components))
    if kind == "ring":
        _expect_keys(raw, "teacher", {"type", "modes", "radius", "sigma0"})
        return ring_teacher(
            modes=_integer(raw.get("modes", 8), "teacher.modes"),
            radius=_number(raw.get("radius", 6.0), "teacher.radius"),
            sigma0=_number(raw.get("sigma0", 0.3), "teacher.sigma0"),
        )
    if kind == "gaussian":
        _expect_keys(raw, "teacher", {"type", "dim", "mean", "sigma0"})
        dim = _integer(raw.get("dim", 1), "teacher.dim")
        mean = raw.get("mean")
        if mean is not None and not isinstance(mean, list):
            raise ConfigError("teacher.mean must be a list of numbers or null")
        return gaussian_teacher(
            dim,
            mean=None if mean is None else [_number(v, f"teacher.mean[{j}]") for j, v in enumerate(mean)],
            sigma0=_number(raw.get("sigma0", 1.0), "teacher.sigma0"),
        )
    raise ConfigError(f"teacher.type must be 'gmm', 'ring' or 'gaussian', got {kind!r}")


_SECTIONS: dict[str, type] = {
    "grid": GridConfig,
    "student": StudentSection,
    "loss": LossConfig,
    "train": TrainSection,
    "eval": EvalConfig,
}


def config_from_dict(raw: Mapping[str, Any]) -> ResolvedConfig:
    if not isinstance(raw, Mapping):
        raise ConfigError("config must be a JSON object")
    _expect_keys(raw, "", {"teacher", *_SECTIONS})
    provenance: dict[str, str] = {}
    if "teacher" in raw:
        teacher = _teacher_from_dict(raw["teacher"], provenance)
    else:
        teacher = ring_teacher()
        provenance["teacher"] = "default"
    sections: dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        section_raw = raw.get(name, {})
        if not isinstance(section_raw, Mapping):
            raise ConfigError(f"{name} must be an object")
        sections[name] = _build_section(cls, section_raw, name, provenance)
    return ResolvedConfig(teacher=teacher, provenance=provenance, **sections)


def load_config(path: str | Path) -> ResolvedConfig:
    return config_from_dict(read_json(path))
