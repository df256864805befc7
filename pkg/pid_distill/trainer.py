from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from pid_distill.config import ResolvedConfig, config_from_dict
from pid_distill.errors import ConfigError, InputError, NumericalError
from pid_distill.optim import AdamState, optimizer_step
from pid_distill.persist import Checkpoint, load_checkpoint, save_checkpoint, write_csv, write_json
from pid_distill.pid_loss import pid_batch
from pid_distill.student import StudentConfig, StudentParams, ema_update, init_params, student_forward
from pid_distill.teacher import prior_noise
from pid_distill.time_grid import TimeGrid, sample_indices


_LOG = logging.getLogger(__name__)

EVAL_COLUMNS: tuple[str, ...] = ("energy_distance", "trajectory_sup_error")
LOG_COLUMNS: tuple[str, ...] = ("step", "loss", "grad_norm", "wall_ms", *EVAL_COLUMNS)

# EMA parameters -> metrics; must return every name in EVAL_COLUMNS.
EvaluateFn = Callable[[StudentParams], dict[str, float]]

# Settings that may differ between a checkpoint and the run resuming from it.
_RESUMABLE_KEYS: frozenset[str] = frozenset({"steps", "log_every", "ckpt_every", "eval_every"})


@dataclass(frozen=True)
class LogRecord:
    step: int
    loss: float
    grad_norm: float
    wall_ms: float
    # EMA metrics after this step's update; NaN when no evaluation was scheduled
    energy_distance: float = math.nan
    trajectory_sup_error: float = math.nan

    @property
    def evaluated(self) -> bool:
        return not math.isnan(self.energy_distance)


@dataclass
class RunLog:
    records: list[LogRecord] = field(default_factory=list)

    def append(self, record: LogRecord) -> None:
        if self.records and record.step <= self.records[-1].step:
            raise InputError(f"log steps must increase: {record.step} after {self.records[-1].step}")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def steps(self) -> np.ndarray:
        return np.array([r.step for r in self.records], dtype=np.int64)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records], dtype=np.float64)

    def without_timing(self) -> list[tuple[int, float, float]]:
        """Records with wall-clock time dropped, for determinism comparisons."""
        return [(r.step, r.loss, r.grad_norm) for r in self.records]

    def evaluations(self) -> list[tuple[int, float, float]]:
        return [(r.step, r.energy_distance, r.trajectory_sup_error) for r in self.records if r.evaluated]

    def curves(self) -> dict[str, list[float]]:
        evaluated = self.evaluations()
        return {
            "step": [float(step) for step, _, _ in evaluated],
            "energy_distance": [ed for _, ed, _ in evaluated],
            "trajectory_sup_error": [sup for _, _, sup in evaluated],
        }

    def write(self, path: str | Path) -> Path:
        rows = (
            [r.step, r.loss, r.grad_norm, r.wall_ms]
            + ([r.energy_distance, r.trajectory_sup_error] if r.evaluated else ["", ""])
            for r in self.records
        )
        return write_csv(path, LOG_COLUMNS, rows)


@dataclass(frozen=True, eq=False)
class TrainResult:
    final: StudentParams
    ema: StudentParams
    log: RunLog
    optimizer: AdamState
    step: int
    config: ResolvedConfig
    checkpoint: Path | None = None


def _z_pool(config: ResolvedConfig) -> np.ndarray | None:
    seeds = config.train.z_pool_seeds
    if not seeds:
        return None
    return prior_noise(seeds, config.teacher.dim, config.grid.t_max)


def _all_indices(grid: TimeGrid, interior: bool) -> np.ndarray:
    return np.arange(1 if interior else 0, grid.n - 1, dtype=np.int64)


def _draw_batch(
    config: ResolvedConfig,
    grid: TimeGrid,
    rng: np.random.Generator,
    pool: np.ndarray | None,
) -> tuple[np.ndarray, np.ndarray]:
    interior = config.loss.interior
    if pool is not None and config.train.index_sampling == "all":
        grid_idx = _all_indices(grid, interior)
        return np.repeat(grid_idx, pool.shape[0]), np.tile(pool, (grid_idx.size, 1))
    batch = config.train.batch
    indices = sample_indices(grid, rng, batch, interior=interior)
    if pool is not None:
        return indices, pool[rng.integers(0, pool.shape[0], size=batch)]
    return indices, rng.standard_normal((batch, config.teacher.dim)) * config.grid.t_max


def _check_resume(config: ResolvedConfig, saved: dict[str, Any]) -> None:
    current = config.to_dict()
    for section, values in current.items():
        other = saved.get(section)
        if section == "train" and isinstance(other, dict):
            values = {k: v for k, v in values.items() if k not in _RESUMABLE_KEYS}
            other = {k: v for k, v in other.items() if k not in _RESUMABLE_KEYS}
        if values != other:
            raise ConfigError(f"resume: checkpoint was written with a different '{section}' section")


def _checkpoint(
    config: ResolvedConfig,
    params: StudentParams,
    ema: StudentParams,
    step: int,
    opt: AdamState,
    rng_state: dict[str, Any],
) -> Checkpoint:
    return Checkpoint(
        config=config.to_dict(),
        params=params,
        ema_params=ema,
        step=step,
        optimizer=opt,
        rng_state=rng_state,
    )


def _scores(metrics: dict[str, float], step: int) -> dict[str, float]:
    missing = [name for name in EVAL_COLUMNS if name not in metrics]
    if missing:
        raise InputError(f"evaluation callback did not report {', '.join(missing)}")
    scores = {name: float(metrics[name]) for name in EVAL_COLUMNS}
    _LOG.info(
        "Train: step %d energy_distance=%.4e trajectory_sup_error=%.3e",
        step,
        scores["energy_distance"],
        scores["trajectory_sup_error"],
    )
    return scores


def train(
    config: ResolvedConfig,
    *,
    out_dir: str | Path | None = None,
    resume: str | Path | Checkpoint | None = None,
    evaluate: EvaluateFn | None = None,
) -> TrainResult:
    """Run PID training; with ``out_dir`` also write checkpoints, log.csv and the resolved config.

    With ``train.eval_every > 0`` and an ``evaluate`` callback the EMA student is
    scored every ``eval_every`` completed steps and after the last one.
    """
    student_cfg = config.student_config()
    grid = config.grid.build()
    settings = config.train
    rng = np.random.default_rng(settings.seed)
    out = Path(out_dir) if out_dir is not None else None

    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        _check_resume(config, ckpt.config)
        ckpt.params.check(student_cfg)
        ckpt.ema_params.check(student_cfg)
        params, ema, opt, start = ckpt.params, ckpt.ema_params, ckpt.optimizer, ckpt.step
        rng.bit_generator.state = ckpt.rng_state
        _LOG.info("Train: resuming from step %d", start)
    else:
        params = init_params(student_cfg, rng, scheme=config.student.init)
        ema, opt, start = params, AdamState.zeros(params.size), 0
    if start > settings.steps:
        raise ConfigError(f"train.steps={settings.steps} is behind the checkpoint step {start}")

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "config.resolved.json", config.to_dict())
        write_json(out / "config.provenance.json", dict(sorted(config.provenance.items())))

    pool = _z_pool(config)
    log = RunLog()
    flat = params.flat()
    _LOG.info(
        "Train: %d step(s) from %d, batch=%d, N=%d, mode=%s, metric=%s, %d parameters",
        settings.steps - start,
        start,
        settings.batch,
        grid.n,
        config.loss.diff_mode,
        config.loss.metric,
        params.size,
    )

    last_ckpt: Path | None = None
    for step in range(start, settings.steps):
        began = time.perf_counter()
        rng_state = rng.bit_generator.state
        indices, z = _draw_batch(config, grid, rng, pool)
        try:
            result = pid_batch(params, student_cfg, config.teacher, grid, indices, z, config.loss)
            grad_norm = float(np.linalg.norm(result.grad))
            if not np.isfinite(grad_norm):
                raise NumericalError("non-finite gradient")
        except NumericalError as exc:
            if out is not None:
                # rng state from before this step's draw, so a resume replays the failing batch
                last_ckpt = save_checkpoint(
                    out / f"ckpt_{step}.json", _checkpoint(config, params, ema, step, opt, rng_state)
                )
                log.write(out / "log.csv")
                _LOG.error("Train: aborting, last good checkpoint %s", last_ckpt)
            raise NumericalError(f"Train: {exc}", step=step) from exc

        opt, flat = optimizer_step(opt, flat, result.grad, settings.lr, settings.optimizer)
        params = params.unflatten(flat)
        ema = ema_update(ema, params, settings.ema_decay)
        wall_ms = (time.perf_counter() - began) * 1e3

        done = step + 1
        scores: dict[str, float] = {}
        due = settings.eval_every and (done % settings.eval_every == 0 or done == settings.steps)
        if evaluate is not None and due:
            scores = _scores(evaluate(ema), step)
        if scores or step % settings.log_every == 0 or step == settings.steps - 1:
            log.append(LogRecord(step=step, loss=result.loss, grad_norm=grad_norm, wall_ms=wall_ms, **scores))
            _LOG.info("Train: step %d loss=%.3e grad_norm=%.3e", step, result.loss, grad_norm)
        if out is not None and settings.ckpt_every and done % settings.ckpt_every == 0 and done < settings.steps:
            ckpt = _checkpoint(config, params, ema, done, opt, rng.bit_generator.state)
            save_checkpoint(out / f"ckpt_{done}.json", ckpt)

    if out is not None:
        ckpt = _checkpoint(config, params, ema, settings.steps, opt, rng.bit_generator.state)
        last_ckpt = save_checkpoint(out / f"ckpt_{settings.steps}.json", ckpt)
        log.write(out / "log.csv")
        _LOG.info("Train: wrote %s", last_ckpt)
    return TrainResult(
        final=params, ema=ema, log=log, optimizer=opt, step=settings.steps, config=config, checkpoint=last_ckpt
    )


def load_student(path: str | Path) -> tuple[ResolvedConfig, Checkpoint]:
    ckpt = load_checkpoint(path)
    config = config_from_dict(ckpt.config)
    student_cfg = config.student_config()
    ckpt.params.check(student_cfg)
    ckpt.ema_params.check(student_cfg)
    return config, ckpt


def single_step_sample(ema: StudentParams, cfg: StudentConfig, grid: TimeGrid, z: np.ndarray) -> np.ndarray:
    """One network evaluation x_theta(z, t_min)."""
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise InputError("z must be finite")
    return student_forward(ema, cfg, z, float(grid.times[-1]))
