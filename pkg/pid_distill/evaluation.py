"""Trajectory fidelity, sample quality, solver-order fits and the sweep/ablation harnesses.

Sample quality is measured with the energy distance between single-step student
samples and teacher Heun samples; thresholds are read against the noise floor
of two independent teacher sample sets.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from pid_distill.config import ResolvedConfig, worker_threads
from pid_distill.errors import ConfigError, InputError
from pid_distill.persist import write_csv, write_json
from pid_distill.pid_loss import DIFF_MODES, FORMS, METRICS
from pid_distill.solvers import SOLVERS, closed_form_trajectory, solve_endpoint
from pid_distill.student import StudentConfig, StudentParams, student_forward
from pid_distill.teacher import TeacherSpec, prior_noise
from pid_distill.time_grid import T_MAX, T_MIN, TimeGrid, edm_grid, uniform_grid
from pid_distill.trainer import EvaluateFn, TrainResult, single_step_sample, train


_LOG = logging.getLogger(__name__)

_PAIR_CHUNK = 1024

# (grid, z[B, d]) -> states[n, B, d]
TrajectorySource = Callable[[TimeGrid, np.ndarray], np.ndarray]


def student_source(params: StudentParams, cfg: StudentConfig) -> TrajectorySource:
    def states(grid: TimeGrid, z: np.ndarray) -> np.ndarray:
        return np.stack([student_forward(params, cfg, z, float(t)) for t in grid.times])

    return states


def solver_source(teacher: TeacherSpec, solver: str = "euler") -> TrajectorySource:
    if solver not in SOLVERS:
        raise InputError(f"unknown solver {solver!r}, expected one of {tuple(SOLVERS)}")
    solve = SOLVERS[solver]

    def states(grid: TimeGrid, z: np.ndarray) -> np.ndarray:
        return solve(teacher, grid, z).states

    return states


def lookup_source(table: np.ndarray) -> TrajectorySource:
    """A stored trajectory table ``(n, B, d)`` served as if it were a student."""
    table = np.asarray(table, dtype=np.float64)

    def states(grid: TimeGrid, z: np.ndarray) -> np.ndarray:
        if table.shape[:2] != (grid.n, z.shape[0]):
            raise InputError(f"lookup table has shape {table.shape}, expected ({grid.n}, {z.shape[0]}, ...)")
        return table

    return states


@dataclass(frozen=True, eq=False)
class TrajectoryError:
    times: np.ndarray
    mean: np.ndarray  # per grid time, over seeds
    max: np.ndarray
    sup: float

    def curves(self) -> dict[str, list[float]]:
        return {"t": self.times.tolist(), "mean_error": self.mean.tolist(), "max_error": self.max.tolist()}


def trajectory_error(
    source: TrajectorySource,
    teacher: TeacherSpec,
    grid: TimeGrid,
    seeds: Sequence[int],
    *,
    reference: str = "euler",
) -> TrajectoryError:
    """Max-abs deviation of ``source`` from a solver trajectory at every grid time, per seed."""
    z = prior_noise(seeds, teacher.dim, grid.t_max)
    ref = solver_source(teacher, reference)(grid, z)
    got = np.asarray(source(grid, z), dtype=np.float64)
    if got.shape != ref.shape:
        raise InputError(f"trajectory source returned shape {got.shape}, expected {ref.shape}")
    err = np.max(np.abs(got - ref), axis=-1)
    return TrajectoryError(times=grid.times, mean=err.mean(axis=1), max=err.max(axis=1), sup=float(err.max()))


def _mean_pair_distance(a: np.ndarray, b: np.ndarray) -> float:
    total = 0.0
    for start in range(0, a.shape[0], _PAIR_CHUNK):
        total += float(cdist(a[start : start + _PAIR_CHUNK], b).sum())
    return total / (a.shape[0] * b.shape[0])


def _sorted_rows(points: np.ndarray) -> np.ndarray:
    return points[np.lexsort(points.T[::-1])]


def energy_distance(a: np.ndarray, b: np.ndarray) -> float:
    """2 E|a - b| - E|a - a'| - E|b - b'| over all pairs (V-statistic), clamped at 0."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0 or a.size == 0 or b.size == 0:
        raise InputError("energy distance needs two non-empty sample sets")
    if a.shape[1] != b.shape[1]:
        raise InputError(f"sample sets differ in dimension: {a.shape[1]} vs {b.shape[1]}")
    # sorted rows make the value independent of sample order
    a, b = _sorted_rows(a), _sorted_rows(b)
    cross = _mean_pair_distance(a, b) + _mean_pair_distance(b, a)
    within = _mean_pair_distance(a, a) + _mean_pair_distance(b, b)
    return max(0.0, cross - within)


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    residual: float  # RMS of log-space residuals
    points: int


def fit_slope(x: Sequence[float] | np.ndarray, y: Sequence[float] | np.ndarray) -> SlopeFit:
    """Least-squares slope of log(y) against log(x)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InputError("slope fit needs two 1-D sequences of equal length")
    if x.size < 3:
        raise InputError(f"slope fit needs at least 3 points, got {x.size}")
    if np.any(x <= 0.0) or np.any(y <= 0.0) or not np.all(np.isfinite(y)):
        raise InputError("slope fit needs positive finite values")
    lx, ly = np.log(x), np.log(y)
    slope, intercept = np.polyfit(lx, ly, 1)
    residual = float(np.sqrt(np.mean((ly - (slope * lx + intercept)) ** 2)))
    return SlopeFit(slope=float(slope), intercept=float(intercept), residual=residual, points=int(x.size))


@dataclass(frozen=True)
class ScalingRow:
    n: int
    max_step: float
    sup_error: float


@dataclass(frozen=True, eq=False)
class OrderCheck:
    solver: str
    rows: tuple[ScalingRow, ...]
    fit: SlopeFit


def solver_order_check(
    teacher: TeacherSpec,
    n_values: Sequence[int],
    *,
    solver: str,
    seeds: Sequence[int] = tuple(range(8)),
    t_min: float = T_MIN,
    t_max: float = T_MAX,
) -> OrderCheck:
    """Sup error of a solver trajectory against the closed form on uniform grids, with a log-log fit."""
    if not teacher.is_single_gaussian:
        raise InputError("order checks need a single-Gaussian teacher")
    if len(n_values) < 3:
        raise InputError(f"slope fit needs at least 3 points, got {len(n_values)}")
    z = prior_noise(seeds, teacher.dim, t_max)
    rows: list[ScalingRow] = []
    for n in n_values:
        grid = uniform_grid(int(n), t_min=t_min, t_max=t_max)
        states = solver_source(teacher, solver)(grid, z)
        exact = closed_form_trajectory(teacher, grid, z).states
        rows.append(ScalingRow(n=int(n), max_step=grid.max_step, sup_error=float(np.max(np.abs(states - exact)))))
        _LOG.debug("Order: %s N=%d sup_error=%.3e", solver, n, rows[-1].sup_error)
    fit = fit_slope([r.max_step for r in rows], [r.sup_error for r in rows])
    _LOG.info("Order: %s slope=%.3f (residual %.2e)", solver, fit.slope, fit.residual)
    return OrderCheck(solver=solver, rows=tuple(rows), fit=fit)


def lemma_scaling_check(teacher: TeacherSpec, n_values: Sequence[int], **kwargs: Any) -> OrderCheck:
    """Error of the zero-residual student, which is the Euler lookup table, shrinks like O(dt)."""
    return solver_order_check(teacher, n_values, solver="euler", **kwargs)


def heun_order_check(teacher: TeacherSpec, n_values: Sequence[int], **kwargs: Any) -> OrderCheck:
    return solver_order_check(teacher, n_values, solver="heun", **kwargs)


def reference_grid(config: ResolvedConfig) -> TimeGrid:
    g = config.grid
    return edm_grid(config.eval.reference_points(g.n), t_min=g.t_min, t_max=g.t_max, rho=g.rho)


def teacher_reference_samples(teacher: TeacherSpec, n: int, seed: int, grid: TimeGrid) -> np.ndarray:
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, teacher.dim)) * grid.t_max
    return solve_endpoint(teacher, grid, z, "heun")


def teacher_noise_floor(
    teacher: TeacherSpec,
    n: int,
    grid: TimeGrid,
    seeds: tuple[int, int] = (1, 2),
    *,
    first: np.ndarray | None = None,
) -> float:
    """Energy distance between two independent teacher sample sets; ``first`` reuses the ``seeds[0]`` set."""
    if first is None:
        first = teacher_reference_samples(teacher, n, seeds[0], grid)
    second = teacher_reference_samples(teacher, n, seeds[1], grid)
    return energy_distance(first, second)


def _reference_and_floor(config: ResolvedConfig) -> tuple[np.ndarray, float]:
    settings = config.eval
    grid = reference_grid(config)
    seeds = (settings.sample_seed + 1, settings.sample_seed + 2)
    reference = teacher_reference_samples(config.teacher, settings.n_samples, seeds[0], grid)
    return reference, teacher_noise_floor(config.teacher, settings.n_samples, grid, seeds, first=reference)


def student_samples(ema: StudentParams, cfg: StudentConfig, grid: TimeGrid, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, cfg.input_dim)) * grid.t_max
    return single_step_sample(ema, cfg, grid, z)


@dataclass
class EvalReport:
    name: str
    rows: list[dict[str, Any]] = field(default_factory=list)
    fits: dict[str, SlopeFit] = field(default_factory=dict)
    curves: dict[str, dict[str, list[float]]] = field(default_factory=dict)

    @property
    def columns(self) -> list[str]:
        out: list[str] = []
        for row in self.rows:
            out.extend(key for key in row if key not in out)
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "rows": self.rows,
            "fits": {key: asdict(fit) for key, fit in self.fits.items()},
            "curves": self.curves,
        }

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        out = Path(out_dir)
        csv_path = write_csv(out / f"{self.name}.csv", self.columns, self.rows)
        json_path = write_json(out / f"{self.name}.json", self.to_dict())
        _LOG.info("Report: wrote %s and %s", csv_path, json_path)
        return csv_path, json_path


def _finite(metrics: dict[str, Any]) -> dict[str, Any]:
    bad = [key for key, value in metrics.items() if isinstance(value, float) and not math.isfinite(value)]
    if bad:
        raise InputError(f"non-finite metric(s): {', '.join(bad)}")
    return metrics


def assess(
    config: ResolvedConfig,
    ema: StudentParams,
    *,
    reference: np.ndarray | None = None,
) -> tuple[dict[str, float], TrajectoryError]:
    """Energy distance against teacher samples and trajectory error against Euler on the training grid."""
    student_cfg = config.student_config()
    grid = config.grid.build()
    settings = config.eval
    samples = student_samples(ema, student_cfg, grid, settings.n_samples, settings.sample_seed)
    if reference is None:
        reference = teacher_reference_samples(
            config.teacher, settings.n_samples, settings.sample_seed + 1, reference_grid(config)
        )
    seeds = config.train.z_pool_seeds or tuple(range(settings.trajectory_seeds))
    traj = trajectory_error(student_source(ema, student_cfg), config.teacher, grid, seeds)
    metrics = {
        "energy_distance": energy_distance(samples, reference),
        "trajectory_sup_error": traj.sup,
        "trajectory_mean_error": float(np.mean(traj.mean)),
    }
    return _finite(metrics), traj


def assessor(config: ResolvedConfig, reference: np.ndarray | None = None) -> EvaluateFn:
    """Training callback scoring the EMA student with :func:`assess`."""
    if reference is None:
        reference = teacher_reference_samples(
            config.teacher, config.eval.n_samples, config.eval.sample_seed + 1, reference_grid(config)
        )

    def evaluate(ema: StudentParams) -> dict[str, float]:
        metrics, _ = assess(config, ema, reference=reference)
        return metrics

    return evaluate


def evaluate_checkpoint(config: ResolvedConfig, ema: StudentParams, *, step: int | None = None) -> EvalReport:
    reference, floor = _reference_and_floor(config)
    metrics, traj = assess(config, ema, reference=reference)
    row: dict[str, Any] = {"step": step if step is not None else "", "n": config.grid.n, **metrics}
    row["noise_floor"] = floor
    row["ratio_to_floor"] = metrics["energy_distance"] / floor if floor > 0.0 else ""
    _LOG.info(
        "Eval: energy_distance=%.4e noise_floor=%.4e trajectory_sup_error=%.3e",
        metrics["energy_distance"],
        floor,
        metrics["trajectory_sup_error"],
    )
    return EvalReport(name="eval", rows=[row], curves={"trajectory": traj.curves()})


def _final_loss(result: TrainResult) -> float:
    return float(result.log.losses[-1]) if len(result.log) else float("nan")


def _run_arms(
    task: str,
    labels: Sequence[str],
    run: Callable[[str], dict[str, Any]],
    workers: int | None,
) -> list[dict[str, Any]]:
    """Run independent arms; a failing arm is logged and reported, the rest carry on."""

    def guarded(label: str) -> dict[str, Any]:
        try:
            return {**run(label), "error": ""}
        except Exception as exc:  # noqa: BLE001
            _LOG.exception("%s: arm %s failed", task, label)
            return {"error": f"{type(exc).__name__}: {exc}"}

    max_workers = max(1, min(workers or worker_threads(), len(labels)))
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(guarded, labels))


def sweep_discretization(
    base: ResolvedConfig,
    n_values: Sequence[int],
    *,
    out_dir: str | Path | None = None,
    workers: int | None = None,
) -> EvalReport:
    """Train one student per grid size with identical seeds and budgets."""
    if not n_values:
        raise InputError("sweep needs at least one grid size")
    if list(n_values) != sorted(n_values):
        raise InputError(f"grid sizes must be ascending, got {list(n_values)}")
    reference, floor = _reference_and_floor(base)
    out = Path(out_dir) if out_dir is not None else None
    labels = [f"{pos}:{n}" for pos, n in enumerate(n_values)]
    curves: dict[str, dict[str, list[float]]] = {}

    def run(label: str) -> dict[str, Any]:
        pos, n = (int(part) for part in label.split(":"))
        config = base.with_overrides({"grid.n": n})
        run_dir = out / f"n{n}_{pos}" if out is not None else None
        result = train(config, out_dir=run_dir, evaluate=assessor(config, reference))
        if result.log.evaluations():
            curves[f"n{n}_{pos}"] = result.log.curves()
        metrics, _ = assess(config, result.ema, reference=reference)
        _LOG.info("Sweep: N=%d energy_distance=%.4e", n, metrics["energy_distance"])
        return {"max_step": config.grid.build().max_step, "final_loss": _final_loss(result), **metrics}

    results = _run_arms("Sweep", labels, run, workers)
    return EvalReport(
        name="sweep_n",
        rows=[{"n": int(n), "noise_floor": floor, **result} for n, result in zip(n_values, results)],
        curves={key: curves[key] for key in (f"n{n}_{pos}" for pos, n in enumerate(n_values)) if key in curves},
    )


@dataclass(frozen=True)
class Arm:
    label: str
    overrides: dict[str, Any]


def parse_arm(token: str) -> Arm:
    """``mode[:flag...]`` where flags are ``nosg``, ``sg``, a metric name, a residual form or ``h=64x64``."""
    parts = [part.strip() for part in token.split(":") if part.strip()]
    if not parts or parts[0] not in DIFF_MODES:
        raise ConfigError(f"arm {token!r} must start with a diff mode {DIFF_MODES}")
    overrides: dict[str, Any] = {"loss.diff_mode": parts[0]}
    for flag in parts[1:]:
        if flag in ("nosg", "sg"):
            overrides["loss.stop_grad"] = flag == "sg"
        elif flag in METRICS:
            overrides["loss.metric"] = flag
        elif flag in FORMS:
            overrides["loss.form"] = flag
        elif flag.startswith("h="):
            try:
                overrides["student.hidden_dims"] = tuple(int(w) for w in flag[2:].split("x"))
            except ValueError as exc:
                raise ConfigError(f"arm {token!r}: bad hidden widths {flag!r}") from exc
        else:
            raise ConfigError(f"arm {token!r}: unknown flag {flag!r}")
    return Arm(label=token, overrides=overrides)


def ablation_compare(
    base: ResolvedConfig,
    arms: Sequence[Arm],
    *,
    out_dir: str | Path | None = None,
    workers: int | None = None,
) -> EvalReport:
    """Train each arm with the base seed and budget; report loss, energy distance and trajectory error."""
    if not arms:
        raise InputError("ablation needs at least one arm")
    labels = [arm.label for arm in arms]
    if len(set(labels)) != len(labels):
        raise InputError("ablation arm labels must be unique")
    by_label = {arm.label: arm for arm in arms}
    settings = base.eval
    reference = teacher_reference_samples(base.teacher, settings.n_samples, settings.sample_seed + 1, reference_grid(base))
    out = Path(out_dir) if out_dir is not None else None
    curves: dict[str, dict[str, list[float]]] = {}

    def run(label: str) -> dict[str, Any]:
        config = base.with_overrides(by_label[label].overrides)
        safe = label.replace(":", "_").replace("=", "")
        run_dir = out / f"arm_{safe}" if out is not None else None
        result = train(config, out_dir=run_dir, evaluate=assessor(config, reference))
        if result.log.evaluations():
            curves[label] = result.log.curves()
        metrics, _ = assess(config, result.ema, reference=reference)
        _LOG.info("Ablation: %s final_loss=%.3e sup_error=%.3e", label, _final_loss(result), metrics["trajectory_sup_error"])
        return {
            "diff_mode": config.loss.diff_mode,
            "stop_grad": config.loss.stop_grad,
            "metric": config.loss.metric,
            "form": config.loss.form,
            "final_loss": _final_loss(result),
            **metrics,
        }

    results = _run_arms("Ablation", labels, run, workers)
    return EvalReport(
        name="ablation",
        rows=[{"arm": label, **result} for label, result in zip(labels, results)],
        curves={label: curves[label] for label in labels if label in curves},
    )
