from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Iterable, NoReturn

try:
    from dotenv import load_dotenv
except ModuleNotFoundError:  # pragma: no cover
    load_dotenv = None

from pid_distill.errors import ConfigError, InputError, NumericalError


EXIT_OK = 0
EXIT_INVALID = 1
EXIT_NUMERICAL = 2


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; usage errors here are validation errors."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _iter_exception_chain(exc: BaseException) -> Iterable[BaseException]:
    seen: set[int] = set()
    current: BaseException | None = exc
    while current is not None and id(current) not in seen:
        yield current
        seen.add(id(current))
        current = current.__cause__ or current.__context__


def _exit_code(exc: BaseException) -> int | None:
    for candidate in _iter_exception_chain(exc):
        if isinstance(candidate, NumericalError):
            return EXIT_NUMERICAL
        if isinstance(candidate, (ConfigError, InputError)):
            return EXIT_INVALID
    return None


def _int_list(raw: str) -> list[int]:
    try:
        return [int(part) for part in raw.split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {raw!r}") from exc


def _load(args: argparse.Namespace):
    from pid_distill.config import ResolvedConfig, load_config

    return load_config(args.config) if args.config else ResolvedConfig()


def _cmd_train(args: argparse.Namespace) -> int:
    from pid_distill.trainer import train

    config = _load(args)
    if args.steps is not None:
        config = config.with_overrides({"train.steps": args.steps})
    evaluate = None
    if config.train.eval_every:
        from pid_distill.evaluation import assessor

        evaluate = assessor(config)
    result = train(config, out_dir=args.out, resume=args.resume, evaluate=evaluate)
    logging.info("Train: done at step %d, checkpoint %s", result.step, result.checkpoint)
    return EXIT_OK


def _cmd_sample(args: argparse.Namespace) -> int:
    from pid_distill.evaluation import student_samples
    from pid_distill.persist import write_csv
    from pid_distill.trainer import load_student

    config, ckpt = load_student(args.ckpt)
    n = args.n if args.n is not None else config.eval.n_samples
    samples = student_samples(ckpt.ema_params, config.student_config(), config.grid.build(), n, args.seed)
    header = [f"x_{j}" for j in range(samples.shape[1])]
    write_csv(args.out, header, samples.tolist())
    logging.info("Sample: wrote %d sample(s) to %s", n, args.out)
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    from pid_distill.evaluation import evaluate_checkpoint
    from pid_distill.trainer import load_student

    config, ckpt = load_student(args.ckpt)
    evaluate_checkpoint(config, ckpt.ema_params, step=ckpt.step).write(args.out)
    return EXIT_OK


def _cmd_traj(args: argparse.Namespace) -> int:
    from pid_distill.evaluation import solver_source, student_source
    from pid_distill.persist import write_csv
    from pid_distill.teacher import prior_noise
    from pid_distill.trainer import load_student

    if args.source == "student":
        if not args.ckpt:
            raise ConfigError("traj --source student needs --ckpt")
        config, ckpt = load_student(args.ckpt)
        source = student_source(ckpt.ema_params, config.student_config())
    else:
        config = load_student(args.ckpt)[0] if args.ckpt else _load(args)
        source = solver_source(config.teacher, args.source)
    grid = config.grid.build()
    seeds = list(range(args.seeds))
    states = source(grid, prior_noise(seeds, config.teacher.dim, grid.t_max))
    header = ["seed", "i", "t", *(f"x_{j}" for j in range(config.teacher.dim))]
    rows = (
        [seed, i, float(grid.times[i]), *states[i, k].tolist()]
        for k, seed in enumerate(seeds)
        for i in range(grid.n)
    )
    write_csv(args.out, header, rows)
    logging.info("Traj: wrote %d x %d rows to %s", len(seeds), grid.n, args.out)
    return EXIT_OK


def _cmd_sweep(args: argparse.Namespace) -> int:
    from pid_distill.evaluation import sweep_discretization

    report = sweep_discretization(_load(args), args.grid, out_dir=args.out)
    report.write(args.out)
    return EXIT_INVALID if any(row.get("error") for row in report.rows) else EXIT_OK


def _cmd_ablate(args: argparse.Namespace) -> int:
    from pid_distill.evaluation import ablation_compare, parse_arm

    arms = [parse_arm(token) for token in args.arms.split(",") if token.strip()]
    report = ablation_compare(_load(args), arms, out_dir=args.out)
    report.write(args.out)
    return EXIT_INVALID if any(row.get("error") for row in report.rows) else EXIT_OK


def _cmd_verify(args: argparse.Namespace) -> int:
    from pid_distill.persist import write_json
    from pid_distill.verify import run_checks

    results = run_checks(set(args.only) if args.only else None)
    if args.out:
        write_json(
            Path(args.out) / "verify.json",
            [{"name": r.name, "ok": r.ok, "detail": r.detail} for r in results],
        )
    failed = [r.name for r in results if not r.ok]
    if failed:
        logging.error("Verify: %d check(s) failed: %s", len(failed), ", ".join(failed))
        return EXIT_INVALID
    logging.info("Verify: all %d check(s) passed", len(results))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    from pid_distill.verify import check_names

    parser = _Parser(prog="pid", description="Physics informed distillation of a Gaussian-mixture teacher.")
    subparsers = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sub: argparse.ArgumentParser) -> argparse.ArgumentParser:
        sub.add_argument("--config", default=None, help="JSON config file (defaults when omitted).")
        return sub

    train = with_config(subparsers.add_parser("train", help="Run PID training."))
    train.add_argument("--out", required=True, help="Run directory for checkpoints, log.csv and config.")
    train.add_argument("--resume", default=None, help="Checkpoint to continue from.")
    train.add_argument("--steps", type=int, default=None, help="Override train.steps.")
    train.set_defaults(handler=_cmd_train)

    sample = subparsers.add_parser("sample", help="Write single-step samples from a checkpoint's EMA weights.")
    sample.add_argument("--ckpt", required=True)
    sample.add_argument("--n", type=int, default=None, help="Sample count (default: eval.n_samples).")
    sample.add_argument("--out", required=True, help="CSV path.")
    sample.add_argument("--seed", type=int, default=0)
    sample.set_defaults(handler=_cmd_sample)

    evaluate = subparsers.add_parser("eval", help="Energy distance and trajectory error of a checkpoint.")
    evaluate.add_argument("--ckpt", required=True)
    evaluate.add_argument("--out", required=True, help="Report directory.")
    evaluate.set_defaults(handler=_cmd_eval)

    traj = with_config(subparsers.add_parser("traj", help="Dump trajectories on the grid as CSV."))
    traj.add_argument("--seeds", type=int, default=1, help="Number of noise seeds (0..k-1).")
    traj.add_argument("--source", choices=["euler", "heun", "student"], default="euler")
    traj.add_argument("--ckpt", default=None, help="Checkpoint (required for --source student).")
    traj.add_argument("--out", required=True, help="CSV path.")
    traj.set_defaults(handler=_cmd_traj)

    sweep = with_config(subparsers.add_parser("sweep-n", help="Train one student per grid size."))
    sweep.add_argument("--grid", type=_int_list, required=True, help="Ascending sizes, e.g. 16,64,256.")
    sweep.add_argument("--out", required=True)
    sweep.set_defaults(handler=_cmd_sweep)

    ablate = with_config(subparsers.add_parser("ablate", help="Train and compare loss variants."))
    ablate.add_argument("--arms", required=True, help="Comma-separated arms, e.g. upwind,central,exact,upwind:nosg.")
    ablate.add_argument("--out", required=True)
    ablate.set_defaults(handler=_cmd_ablate)

    verify = subparsers.add_parser("verify", help="Run the invariant suite.")
    verify.add_argument("--only", nargs="*", choices=check_names(), default=None)
    verify.add_argument("--out", default=None, help="Optional directory for verify.json.")
    verify.set_defaults(handler=_cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    if load_dotenv is not None:
        load_dotenv(override=False)

    from pid_distill.config import log_level, worker_threads

    parser = build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=getattr(logging, log_level(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    logging.debug("CLI: %s with up to %d worker thread(s)", args.command, worker_threads())

    try:
        return args.handler(args)
    except Exception as exc:
        code = _exit_code(exc)
        if code is None:
            raise
        logging.error("%s: %s", args.command, exc)
        return code
