from __future__ import annotations

import csv
import io
import json
import logging
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from pid_distill.errors import ConfigError
from pid_distill.optim import AdamState
from pid_distill.student import StudentParams


_LOG = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


def atomic_write_text(path: str | Path, text: str) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=target.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
        os.replace(tmp_name, target)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise
    return target


def write_json(path: str | Path, payload: Any) -> Path:
    return atomic_write_text(path, json.dumps(payload, indent=2, allow_nan=False) + "\n")


def read_json(path: str | Path) -> Any:
    source = Path(path)
    try:
        raw = source.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{source}: cannot read file ({exc.strerror or exc})") from exc
    try:
        return json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from exc


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[dict[str, Any] | Sequence[Any]]) -> Path:
    col_index = {name: i for i, name in enumerate(header)}
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    count = 0
    for row in rows:
        if isinstance(row, dict):
            out: list[Any] = [""] * len(header)
            for key, value in row.items():
                idx = col_index.get(key)
                if idx is None:
                    raise ValueError(f"CSV '{Path(path).name}' missing column '{key}'")
                out[idx] = value
        else:
            out = list(row)
        writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in out])
        count += 1
    _LOG.debug("Writing %d row(s) to %s", count, path)
    return atomic_write_text(path, buffer.getvalue())


def params_to_json(params: StudentParams) -> list[dict[str, Any]]:
    return [{"weight": w.tolist(), "bias": b.tolist()} for w, b in zip(params.weights, params.biases)]


def params_from_json(payload: Any, *, where: str = "params") -> StudentParams:
    if not isinstance(payload, list) or not payload:
        raise ConfigError(f"{where} must be a non-empty list of layers")
    weights: list[np.ndarray] = []
    biases: list[np.ndarray] = []
    for idx, layer in enumerate(payload):
        if not isinstance(layer, dict) or set(layer) != {"weight", "bias"}:
            raise ConfigError(f"{where}[{idx}] must be an object with 'weight' and 'bias'")
        w = np.asarray(layer["weight"], dtype=np.float64)
        b = np.asarray(layer["bias"], dtype=np.float64)
        if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
            raise ConfigError(f"{where}[{idx}] has inconsistent shapes {w.shape} / {b.shape}")
        weights.append(w)
        biases.append(b)
    return StudentParams(weights=tuple(weights), biases=tuple(biases))


@dataclass(frozen=True, eq=False)
class Checkpoint:
    config: dict[str, Any]
    params: StudentParams
    ema_params: StudentParams
    step: int
    optimizer: AdamState
    rng_state: dict[str, Any]


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": ckpt.config,
        "params": params_to_json(ckpt.params),
        "ema_params": params_to_json(ckpt.ema_params),
        "step": int(ckpt.step),
        "optimizer": {
            "step": int(ckpt.optimizer.step),
            "m": ckpt.optimizer.m.tolist(),
            "v": ckpt.optimizer.v.tolist(),
        },
        "rng_state": ckpt.rng_state,
    }
    return write_json(path, payload)


def load_checkpoint(path: str | Path) -> Checkpoint:
    payload = read_json(path)
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: checkpoint must be a JSON object")
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version!r} (expected {CHECKPOINT_VERSION})")
    missing = [key for key in ("config", "params", "ema_params", "step") if key not in payload]
    if missing:
        raise ConfigError(f"{path}: checkpoint missing keys: {', '.join(missing)}")
    params = params_from_json(payload["params"], where="params")
    ema = params_from_json(payload["ema_params"], where="ema_params")
    opt = payload.get("optimizer") or {}
    if opt:
        optimizer = AdamState(
            step=int(opt["step"]),
            m=np.asarray(opt["m"], dtype=np.float64),
            v=np.asarray(opt["v"], dtype=np.float64),
        )
    else:
        optimizer = AdamState.zeros(params.size)
    return Checkpoint(
        config=payload["config"],
        params=params,
        ema_params=ema,
        step=int(payload["step"]),
        optimizer=optimizer,
        rng_state=payload.get("rng_state") or {},
    )
