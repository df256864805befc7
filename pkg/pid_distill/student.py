"""Trajectory-function student x_theta(z, t) = c_skip(t) z + c_out(t) X_theta(c_in z, c_noise(t)).

X_theta is a small MLP held as plain numpy arrays. Gradients are hand-written:
``evaluate`` runs the network (optionally propagating the tangent with respect
to the noise input, forward mode) and ``pullback`` runs reverse accumulation,
including through that tangent so the exact-derivative loss can be trained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from pid_distill.errors import ConfigError, DomainError, InputError


ACTIVATIONS: tuple[str, ...] = ("silu", "tanh", "relu")
SMOOTH_ACTIVATIONS: tuple[str, ...] = ("silu", "tanh")
TIME_EMBEDDINGS: tuple[str, ...] = ("scalar", "sinusoidal")
INIT_SCHEMES: tuple[str, ...] = ("he", "zeros")


@dataclass(frozen=True)
class StudentConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (64, 64)
    activation: str = "silu"
    t_max: float = 80.0
    sigma_data: float = 0.5
    time_embedding: str = "scalar"
    embedding_frequencies: int = 4

    def __post_init__(self) -> None:
        if self.input_dim < 1:
            raise ConfigError(f"student.input_dim must be >= 1, got {self.input_dim!r}")
        if not self.hidden_dims or any(w < 1 for w in self.hidden_dims):
            raise ConfigError(f"student.hidden_dims must be non-empty widths >= 1, got {list(self.hidden_dims)!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"student.activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.time_embedding not in TIME_EMBEDDINGS:
            raise ConfigError(f"student.time_embedding must be one of {TIME_EMBEDDINGS}, got {self.time_embedding!r}")
        if self.time_embedding == "sinusoidal" and self.embedding_frequencies < 1:
            raise ConfigError("student.embedding_frequencies must be >= 1 for the sinusoidal embedding")
        if not (self.t_max > 0.0) or not math.isfinite(self.t_max):
            raise ConfigError(f"student.t_max must be > 0, got {self.t_max!r}")
        if not (self.sigma_data > 0.0) or not math.isfinite(self.sigma_data):
            raise ConfigError(f"student.sigma_data must be > 0, got {self.sigma_data!r}")

    @property
    def feature_dim(self) -> int:
        extra = 1
        if self.time_embedding == "sinusoidal":
            extra += 2 * self.embedding_frequencies
        return self.input_dim + extra

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        widths = [self.feature_dim, *self.hidden_dims, self.input_dim]
        return [(widths[k + 1], widths[k]) for k in range(len(widths) - 1)]


@dataclass(frozen=True, eq=False)
class StudentParams:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    @property
    def size(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flat(self) -> np.ndarray:
        parts: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    def unflatten(self, vector: np.ndarray) -> StudentParams:
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.size,):
            raise InputError(f"parameter vector has shape {vector.shape}, expected ({self.size},)")
        weights: list[np.ndarray] = []
        biases: list[np.ndarray] = []
        offset = 0
        for w, b in zip(self.weights, self.biases):
            weights.append(vector[offset : offset + w.size].reshape(w.shape).copy())
            offset += w.size
            biases.append(vector[offset : offset + b.size].copy())
            offset += b.size
        return StudentParams(weights=tuple(weights), biases=tuple(biases))

    def check(self, cfg: StudentConfig) -> None:
        shapes = cfg.layer_shapes
        if len(self.weights) != len(shapes) or len(self.biases) != len(shapes):
            raise InputError(f"params have {len(self.weights)} layers, config expects {len(shapes)}")
        for idx, ((out_dim, in_dim), w, b) in enumerate(zip(shapes, self.weights, self.biases)):
            if w.shape != (out_dim, in_dim) or b.shape != (out_dim,):
                raise InputError(
                    f"layer {idx} has weight {w.shape} / bias {b.shape}, expected ({out_dim}, {in_dim}) / ({out_dim},)"
                )


def init_params(cfg: StudentConfig, rng: np.random.Generator, *, scheme: str = "he") -> StudentParams:
    """He-scaled normal weights on hidden layers, 1/sqrt(fan_in) on the output layer, zero biases."""
    if scheme not in INIT_SCHEMES:
        raise ConfigError(f"student.init must be one of {INIT_SCHEMES}, got {scheme!r}")
    shapes = cfg.layer_shapes
    weights: list[np.ndarray] = []
    for idx, (out_dim, in_dim) in enumerate(shapes):
        if scheme == "zeros":
            weights.append(np.zeros((out_dim, in_dim)))
            continue
        gain = 1.0 if idx == len(shapes) - 1 else 2.0
        weights.append(rng.standard_normal((out_dim, in_dim)) * math.sqrt(gain / in_dim))
    biases = tuple(np.zeros(out_dim) for out_dim, _ in shapes)
    return StudentParams(weights=tuple(weights), biases=biases)


@dataclass(frozen=True, eq=False)
class SkipCoeffs:
    c_skip: np.ndarray
    c_out: np.ndarray
    c_in: float
    c_noise: np.ndarray


def skip_coeffs(t: float | np.ndarray, cfg: StudentConfig) -> SkipCoeffs:
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0.0):
        raise DomainError("skip coefficients require t > 0")
    if np.any(t > cfg.t_max):
        raise DomainError(f"skip coefficients require t <= t_max={cfg.t_max}")
    big_t = cfg.t_max
    return SkipCoeffs(
        c_skip=t / big_t,
        c_out=(big_t - t) / big_t,
        c_in=1.0 / math.sqrt(cfg.sigma_data**2 + big_t**2),
        c_noise=np.log(t) / 4.0,
    )


def _activate(name: str, a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Activation value with its first and second derivatives."""
    if name == "silu":
        s = expit(a)
        return a * s, s * (1.0 + a * (1.0 - s)), s * (1.0 - s) * (2.0 + a * (1.0 - 2.0 * s))
    if name == "tanh":
        h = np.tanh(a)
        d1 = 1.0 - h * h
        return h, d1, -2.0 * h * d1
    return np.maximum(a, 0.0), (a > 0.0).astype(np.float64), np.zeros_like(a)


def _features(cfg: StudentConfig, scaled_z: np.ndarray, c_noise: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Network input and its derivative with respect to c_noise."""
    batch = scaled_z.shape[0]
    cols = [scaled_z, c_noise[:, None]]
    dcols = [np.zeros_like(scaled_z), np.ones((batch, 1))]
    if cfg.time_embedding == "sinusoidal":
        freqs = 2.0 ** np.arange(cfg.embedding_frequencies)
        angle = c_noise[:, None] * freqs
        cols += [np.sin(angle), np.cos(angle)]
        dcols += [freqs * np.cos(angle), -freqs * np.sin(angle)]
    return np.concatenate(cols, axis=1), np.concatenate(dcols, axis=1)


@dataclass(frozen=True, eq=False)
class _Tape:
    inputs: list[np.ndarray]
    tangents: list[np.ndarray] | None
    pre: list[np.ndarray]
    pre_tangents: list[np.ndarray] | None


def _propagate(
    params: StudentParams,
    activation: str,
    h0: np.ndarray,
    dh0: np.ndarray | None,
) -> tuple[np.ndarray, np.ndarray | None, _Tape]:
    inputs: list[np.ndarray] = []
    tangents: list[np.ndarray] | None = [] if dh0 is not None else None
    pre: list[np.ndarray] = []
    pre_tangents: list[np.ndarray] | None = [] if dh0 is not None else None
    h, dh = h0, dh0
    last = len(params.weights) - 1
    for idx, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        a = h @ w.T + b
        da = dh @ w.T if dh is not None else None
        if tangents is not None:
            tangents.append(dh)
        if idx == last:
            return a, da, _Tape(inputs=inputs, tangents=tangents, pre=pre, pre_tangents=pre_tangents)
        pre.append(a)
        if pre_tangents is not None:
            pre_tangents.append(da)
        h, d1, _ = _activate(activation, a)
        dh = d1 * da if da is not None else None
    raise AssertionError("unreachable")


def _pullback(
    params: StudentParams,
    activation: str,
    tape: _Tape,
    g_out: np.ndarray,
    g_dout: np.ndarray | None,
) -> np.ndarray:
    layers = len(params.weights)
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * layers  # type: ignore[list-item]
    g_a, g_da = g_out, g_dout
    for idx in range(layers - 1, -1, -1):
        d_w = g_a.T @ tape.inputs[idx]
        if g_da is not None and tape.tangents is not None:
            d_w = d_w + g_da.T @ tape.tangents[idx]
        grads[idx] = (d_w, g_a.sum(axis=0))
        if idx == 0:
            break
        w = params.weights[idx]
        g_h = g_a @ w
        _, d1, d2 = _activate(activation, tape.pre[idx - 1])
        if g_da is None or tape.pre_tangents is None:
            g_a, g_da = d1 * g_h, None
        else:
            g_dh = g_da @ w
            g_a = d1 * g_h + d2 * tape.pre_tangents[idx - 1] * g_dh
            g_da = d1 * g_dh
    parts: list[np.ndarray] = []
    for d_w, d_b in grads:
        parts.append(d_w.ravel())
        parts.append(d_b)
    return np.concatenate(parts)


@dataclass(frozen=True, eq=False)
class StudentEval:
    z: np.ndarray
    t: np.ndarray
    coeffs: SkipCoeffs
    network: np.ndarray
    x: np.ndarray
    network_dnoise: np.ndarray | None
    dxdt: np.ndarray | None
    tape: _Tape


def _as_batch(cfg: StudentConfig, z: np.ndarray, t: float | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim not in (1, 2) or z.shape[-1] != cfg.input_dim:
        raise InputError(f"z has shape {z.shape}, expected ({cfg.input_dim},) or (batch, {cfg.input_dim})")
    z2 = z.reshape(-1, cfg.input_dim)
    try:
        t2 = np.broadcast_to(np.asarray(t, dtype=np.float64), (z2.shape[0],))
    except ValueError as exc:
        raise InputError(f"t shape {np.shape(t)} does not match batch of {z2.shape[0]}") from exc
    return z2, t2


def evaluate(
    params: StudentParams,
    cfg: StudentConfig,
    z: np.ndarray,
    t: float | np.ndarray,
    *,
    tangent: bool = False,
) -> StudentEval:
    """Batched x_theta(z, t); with ``tangent`` also the exact dx_theta/dt."""
    z2, t2 = _as_batch(cfg, z, t)
    coeffs = skip_coeffs(t2, cfg)
    h0, dh0 = _features(cfg, coeffs.c_in * z2, coeffs.c_noise)
    net, dnet, tape = _propagate(params, cfg.activation, h0, dh0 if tangent else None)
    x = coeffs.c_skip[:, None] * z2 + coeffs.c_out[:, None] * net
    dxdt = None
    if dnet is not None:
        dnoise_dt = 1.0 / (4.0 * t2)
        dxdt = (z2 - net) / cfg.t_max + (coeffs.c_out * dnoise_dt)[:, None] * dnet
    return StudentEval(z=z2, t=t2, coeffs=coeffs, network=net, x=x, network_dnoise=dnet, dxdt=dxdt, tape=tape)


def pullback(
    params: StudentParams,
    cfg: StudentConfig,
    ev: StudentEval,
    g_x: np.ndarray,
    g_dxdt: np.ndarray | None = None,
) -> np.ndarray:
    """Flat gradient of sum_b <g_x, x> + <g_dxdt, dx/dt> over the batch."""
    g_net = ev.coeffs.c_out[:, None] * g_x
    g_dnet = None
    if g_dxdt is not None:
        if ev.network_dnoise is None:
            raise InputError("pullback through dx/dt needs an evaluation with tangent=True")
        g_net = g_net - g_dxdt / cfg.t_max
        g_dnet = (ev.coeffs.c_out / (4.0 * ev.t))[:, None] * g_dxdt
    return _pullback(params, cfg.activation, ev.tape, g_net, g_dnet)


def student_forward(params: StudentParams, cfg: StudentConfig, z: np.ndarray, t: float | np.ndarray) -> np.ndarray:
    z_arr = np.asarray(z, dtype=np.float64)
    return evaluate(params, cfg, z_arr, t).x.reshape(z_arr.shape)


def student_backward(
    params: StudentParams,
    cfg: StudentConfig,
    z: np.ndarray,
    t: float | np.ndarray,
    upstream: np.ndarray,
) -> np.ndarray:
    ev = evaluate(params, cfg, z, t)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.size != ev.x.size:
        raise InputError(f"upstream has shape {upstream.shape}, expected {np.shape(z)}")
    if not np.all(np.isfinite(upstream)):
        raise InputError("upstream cotangent must be finite")
    return pullback(params, cfg, ev, upstream.reshape(ev.x.shape))


def student_dt_exact(params: StudentParams, cfg: StudentConfig, z: np.ndarray, t: float | np.ndarray) -> np.ndarray:
    z_arr = np.asarray(z, dtype=np.float64)
    ev = evaluate(params, cfg, z_arr, t, tangent=True)
    assert ev.dxdt is not None
    return ev.dxdt.reshape(z_arr.shape)


def ema_update(ema: StudentParams, current: StudentParams, decay: float) -> StudentParams:
    if not 0.0 <= decay <= 1.0:
        raise ConfigError(f"ema decay must be in [0, 1], got {decay!r}")
    if [w.shape for w in ema.weights] != [w.shape for w in current.weights] or [b.shape for b in ema.biases] != [
        b.shape for b in current.biases
    ]:
        raise InputError("ema and current parameters have different shapes")
    keep = 1.0 - decay
    return StudentParams(
        weights=tuple(decay * e + keep * c for e, c in zip(ema.weights, current.weights)),
        biases=tuple(decay * e + keep * c for e, c in zip(ema.biases, current.biases)),
    )
