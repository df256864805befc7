from __future__ import annotations

import math

import numpy as np
import pytest

from pid_distill.errors import ConfigError, DomainError, InputError
from pid_distill.student import (
    StudentConfig,
    StudentParams,
    ema_update,
    evaluate,
    init_params,
    pullback,
    skip_coeffs,
    student_backward,
    student_dt_exact,
    student_forward,
)
from pid_distill.time_grid import edm_grid


def _fd_params(params: StudentParams, fn, coords, h: float = 1e-6) -> np.ndarray:
    flat = params.flat()
    out = np.empty(len(coords))
    for k, idx in enumerate(coords):
        bump = np.zeros_like(flat)
        bump[idx] = h
        out[k] = (fn(params.unflatten(flat + bump)) - fn(params.unflatten(flat - bump))) / (2.0 * h)
    return out


def test_skip_coefficients():
    cfg = StudentConfig(input_dim=1)
    end = skip_coeffs(80.0, cfg)
    assert end.c_skip == 1.0 and end.c_out == 0.0
    mid = skip_coeffs(40.0, cfg)
    assert mid.c_skip == 0.5 and mid.c_out == 0.5
    one = skip_coeffs(1.0, cfg)
    assert one.c_noise == 0.0
    assert one.c_in == pytest.approx(1.0 / math.sqrt(6400.25), rel=1e-15)
    for bad in (0.0, -1.0, 80.5):
        with pytest.raises(DomainError):
            skip_coeffs(bad, cfg)


def test_boundary_condition_holds_for_random_networks():
    rng = np.random.default_rng(0)
    cfg = StudentConfig(input_dim=3, hidden_dims=(16, 16))
    for _ in range(100):
        params = init_params(cfg, rng)
        z = rng.standard_normal(3) * rng.uniform(0.0, 240.0)
        assert np.max(np.abs(student_forward(params, cfg, z, 80.0) - z)) <= 1e-12


def test_zero_weight_network_reduces_to_bias_path():
    cfg = StudentConfig(input_dim=2, hidden_dims=(4,))
    zeros = init_params(cfg, np.random.default_rng(0), scheme="zeros")
    bias = np.array([0.3, -1.2])
    params = StudentParams(weights=zeros.weights, biases=(zeros.biases[0], bias))
    z = np.array([5.0, -2.0])
    for t in (0.002, 1.0, 33.0):
        c = skip_coeffs(t, cfg)
        np.testing.assert_allclose(student_forward(params, cfg, z, t), c.c_skip * z + c.c_out * bias, rtol=1e-15)
    np.testing.assert_allclose(student_dt_exact(zeros, cfg, z, 7.0), z / 80.0, rtol=1e-15)
    np.testing.assert_allclose(student_dt_exact(zeros, cfg, z, 0.01), z / 80.0, rtol=1e-15)


def test_forward_accepts_single_and_batched_noise(small_student, rng):
    params = init_params(small_student, rng)
    z = rng.standard_normal((3, 2)) * 10.0
    batched = student_forward(params, small_student, z, np.array([0.1, 1.0, 10.0]))
    single = student_forward(params, small_student, z[1], 1.0)
    assert batched.shape == (3, 2) and single.shape == (2,)
    np.testing.assert_array_equal(batched[1], single)
    with pytest.raises(InputError):
        student_forward(params, small_student, np.zeros(3), 1.0)


def test_outputs_stay_finite_for_large_noise(small_student, rng):
    params = init_params(small_student, rng)
    z = rng.standard_normal((64, 2)) * 240.0
    for t in edm_grid(32).times:
        assert np.all(np.isfinite(student_forward(params, small_student, z, t)))
        assert np.all(np.isfinite(student_dt_exact(params, small_student, z, t)))


def test_backward_at_final_time_is_zero(small_student, rng):
    params = init_params(small_student, rng)
    grad = student_backward(params, small_student, np.array([1.0, 2.0]), 80.0, np.array([0.5, -0.5]))
    assert np.array_equal(grad, np.zeros(params.size))


def test_backward_rejects_non_finite_upstream(small_student, rng):
    params = init_params(small_student, rng)
    with pytest.raises(InputError):
        student_backward(params, small_student, np.ones(2), 1.0, np.array([np.inf, 0.0]))


@pytest.mark.parametrize(
    "cfg",
    [
        StudentConfig(input_dim=2, hidden_dims=(8, 8)),
        StudentConfig(input_dim=2, hidden_dims=(6,), activation="tanh"),
        StudentConfig(input_dim=1, hidden_dims=(5, 5), time_embedding="sinusoidal", embedding_frequencies=2),
        StudentConfig(input_dim=2, hidden_dims=(8,), activation="relu"),
    ],
)
def test_parameter_gradient_matches_finite_differences(cfg):
    rng = np.random.default_rng(11)
    params = init_params(cfg, rng)
    z = rng.standard_normal((4, cfg.input_dim)) * 15.0
    t = np.array([0.02, 0.9, 8.0, 50.0])
    upstream = rng.standard_normal(z.shape)
    grad = student_backward(params, cfg, z, t, upstream)
    coords = rng.choice(params.size, size=min(30, params.size), replace=False)
    fd = _fd_params(params, lambda p: np.sum(upstream * student_forward(p, cfg, z, t)), coords)
    np.testing.assert_allclose(grad[coords], fd, rtol=1e-5, atol=1e-7)


@pytest.mark.parametrize(
    "cfg",
    [
        StudentConfig(input_dim=2, hidden_dims=(8, 8)),
        StudentConfig(input_dim=2, hidden_dims=(6,), activation="tanh"),
        StudentConfig(input_dim=1, hidden_dims=(5, 5), time_embedding="sinusoidal", embedding_frequencies=3),
    ],
)
def test_time_derivative_matches_finite_differences(cfg):
    rng = np.random.default_rng(5)
    params = init_params(cfg, rng)
    z = rng.standard_normal((4, cfg.input_dim)) * 25.0
    t = np.array([0.05, 0.7, 6.0, 40.0])
    h = 1e-6 * t
    fd = (student_forward(params, cfg, z, t + h) - student_forward(params, cfg, z, t - h)) / (2.0 * h[:, None])
    np.testing.assert_allclose(student_dt_exact(params, cfg, z, t), fd, rtol=1e-5, atol=1e-8)


def test_gradient_through_time_derivative(small_student):
    rng = np.random.default_rng(8)
    params = init_params(small_student, rng)
    z = rng.standard_normal((3, 2)) * 20.0
    t = np.array([0.1, 2.0, 30.0])
    g = rng.standard_normal(z.shape)
    ev = evaluate(params, small_student, z, t, tangent=True)
    grad = pullback(params, small_student, ev, np.zeros_like(z), g)
    coords = rng.choice(params.size, size=30, replace=False)
    fd = _fd_params(params, lambda p: np.sum(g * student_dt_exact(p, small_student, z, t)), coords)
    np.testing.assert_allclose(grad[coords], fd, rtol=1e-5, atol=1e-8)


def test_pullback_through_derivative_needs_tangent(small_student, rng):
    params = init_params(small_student, rng)
    ev = evaluate(params, small_student, np.ones(2), 1.0)
    with pytest.raises(InputError):
        pullback(params, small_student, ev, np.zeros((1, 2)), np.ones((1, 2)))


def test_forward_is_deterministic(small_student, rng):
    params = init_params(small_student, rng)
    z = rng.standard_normal((8, 2))
    assert np.array_equal(student_forward(params, small_student, z, 3.0), student_forward(params, small_student, z, 3.0))


def test_flat_round_trip_and_shape_check(small_student, rng):
    params = init_params(small_student, rng)
    again = params.unflatten(params.flat())
    assert np.array_equal(again.flat(), params.flat())
    params.check(small_student)
    with pytest.raises(InputError):
        params.check(StudentConfig(input_dim=2, hidden_dims=(4, 8)))
    with pytest.raises(InputError):
        params.unflatten(np.zeros(params.size + 1))


def test_ema_update(small_student):
    a = init_params(small_student, np.random.default_rng(1))
    b = init_params(small_student, np.random.default_rng(2))
    assert np.array_equal(ema_update(a, b, 1.0).flat(), a.flat())
    assert np.array_equal(ema_update(a, b, 0.0).flat(), b.flat())
    np.testing.assert_allclose(ema_update(a, b, 0.25).flat(), 0.25 * a.flat() + 0.75 * b.flat(), rtol=1e-15)
    with pytest.raises(ConfigError):
        ema_update(a, b, 1.5)
    other = init_params(StudentConfig(input_dim=2, hidden_dims=(3,)), np.random.default_rng(3))
    with pytest.raises(InputError):
        ema_update(a, other, 0.5)


def test_ema_converges_to_fixed_params(small_student):
    current = init_params(small_student, np.random.default_rng(4))
    ema = init_params(small_student, np.random.default_rng(5))
    for _ in range(2000):
        ema = ema_update(ema, current, 0.99)
    np.testing.assert_allclose(ema.flat(), current.flat(), atol=1e-8)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"input_dim": 0},
        {"input_dim": 2, "hidden_dims": ()},
        {"input_dim": 2, "activation": "gelu"},
        {"input_dim": 2, "time_embedding": "fourier"},
        {"input_dim": 2, "sigma_data": 0.0},
    ],
)
def test_student_config_validation(kwargs):
    with pytest.raises(ConfigError):
        StudentConfig(**kwargs)
