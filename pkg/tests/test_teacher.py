from __future__ import annotations

import math

import numpy as np
import pytest

from pid_distill.errors import ConfigError, DomainError, InputError
from pid_distill.teacher import (
    GaussianComponent,
    TeacherSpec,
    denoise,
    denoiser_jacobian,
    gaussian_teacher,
    log_density,
    prior_noise,
    ring_teacher,
    sample_data,
    score,
)


def _fd_score(teacher: TeacherSpec, x: np.ndarray, t: float, h: float = 1e-5) -> np.ndarray:
    out = np.empty(teacher.dim)
    for j in range(teacher.dim):
        bump = np.zeros(teacher.dim)
        bump[j] = h
        out[j] = (log_density(teacher, x + bump, t) - log_density(teacher, x - bump, t)) / (2.0 * h)
    return out


def test_log_density_standard_normal_mode(unit_gaussian):
    assert log_density(unit_gaussian, np.array([0.0]), 0.0) == pytest.approx(-0.5 * math.log(2.0 * math.pi), abs=1e-15)


def test_log_density_matches_gaussian_formula(unit_gaussian):
    expected = -0.5 * math.log(2.0 * math.pi * 5.0) - 1.0 / 10.0
    assert log_density(unit_gaussian, np.array([1.0]), 2.0) == pytest.approx(expected, abs=1e-14)


def test_log_density_is_symmetric_in_component_order():
    left = GaussianComponent(weight=0.5, mean=(-3.0,), sigma0=0.4)
    right = GaussianComponent(weight=0.5, mean=(3.0,), sigma0=0.4)
    a = TeacherSpec(dim=1, components=(left, right))
    b = TeacherSpec(dim=1, components=(right, left))
    x = np.array([0.0])
    assert log_density(a, x, 1.3) == log_density(b, x, 1.3)


def test_log_density_stays_finite_far_out(ring):
    x = np.array([1e6, -1e6])
    for t in (0.0, 1.0, 80.0):
        assert np.isfinite(log_density(ring, x, t))


def test_score_single_gaussian(unit_gaussian):
    assert score(unit_gaussian, np.array([2.0]), 1.0) == pytest.approx([-1.0], abs=1e-15)
    assert np.array_equal(score(gaussian_teacher(2, mean=[1.0, -1.0]), np.array([1.0, -1.0]), 0.7), [0.0, 0.0])


@pytest.mark.parametrize("t", [0.02, 0.3, 1.0, 5.0, 80.0])
def test_score_matches_finite_difference(ring, bimodal, t):
    for teacher in (ring, bimodal):
        for x in (np.full(teacher.dim, 0.4), np.linspace(-5.0, 4.0, teacher.dim)):
            sc = score(teacher, x, t)
            assert np.max(np.abs(sc - _fd_score(teacher, x, t))) <= 1e-5 * (1.0 + np.max(np.abs(sc)))


def test_score_rejects_zero_noise(unit_gaussian):
    with pytest.raises(DomainError):
        score(unit_gaussian, np.array([1.0]), 0.0)


def test_dimension_mismatch_is_an_input_error(ring):
    with pytest.raises(InputError):
        log_density(ring, np.zeros(3), 1.0)


def test_denoise_examples(unit_gaussian, bimodal):
    assert denoise(unit_gaussian, np.array([2.0]), 1.0) == pytest.approx([1.0], abs=1e-15)
    assert denoise(bimodal, np.array([0.0]), 0.8) == pytest.approx([0.0], abs=1e-15)
    x = np.array([[3.0, -7.0], [0.1, 0.2]])
    assert np.array_equal(denoise(ring_teacher(), x, 0.0), x)


def test_denoise_equals_shifted_score(ring):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((50, 2)) * 20.0
    t = np.geomspace(0.002, 80.0, 50)
    gap = denoise(ring, x, t) - (x + (t**2)[:, None] * score(ring, x, t))
    assert np.max(np.abs(gap)) <= 1e-10


def test_denoiser_jacobian_single_gaussian():
    teacher = gaussian_teacher(3)
    jac = denoiser_jacobian(teacher, np.array([0.5, -1.0, 2.0]), 1.0)
    np.testing.assert_allclose(jac, 0.5 * np.eye(3), rtol=1e-4, atol=1e-8)


def test_denoiser_jacobian_tends_to_identity(ring):
    jac = denoiser_jacobian(ring, np.array([1.0, 2.0]), 1e-6)
    np.testing.assert_allclose(jac, np.eye(2), atol=1e-6)


def test_denoiser_jacobian_is_even_for_symmetric_teacher(bimodal):
    x = np.array([0.7])
    np.testing.assert_allclose(denoiser_jacobian(bimodal, x, 1.1), denoiser_jacobian(bimodal, -x, 1.1), rtol=1e-9)


def test_denoiser_jacobian_dimension_guard():
    with pytest.raises(ConfigError):
        denoiser_jacobian(gaussian_teacher(17), np.zeros(17), 1.0)


def test_sample_data(unit_gaussian):
    assert sample_data(unit_gaussian, 0, np.random.default_rng(0)).shape == (0, 1)
    draws = sample_data(unit_gaussian, 100_000, np.random.default_rng(1))
    assert abs(draws.mean()) < 0.02
    again = sample_data(ring_teacher(), 16, np.random.default_rng(7))
    assert np.array_equal(again, sample_data(ring_teacher(), 16, np.random.default_rng(7)))


@pytest.mark.parametrize(
    "components, dim",
    [
        ((GaussianComponent(0.6, (0.0,), 1.0), GaussianComponent(0.3, (1.0,), 1.0)), 1),
        ((GaussianComponent(1.0, (0.0,), 0.0),), 1),
        ((GaussianComponent(1.0, (math.nan,), 1.0),), 1),
        ((GaussianComponent(1.0, (0.0, 1.0), 1.0),), 1),
        ((GaussianComponent(1.0, tuple([0.0] * 65), 1.0),), 65),
    ],
)
def test_teacher_validation(components, dim):
    with pytest.raises(ConfigError):
        TeacherSpec(dim=dim, components=components)


def test_prior_noise_is_per_seed():
    z = prior_noise([3, 4], 2, 80.0)
    assert z.shape == (2, 2)
    assert np.array_equal(z[1], prior_noise([4], 2, 80.0)[0])
