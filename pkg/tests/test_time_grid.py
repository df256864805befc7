from __future__ import annotations

import numpy as np
import pytest

from pid_distill.errors import ConfigError
from pid_distill.time_grid import edm_grid, make_grid, sample_index, sample_indices, uniform_grid


@pytest.mark.parametrize("n", [2, 3, 17, 128, 1000])
def test_edm_grid_endpoints_are_exact(n):
    grid = edm_grid(n)
    assert grid.times[0] == 80.0
    assert grid.times[-1] == 0.002
    assert np.all(np.diff(grid.times) < 0.0)
    assert grid.n == n


def test_edm_grid_interior_matches_formula():
    grid = edm_grid(4, t_min=0.002, t_max=80.0, rho=7.0)
    hi, lo = 80.0 ** (1 / 7), 0.002 ** (1 / 7)
    for i in (1, 2):
        assert grid.times[i] == pytest.approx((hi + i / 3 * (lo - hi)) ** 7, rel=1e-15)
    assert 80.0 > grid.times[1] > grid.times[2] > 0.002


def test_doubling_n_shrinks_max_step():
    for n in (8, 16, 32, 64):
        assert edm_grid(2 * n).max_step < edm_grid(n).max_step
        assert uniform_grid(2 * n).max_step < uniform_grid(n).max_step


def test_grid_times_are_read_only():
    grid = edm_grid(8)
    with pytest.raises(ValueError):
        grid.times[3] = 1.0


@pytest.mark.parametrize(
    "kwargs",
    [
        {"n": 1},
        {"n": 8, "t_min": 0.0},
        {"n": 8, "t_min": 5.0, "t_max": 5.0},
        {"n": 8, "rho": 0.0},
    ],
)
def test_grid_validation(kwargs):
    with pytest.raises(ConfigError):
        edm_grid(**kwargs)


def test_make_grid_rejects_unknown_kind():
    assert make_grid("uniform", 5).kind == "uniform"
    with pytest.raises(ConfigError):
        make_grid("cosine", 5)


def test_two_point_grid_always_samples_zero():
    rng = np.random.default_rng(0)
    assert {sample_index(edm_grid(2), rng) for _ in range(50)} == {0}


def test_index_histogram_is_uniform():
    grid = edm_grid(11)
    draws = sample_indices(grid, np.random.default_rng(3), 100_000)
    counts = np.bincount(draws, minlength=grid.n)
    assert counts[grid.n - 1] == 0
    p = 1.0 / (grid.n - 1)
    sigma = np.sqrt(100_000 * p * (1.0 - p))
    assert np.all(np.abs(counts[:-1] - 100_000 * p) <= 3.0 * sigma + 1.0)


def test_interior_sampling_skips_first_index():
    draws = sample_indices(edm_grid(5), np.random.default_rng(1), 1000, interior=True)
    assert draws.min() >= 1 and draws.max() <= 3


def test_sampling_is_reproducible():
    grid = edm_grid(32)
    first = sample_indices(grid, np.random.default_rng(9), 64)
    assert np.array_equal(first, sample_indices(grid, np.random.default_rng(9), 64))
