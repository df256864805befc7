from __future__ import annotations

import numpy as np
import pytest

from pid_distill.student import StudentConfig
from pid_distill.teacher import GaussianComponent, TeacherSpec, gaussian_teacher, ring_teacher


def pytest_addoption(parser: pytest.Parser) -> None:
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance experiments")


def pytest_collection_modifyitems(config: pytest.Config, items: list[pytest.Item]) -> None:
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def ring() -> TeacherSpec:
    return ring_teacher()


@pytest.fixture
def unit_gaussian() -> TeacherSpec:
    return gaussian_teacher(1, sigma0=1.0)


@pytest.fixture
def bimodal() -> TeacherSpec:
    return TeacherSpec(
        dim=1,
        components=(
            GaussianComponent(weight=0.5, mean=(-2.0,), sigma0=0.5),
            GaussianComponent(weight=0.5, mean=(2.0,), sigma0=0.5),
        ),
    )


@pytest.fixture
def small_student() -> StudentConfig:
    return StudentConfig(input_dim=2, hidden_dims=(8, 8))
