import math
from pathlib import Path

import numpy as np
import pytest

from app.models.schemas import GroupConfig, GroupPreset, MetricKind, RadiusRule
from app.services.algebra_service import algebra_from_preset
from app.services.group_service import CarnotGroup, MetricBackend
from app.services.ifs_service import Ball, DilationCone, IfsSystem, VerticalCoset, construct_system, make_parameters
from app.services.pipeline_service import load_config
from app.services.potential_service import HTypeKernel

TOY_CENTERS = np.array([
    [-1.0, 0.5, 0.5],
    [-1.0, 0.5, -0.5],
    [-1.0, -0.5, 0.5],
    [-1.0, -0.5, -0.5],
])
TOY_R = 0.45
TOY_R0 = math.sqrt(0.19)
TOY_EPSILON = 0.5

HEISENBERG_CONFIG = str(Path(__file__).resolve().parent.parent / "configs" / "heisenberg-1.toml")


@pytest.fixture(scope="session")
def heisenberg():
    return CarnotGroup(algebra_from_preset(GroupPreset.HEISENBERG_1))


@pytest.fixture(scope="session")
def heisenberg2():
    return CarnotGroup(algebra_from_preset(GroupPreset.HEISENBERG_2))


@pytest.fixture(scope="session")
def engel():
    return CarnotGroup(algebra_from_preset(GroupPreset.ENGEL))


@pytest.fixture(scope="session")
def abelian3():
    return CarnotGroup(algebra_from_preset(GroupPreset.ABELIAN_3))


@pytest.fixture(scope="session")
def heisenberg_kernel(heisenberg):
    return HTypeKernel(heisenberg)


@pytest.fixture(scope="session")
def gauge_backend(heisenberg, heisenberg_kernel):
    return MetricBackend(heisenberg, MetricKind.GAUGE, kernel=heisenberg_kernel)


@pytest.fixture(scope="session")
def box_backend(heisenberg):
    return MetricBackend(heisenberg, MetricKind.BOX)


@pytest.fixture(scope="session")
def euclidean_backend(abelian3):
    return MetricBackend(abelian3, MetricKind.BOX)


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


def build_toy_system(group, seed: int = 7) -> IfsSystem:
    """Four centers on the plane x = -1 of R^3, one unit apart, inside a ball of diameter 2.

    The first-level pieces are 0.1 apart and the S_0 projection gap is 1 - r - r0.
    """
    kernel = HTypeKernel(group)
    backend = MetricBackend(group, MetricKind.BOX, kernel=kernel)
    coset = VerticalCoset(group, [-1.0, 0.0, 0.0], 1.0)
    cone = DilationCone(backend, [-1.0, 0.0, 0.0], 1.0, 0)
    ball = Ball(np.array([-1.0, 0.0, 0.0]), 1.0)
    params = make_parameters(TOY_EPSILON, TOY_R, 4, group.Q, 1.25, 1.0, ball.diameter, RadiusRule.BALANCED)
    return IfsSystem(
        group=group,
        backend=backend,
        kernel=kernel,
        coset=coset,
        cone=cone,
        ball=ball,
        centers=TOY_CENTERS,
        params=params,
        group_config=GroupConfig(preset=GroupPreset.ABELIAN_3).model_dump(mode="json"),
        seed=seed,
    )


@pytest.fixture
def toy_system(abelian3):
    return build_toy_system(abelian3)


@pytest.fixture(scope="session")
def heisenberg_run():
    return load_config(HEISENBERG_CONFIG)


@pytest.fixture(scope="session")
def heisenberg_system(heisenberg_run):
    """The shipped first-Heisenberg configuration, built with default settings."""
    return construct_system(heisenberg_run)
