from __future__ import annotations

from dataclasses import replace

import pytest

from cloudopt.config import DEFAULT_CONFIG, RunConfig, ScheduleConfig, save_config
from cloudopt.geometry import compute_dual_radius
from cloudopt.problem import build_reference_problem, build_scalar_problem
from cloudopt.schedule import StepSchedule

# smaller regularization lets the scalar instance settle within 1e-3 of its KKT point
SCALAR_SCHEDULE = ScheduleConfig(alpha_bar=0.005, gamma_bar=0.5, c1=0.3, c2=0.52)


@pytest.fixture(scope="session")
def reference_spec():
    return build_reference_problem()


@pytest.fixture(scope="session")
def reference_dual(reference_spec):
    return compute_dual_radius(reference_spec)


@pytest.fixture(scope="session")
def scalar_spec():
    return build_scalar_problem()


@pytest.fixture(scope="session")
def scalar_dual(scalar_spec):
    return compute_dual_radius(scalar_spec)


@pytest.fixture
def default_schedule():
    return StepSchedule(alpha_bar=0.1, gamma_bar=0.01, c1=0.3, c2=0.52)


@pytest.fixture
def scalar_schedule():
    return StepSchedule.from_config(SCALAR_SCHEDULE)


@pytest.fixture
def scalar_config(tmp_path) -> RunConfig:
    cfg = replace(
        DEFAULT_CONFIG,
        seeds=(0, 1),
        problem=replace(DEFAULT_CONFIG.problem, name="scalar"),
        schedule=SCALAR_SCHEDULE,
        solver=replace(DEFAULT_CONFIG.solver, iterations=2000),
        reference=replace(DEFAULT_CONFIG.reference, tikhonov_iters=20_000, refine_iters=20_000, tolerance=1e-6),
        analysis=replace(
            DEFAULT_CONFIG.analysis, probability_k=1000, lipschitz_samples=500, checkpoints=(100, 1000)
        ),
        output=replace(DEFAULT_CONFIG.output, directory=str(tmp_path / "runs")),
    )
    return cfg


@pytest.fixture
def scalar_config_file(tmp_path, scalar_config):
    path = tmp_path / "scalar.yaml"
    save_config(scalar_config, path)
    return path
