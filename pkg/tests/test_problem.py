from __future__ import annotations

import numpy as np
import pytest

from cloudopt.config import AgentTermConfig, ConstraintRowConfig, ProblemConfig
from cloudopt.geometry import box_minimizer
from cloudopt.problem import (
    BoxSet,
    ProblemError,
    ProblemSpec,
    build_problem,
    build_reference_problem,
    check_gradients,
    estimate_lipschitz,
    fourth_power_distance,
    quadratic_constraint,
    quadratic_distance,
)


def test_reference_instance_shape(reference_spec):
    assert reference_spec.num_agents == 10
    assert reference_spec.n == 20
    assert reference_spec.m == 6
    assert [b.stop - b.start for b in reference_spec.blocks] == [2] * 10


def test_reference_objective_at_origin_and_minimum(reference_spec):
    assert reference_spec.objective_value(np.zeros(20)) == 4545.0
    x_star, f_star = box_minimizer(reference_spec)
    assert reference_spec.contains(x_star)
    assert f_star == pytest.approx(-122.0, abs=1e-6)


def test_reference_slater_margin(reference_spec):
    assert reference_spec.slater_margin() == pytest.approx(10.0)


def test_published_and_analytic_constants():
    published = build_reference_problem("published").constraint
    analytic = build_reference_problem("analytic").constraint
    assert published.lipschitz_g == {1: 39.82, 2: 56.71}
    assert published.lipschitz_blocks[(1, 1)] == 4.0
    assert published.lipschitz_blocks[(2, 1)] == 2.0
    assert published.lipschitz_blocks[(6, 2)] == pytest.approx(np.sqrt(8.0))
    # agent 4's second component enters two quadratic rows
    assert analytic.lipschitz_blocks[(4, 1)] == 4.0
    assert analytic.lipschitz_g[1] == pytest.approx(40.0)


def test_unknown_constants_source_rejected():
    with pytest.raises(ProblemError):
        build_reference_problem("guessed")


def test_sampled_lipschitz_stays_below_published_constant(reference_spec):
    domain = BoxSet(reference_spec.lower, reference_spec.upper)
    est = estimate_lipschitz(reference_spec.constraint.value, domain, p=1, samples=2000, seed=0)
    assert 0.0 < est <= 39.82 * (1 + 1e-9)


def test_gradients_match_finite_differences(reference_spec, scalar_spec):
    for spec in (reference_spec, scalar_spec):
        report = check_gradients(spec, samples=20, seed=1)
        assert report.passed, report.flagged
        assert max(report.errors.values()) < 1e-5


def test_fourth_power_lipschitz_over_box():
    box = BoxSet((-10.0, -10.0), (10.0, 10.0))
    term = fourth_power_distance(5, (-3.0, -3.0), box)
    assert term.lipschitz_grad == pytest.approx(12.0 * (13.0**2 + 13.0**2))


def test_scalar_instance():
    spec = build_problem(ProblemConfig(name="scalar"))
    assert spec.n == 1 and spec.m == 1
    assert spec.constraint.value(np.array([1.0]))[0] == 0.0
    assert spec.slater_margin() == pytest.approx(4.0)


def test_partition_must_cover_columns():
    boxes = (BoxSet((-1.0,), (1.0,)), BoxSet((-1.0,), (1.0,)))
    good = quadratic_constraint(np.zeros((1, 2)), np.array([[1.0, 1.0]]), np.array([1.0]), boxes)
    bad = type(good)(good.m, good.value, good.jacobian, (slice(0, 1), slice(0, 2)))
    objectives = (quadratic_distance(1, (0.0,)), quadratic_distance(2, (0.0,)))
    with pytest.raises(ProblemError):
        ProblemSpec(objectives, boxes, bad, np.zeros(2))


def test_slater_point_must_be_strictly_feasible():
    boxes = (BoxSet((-10.0,), (10.0,)),)
    g = quadratic_constraint(np.zeros((1, 1)), np.array([[-1.0]]), np.array([-1.0]), boxes)
    with pytest.raises(ProblemError):
        ProblemSpec((quadratic_distance(1, (0.0,)),), boxes, g, np.array([1.0]))
    with pytest.raises(ProblemError):
        ProblemSpec((quadratic_distance(1, (0.0,)),), boxes, g, np.array([20.0]))


def test_box_rejects_inverted_bounds():
    with pytest.raises(ProblemError):
        BoxSet((1.0,), (0.0,))


def test_negative_quadratic_coefficient_rejected():
    boxes = (BoxSet((-1.0,), (1.0,)),)
    with pytest.raises(ProblemError):
        quadratic_constraint(np.array([[-1.0]]), np.zeros((1, 1)), np.array([1.0]), boxes)


def test_custom_problem_from_config():
    cfg = ProblemConfig(
        name="custom",
        agents=(
            AgentTermConfig(kind="quadratic_distance", lower=(-5.0,), upper=(5.0,), center=(2.0,)),
            AgentTermConfig(kind="linear", lower=(-5.0,), upper=(5.0,), weights=(1.0,)),
        ),
        constraints=(ConstraintRowConfig(offset=3.0, linear=((1, 1, 1.0), (2, 1, 1.0))),),
    )
    spec = build_problem(cfg)
    assert spec.n == 2 and spec.m == 1
    assert spec.constraint.value(np.array([1.0, 1.0]))[0] == pytest.approx(-1.0)
    assert spec.objective_grad(np.array([0.0, 0.0])) == pytest.approx([-4.0, 1.0])


def test_custom_problem_unknown_agent_rejected():
    cfg = ProblemConfig(
        name="custom",
        agents=(AgentTermConfig(lower=(-1.0,), upper=(1.0,)),),
        constraints=(ConstraintRowConfig(offset=1.0, linear=((3, 1, 1.0),)),),
    )
    with pytest.raises(ProblemError):
        build_problem(cfg)
