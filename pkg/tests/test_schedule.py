from __future__ import annotations

import numpy as np
import pytest

from cloudopt.schedule import ScheduleError, SequenceSchedule, StepSchedule, drift_term, validate


def test_step_values(default_schedule):
    assert default_schedule.step(1) == (0.1, 0.01)
    alpha, gamma = default_schedule.step(1000)
    assert alpha == pytest.approx(0.1 * 1000**-0.3)
    assert gamma == pytest.approx(0.01 * 1000**-0.52)


def test_vectorized_matches_scalar(default_schedule):
    ks = np.array([1.0, 10.0, 12345.0])
    np.testing.assert_allclose(default_schedule.alphas(ks), [default_schedule.step(int(k))[0] for k in ks], rtol=1e-15)
    np.testing.assert_allclose(default_schedule.gammas(ks), [default_schedule.step(int(k))[1] for k in ks], rtol=1e-15)


def test_index_starts_at_one(default_schedule):
    with pytest.raises(ScheduleError):
        default_schedule.step(0)
    with pytest.raises(ScheduleError):
        default_schedule.alphas(np.array([0.0, 1.0]))


def test_nonpositive_scales_rejected():
    with pytest.raises(ScheduleError):
        StepSchedule(0.0, 0.01, 0.3, 0.52)


def test_default_schedule_is_valid(default_schedule):
    report = validate(default_schedule, 100_000)
    assert report.valid
    assert report.summable_sigma
    assert [c.index for c in report.conditions] == [1, 2, 3, 4]


def test_drift_term_decreases(default_schedule):
    ks = np.array([1e3, 1e4, 1e5, 1e6])
    d = drift_term(default_schedule, ks)
    assert np.all(np.diff(d) < 0)


@pytest.mark.parametrize(
    "c1, c2, failing",
    [
        (0.3, 0.3, [2]),  # gamma/alpha does not vanish
        (0.0, 0.52, [3]),  # alpha does not vanish
        (0.5, 0.6, [1, 4]),  # sum gamma alpha converges
    ],
)
def test_invalid_schedules_name_failing_conditions(c1, c2, failing):
    report = validate(StepSchedule(0.1, 0.01, c1, c2), 100_000)
    assert not report.valid
    assert report.failures == failing


def test_short_horizon_rejected(default_schedule):
    with pytest.raises(ScheduleError):
        validate(default_schedule, 5)


def test_sequence_schedule_uses_local_exponents():
    sched = SequenceSchedule(lambda k: 0.1 * k**-0.3, lambda k: 0.01 * k**-0.52)
    report = validate(sched, 10_000)
    assert report.valid
    with pytest.raises(ScheduleError):
        SequenceSchedule(lambda k: -1.0, lambda k: 1.0).step(1)
