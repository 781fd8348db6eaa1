from __future__ import annotations

import math

import numpy as np
import pytest

from cloudopt.checks import noise_moment_checks
from cloudopt.privacy import (
    BLOCK_SIZE,
    CONSTRAINT_STREAM,
    NoiseBank,
    NoiseChannel,
    PrivacyError,
    PrivacyPolicy,
    adjacency,
    calibrate,
    draw,
    kappa,
    noise_variance_bound,
    q_function,
    q_inverse,
    sensitivities,
)

LN2 = math.log(2.0)


def _by_stream(channels):
    return {ch.stream: ch for ch in channels}


def test_laplace_calibration_matches_published_scales(reference_spec):
    sens = sensitivities(reference_spec, 1.0, 1)
    channels = _by_stream(calibrate(PrivacyPolicy("laplace", LN2), sens))
    assert channels[1].scale == pytest.approx(5.771, rel=1e-4)
    assert channels[1].variance == pytest.approx(66.60, rel=1e-4)
    assert channels[2].scale == pytest.approx(2.885, rel=1e-3)
    assert channels[CONSTRAINT_STREAM].scale == pytest.approx(57.45, rel=1e-4)
    assert channels[CONSTRAINT_STREAM].variance == pytest.approx(6.600e3, rel=1e-3)
    assert channels[CONSTRAINT_STREAM].shape == (6,)
    assert channels[4].shape == (6, 2)


def test_gaussian_calibration_matches_published_variances(reference_spec):
    assert kappa(0.01, LN2) == pytest.approx(3.559, abs=1e-3)
    sens = sensitivities(reference_spec, 1.0, 2)
    channels = _by_stream(calibrate(PrivacyPolicy("gaussian", LN2, 0.01), sens))
    assert channels[1].variance == pytest.approx(101.3, rel=5e-4)
    assert channels[2].variance == pytest.approx(50.66, rel=5e-4)
    assert channels[CONSTRAINT_STREAM].variance == pytest.approx(4.073e4, rel=5e-3)


def test_no_mechanism_has_no_channels(reference_spec):
    sens = sensitivities(reference_spec, 1.0, 1)
    assert calibrate(PrivacyPolicy("none"), sens) == ()
    assert not NoiseBank.for_policy(reference_spec, None, 0).active


def test_mechanism_norm_mismatch_rejected(reference_spec):
    sens = sensitivities(reference_spec, 1.0, 2)
    with pytest.raises(PrivacyError):
        calibrate(PrivacyPolicy("laplace", LN2), sens)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"mechanism": "laplace", "epsilon": 0.0},
        {"mechanism": "laplace", "epsilon": 1.0, "delta": 0.1},
        {"mechanism": "gaussian", "epsilon": 1.0, "delta": 0.0},
        {"mechanism": "gaussian", "epsilon": 1.0, "delta": 0.5},
        {"mechanism": "laplace", "epsilon": 1.0, "bound": 0.0},
        {"mechanism": "exponential"},
    ],
)
def test_invalid_policies(kwargs):
    with pytest.raises(PrivacyError):
        PrivacyPolicy(**kwargs)


def test_sensitivities_scale_with_bound(reference_spec):
    one = sensitivities(reference_spec, 1.0, 1)
    two = sensitivities(reference_spec, 2.0, 1)
    assert two.delta_g == pytest.approx(2 * one.delta_g)
    assert two.delta_blocks[1] == pytest.approx(2 * one.delta_blocks[1])
    assert one.scaled(2.0).delta_blocks == two.delta_blocks


def test_q_function_round_trip():
    for d in (1e-6, 0.01, 0.1, 0.3, 0.49):
        assert abs(q_function(q_inverse(d)) - d) <= 1e-12
    assert q_function(0.0) == 0.5
    with pytest.raises(PrivacyError):
        q_inverse(0.0)


def test_draws_are_addressed_by_seed_stream_and_k():
    ch = NoiseChannel("laplace", 3.0, (2, 3), stream=4, seed=11)
    ks = [BLOCK_SIZE + 1, 0, BLOCK_SIZE - 1, BLOCK_SIZE, 7]
    direct = {k: draw(ch, k) for k in ks}
    bank = NoiseBank([ch])
    for k in reversed(ks):
        np.testing.assert_array_equal(bank.draw(4, k), direct[k])
    assert not np.array_equal(draw(ch, 1), draw(ch, 2))
    assert not np.array_equal(draw(ch, 1), draw(ch.with_seed(12), 1))
    assert draw(ch, 5).shape == (2, 3)


def test_zero_scale_channel_draws_zeros():
    ch = NoiseChannel("gaussian", 0.0, (3,), stream=0)
    assert np.all(draw(ch, 42) == 0.0)


def test_noise_moments():
    results = noise_moment_checks(200_000, seed=5)
    assert all(r.passed for r in results), [r.detail for r in results]


def test_constraint_noise_toggle(reference_spec):
    policy = PrivacyPolicy("laplace", LN2)
    assert NoiseBank.for_policy(reference_spec, policy, 0).constraint(1) is not None
    assert NoiseBank.for_policy(reference_spec, policy, 0, noisy_dual=False).constraint(1) is None


def test_noise_variance_bound(reference_spec, reference_dual):
    policy = PrivacyPolicy("laplace", LN2)
    bank = NoiseBank.for_policy(reference_spec, policy, 0)
    r = reference_dual.radius
    agents = sum(2 * 2 * (d / LN2) ** 2 for d in (4, 2, 2, 2, 2, 4, 2, 4, 2, 2))
    expected = r * r * agents + 6 * 2 * (39.82 / LN2) ** 2
    assert noise_variance_bound(bank, r) == pytest.approx(expected, rel=1e-12)
    quiet = NoiseBank.for_policy(reference_spec, policy, 0, noisy_dual=False)
    assert noise_variance_bound(quiet, r) == pytest.approx(r * r * agents, rel=1e-12)


def test_adjacency():
    a = np.zeros(4)
    assert adjacency(a, np.array([0.5, 0.5, 0.0, 0.0]), 1.0, 1)
    assert not adjacency(a, np.array([0.6, 0.5, 0.0, 0.0]), 1.0, 1)
    assert adjacency(a, np.array([0.6, 0.5, 0.0, 0.0]), 1.0, 2)
    with pytest.raises(PrivacyError):
        adjacency(a, np.zeros(3), 1.0, 1)
