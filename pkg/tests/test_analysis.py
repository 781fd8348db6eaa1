from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.special import zeta

from cloudopt.analysis import (
    AnalysisConfig,
    build_analysis_config,
    choose_theta,
    convergence_probability,
    error_bound_from_terms,
    expected_error_bound,
    laplace_variance_aggregate,
    sigma_ratio,
    sigma_tail_bound,
    sigma_total_bound,
    sigma_total_bound_scaled,
    supermartingale_decay_check,
    terms_at,
    tradeoff_curve,
)
from cloudopt.geometry import z_diameter
from cloudopt.privacy import NoiseBank, PrivacyError, PrivacyPolicy, noise_variance_bound, sensitivities
from cloudopt.schedule import ScheduleError, StepSchedule
from cloudopt.solver import SaddleMap, estimate_saddle_lipschitz

LN2 = math.log(2.0)


def _cfg(**kwargs) -> AnalysisConfig:
    base = {"lipschitz_g": 1.0, "m_xi": 1.0, "d_z": 1.0, "k_w": 3.0, "theta": 0.5}
    base.update(kwargs)
    return AnalysisConfig(**base)


@pytest.mark.parametrize("theta", [0.0, 1.0, -0.1])
def test_theta_must_lie_in_open_unit_interval(theta):
    with pytest.raises(ValueError):
        _cfg(theta=theta)


def test_negative_noise_bound_rejected():
    with pytest.raises(ValueError):
        _cfg(k_w=-1.0)


def test_drift_vanishes_at_first_step_and_for_constant_alpha(default_schedule):
    terms = terms_at(_cfg(), default_schedule, [1.0, 2.0, 10.0])
    assert terms.rho[0] == 0.0
    assert np.all(terms.rho[1:] > 0)
    flat = terms_at(_cfg(), StepSchedule(0.1, 0.01, 0.0, 0.52), [1.0, 2.0, 10.0])
    assert np.all(flat.rho == 0.0)


def test_sigma_total_matches_zeta_sum():
    sched = StepSchedule(0.1, 0.5, 0.0, 0.9)
    cfg = _cfg(k_w=3.0)
    total = sigma_total_bound(cfg, sched)
    assert total == pytest.approx(0.25 * 3.0 * zeta(1.8, 1), rel=1e-12)
    # Euler-Maclaurin estimate of zeta(1.8)
    n = 100_000
    ks = np.arange(1, n + 1, dtype=float)
    em = math.fsum((ks**-1.8).tolist()) + n**-0.8 / 0.8 - 0.5 * n**-1.8
    assert total == pytest.approx(0.75 * em, rel=1e-9)


def test_sigma_total_rejects_divergent_exponents():
    with pytest.raises(ScheduleError):
        sigma_total_bound(_cfg(), StepSchedule(0.1, 0.01, 0.3, 0.4))


def test_sigma_total_drift_terms_carry_no_m_xi():
    sched = StepSchedule(alpha_bar=0.01, gamma_bar=0.1, c1=0.02, c2=0.52)
    cfg = _cfg(m_xi=30.0, k_w=5.0)
    noise = 0.1**2 * 5.0 * zeta(1.04, 1)
    drift = 2.0 * 0.02**2 / 1e-3 * zeta(1.46, 1) + 2.0 * (0.02**3 + 0.02**2) / 1e-3 * zeta(2.46, 1)
    total = sigma_total_bound(cfg, sched)
    assert total == pytest.approx(noise + drift, rel=1e-12)
    assert total == pytest.approx(4.6135, rel=1e-3)
    assert sigma_tail_bound(cfg, sched, 1) == total
    scaled = sigma_total_bound_scaled(cfg, sched)
    assert scaled == pytest.approx(noise + 900.0 * drift, rel=1e-12)
    assert sigma_total_bound(cfg, sched, scale_by_m_xi=True) == scaled


def test_tail_bound_starts_at_total_and_shrinks(default_schedule):
    cfg = _cfg(k_w=100.0)
    total = sigma_total_bound(cfg, default_schedule)
    assert sigma_tail_bound(cfg, default_schedule, 1) == total
    tails = [sigma_tail_bound(cfg, default_schedule, k) for k in (1, 10, 100, 1000)]
    assert all(b <= a for a, b in zip(tails, tails[1:]))


def test_error_bound_matches_direct_recursion():
    rng = np.random.default_rng(0)
    tau = rng.uniform(0.0, 0.5, size=300)
    sigma = rng.uniform(0.0, 2.0, size=300)
    e = 4.0
    for n in range(299):
        e = (1.0 - tau[n]) * e + sigma[n]
    value, clipped = error_bound_from_terms(tau, sigma, 2.0, 300)
    assert not clipped
    assert value == pytest.approx(e, rel=1e-10)


def test_error_bound_geometric_and_first_step():
    tau = np.full(10, 0.5)
    sigma = np.zeros(10)
    assert error_bound_from_terms(tau, sigma, 3.0, 1) == (9.0, False)
    value, _ = error_bound_from_terms(tau, sigma, 3.0, 6)
    assert value == pytest.approx(9.0 * 0.5**5)
    _, clipped = error_bound_from_terms(np.array([1.5, 0.5]), np.zeros(2), 1.0, 3)
    assert clipped
    with pytest.raises(ValueError):
        error_bound_from_terms(tau, sigma, 3.0, 20)


def test_expected_error_bound_first_step(default_schedule):
    cfg = _cfg(d_z=7.0)
    assert expected_error_bound(cfg, default_schedule, 1) == 49.0


def test_convergence_probability_limits(default_schedule):
    cfg = _cfg()
    assert convergence_probability(cfg, default_schedule, 1.0, 100, e_k=0.0, tail=0.0) == 1.0
    assert convergence_probability(cfg, default_schedule, 1.0, 100, e_k=10.0, tail=0.0) == -9.0
    with pytest.raises(ValueError):
        convergence_probability(cfg, default_schedule, 0.0, 100, e_k=0.0, tail=0.0)


def test_tradeoff_follows_inverse_square(reference_spec, reference_dual, default_schedule):
    sens = sensitivities(reference_spec, 1.0, 1)
    cfg = _cfg(radius=reference_dual.radius)
    points = tradeoff_curve(cfg, default_schedule, sens, [0.5, 1.0, 2.0])
    assert points[0].k_w == pytest.approx(4.0 * points[1].k_w)
    assert points[2].k_w == pytest.approx(0.25 * points[1].k_w)
    assert points[1].penalty == pytest.approx(0.01**2 * points[1].k_w)
    with pytest.raises(PrivacyError):
        tradeoff_curve(cfg, default_schedule, sens, [0.0])


def test_variance_aggregate_matches_calibrated_bank(reference_spec, reference_dual):
    sens = sensitivities(reference_spec, 1.0, 1)
    bank = NoiseBank.for_policy(reference_spec, PrivacyPolicy("laplace", LN2), 0)
    w = laplace_variance_aggregate(sens, reference_dual.radius)
    assert w / LN2**2 == pytest.approx(noise_variance_bound(bank, reference_dual.radius), rel=1e-12)
    with pytest.raises(PrivacyError):
        laplace_variance_aggregate(sensitivities(reference_spec, 1.0, 2), reference_dual.radius)


def test_build_analysis_config(reference_spec, reference_dual, default_schedule):
    bank = NoiseBank.for_policy(reference_spec, PrivacyPolicy("laplace", LN2), 0)
    cfg, choice = build_analysis_config(reference_spec, reference_dual, default_schedule, 40.0, bank)
    assert choice is not None and cfg.theta == choice.theta
    assert cfg.k_w == noise_variance_bound(bank, reference_dual.radius)
    assert cfg.d_z == z_diameter(reference_spec, reference_dual)
    quiet, none = build_analysis_config(reference_spec, reference_dual, default_schedule, 40.0, theta=0.25)
    assert none is None
    assert quiet.k_w == 0.0 and quiet.theta == 0.25


def test_choose_theta_small_lipschitz(default_schedule):
    choice = choose_theta(default_schedule, 1.0)
    assert choice.threshold_m == 1.0
    assert choice.threshold_m_hat == 1.0
    assert choice.theta == pytest.approx((1.0 - 0.001 - 0.1 - 0.02) / 2.0)


def test_choose_theta_large_lipschitz(default_schedule):
    choice = choose_theta(default_schedule, 40.0)
    assert choice.threshold_m > 1e9
    assert 0.0 < choice.theta <= 0.5
    assert choice.margin == pytest.approx(2.0 * choice.theta)


def test_choose_theta_without_admissible_k():
    with pytest.raises(ScheduleError):
        choose_theta(StepSchedule(0.1, 0.01, 0.3, 0.3), 100.0)


def test_sigma_over_tau_decreases(default_schedule):
    cfg = _cfg(lipschitz_g=40.0, m_xi=30.0, k_w=1e4, theta=0.1)
    early, late = sigma_ratio(cfg, default_schedule, [1e3, 1e6])
    assert late < early


def test_sigma_over_tau_drops_tenfold_without_noise(reference_spec, reference_dual, default_schedule):
    lipschitz_g = estimate_saddle_lipschitz(SaddleMap(reference_spec, reference_dual), 500, seed=0)
    cfg, _ = build_analysis_config(reference_spec, reference_dual, default_schedule, lipschitz_g)
    assert cfg.k_w == 0.0
    early, late = sigma_ratio(cfg, default_schedule, [1e3, 1e6])
    assert late < 0.1 * early


def test_sigma_over_tau_decreases_with_calibrated_noise(reference_spec, reference_dual, default_schedule):
    lipschitz_g = estimate_saddle_lipschitz(SaddleMap(reference_spec, reference_dual), 500, seed=0)
    bank = NoiseBank.for_policy(reference_spec, PrivacyPolicy("laplace", LN2), 0)
    cfg, _ = build_analysis_config(reference_spec, reference_dual, default_schedule, lipschitz_g, bank)
    assert cfg.k_w > 0
    ratios = sigma_ratio(cfg, default_schedule, [1e3, 1e4, 1e5, 1e6])
    assert np.all(np.diff(ratios) < 0)


def test_decay_geometric_decay_passes():
    k = np.arange(1, 61, dtype=float)
    report = supermartingale_decay_check(np.full(60, 0.5), 2.0**-k, trials=500, seed=0)
    assert report.passed, report.detail
    assert report.means[0] == 1.0
    assert report.means.size == 61


def test_decay_zero_tau_flagged():
    report = supermartingale_decay_check(np.zeros(50), np.zeros(50), trials=10, seed=0)
    assert not report.hypotheses_ok
    assert not report.passed


def test_decay_harmonic_sequences():
    k = np.arange(1, 10_001, dtype=float)
    report = supermartingale_decay_check(1.0 / k, 1.0 / k**2, trials=200, seed=1)
    assert report.passed, report.detail
    assert report.final_mean < 0.01
