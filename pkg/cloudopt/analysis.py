from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import zeta

from .geometry import DualSet, z_diameter, z_sup_norm
from .privacy import NoiseBank, PrivacyError, SensitivityBundle, noise_variance_bound
from .problem import ProblemSpec
from .schedule import Schedule, ScheduleError, StepSchedule

log = logging.getLogger(__name__)

THETA_GRID_DECADES = 60.0
THETA_GRID_STEP = 0.01  # decades between grid points
_BELOW_ONE = float(np.nextafter(1.0, 0.0))


@dataclass(frozen=True)
class AnalysisConfig:
    lipschitz_g: float  # L_G
    m_xi: float  # bound on |xi_k|
    d_z: float  # diameter of Z
    k_w: float  # bound on E|w(k)|^2
    theta: float
    radius: float = 1.0
    noisy_dual: bool = True

    def __post_init__(self) -> None:
        if not (self.lipschitz_g > 0 and self.m_xi > 0 and self.d_z > 0):
            raise ValueError("L_G, M_xi and D_z must be positive")
        if self.k_w < 0:
            raise ValueError("K_w must be nonnegative")
        if not (0.0 < self.theta < 1.0):
            raise ValueError(f"theta must lie in (0, 1), got {self.theta!r}")


@dataclass(frozen=True)
class ThetaChoice:
    theta: float
    threshold_m: float  # first k with 1 - ga - (g/a) L^2 - 2 g L > 0
    threshold_m_hat: float  # first k with gamma_k alpha_k <= 1
    margin: float  # the positive slack at threshold_m


def _margin(schedule: Schedule, lipschitz_g: float, ks: np.ndarray) -> np.ndarray:
    a = schedule.alphas(ks)
    g = schedule.gammas(ks)
    return 1.0 - g * a - (g / a) * lipschitz_g**2 - 2.0 * g * lipschitz_g


def choose_theta(schedule: Schedule, lipschitz_g: float) -> ThetaChoice:
    """
    Half the contraction slack at the first k (on a 0.01-decade grid up to 1e60) where
    the slack turns positive; theta_k (1 + gamma_k alpha_k) < 1 holds from there on.
    """
    ks = 10.0 ** np.arange(0.0, THETA_GRID_DECADES + THETA_GRID_STEP / 2, THETA_GRID_STEP)
    s = _margin(schedule, lipschitz_g, ks)
    hits = np.flatnonzero(s > 0)
    if hits.size == 0:
        raise ScheduleError(f"no admissible theta for L_G={lipschitz_g:g} up to k=1e{THETA_GRID_DECADES:g}")
    i = int(hits[0])
    prod = schedule.alphas(ks) * schedule.gammas(ks)
    j = np.flatnonzero(prod <= 1.0)
    m_hat = float(ks[j[0]]) if j.size else math.inf
    return ThetaChoice(theta=float(s[i]) / 2.0, threshold_m=float(ks[i]), threshold_m_hat=m_hat, margin=float(s[i]))


def build_analysis_config(
    spec: ProblemSpec,
    dual_set: DualSet,
    schedule: Schedule,
    lipschitz_g: float,
    noise: NoiseBank | None = None,
    theta: float | None = None,
) -> tuple[AnalysisConfig, ThetaChoice | None]:
    choice = None
    if theta is None:
        choice = choose_theta(schedule, lipschitz_g)
        theta = choice.theta
    k_w = noise_variance_bound(noise, dual_set.radius) if noise is not None else 0.0
    cfg = AnalysisConfig(
        lipschitz_g=lipschitz_g,
        m_xi=z_sup_norm(spec, dual_set),
        d_z=z_diameter(spec, dual_set),
        k_w=k_w,
        theta=theta,
        radius=dual_set.radius,
        noisy_dual=noise.noisy_dual if noise is not None else True,
    )
    return cfg, choice


@dataclass(frozen=True)
class SequenceTerms:
    k: np.ndarray
    theta_k: np.ndarray
    rho: np.ndarray
    tau: np.ndarray
    sigma: np.ndarray


def _relative_drop(schedule: Schedule, ks: np.ndarray) -> np.ndarray:
    # (alpha_{k-1} - alpha_k) / alpha_k, taken as 0 at k = 1
    if isinstance(schedule, StepSchedule):
        safe = np.maximum(ks, 2.0)
        out = np.expm1(-schedule.c1 * np.log1p(-1.0 / safe))
    else:
        a = schedule.alphas(ks)
        out = (schedule.alphas(np.maximum(ks - 1.0, 1.0)) - a) / a
    return np.where(ks > 1, out, 0.0)


def terms_at(cfg: AnalysisConfig, schedule: Schedule, ks: Sequence[float] | np.ndarray) -> SequenceTerms:
    ks = np.asarray(ks, dtype=float)
    if ks.size and ks.min() < 1:
        raise ScheduleError("sequence terms start at k = 1")
    a = schedule.alphas(ks)
    g = schedule.gammas(ks)
    ga = g * a
    lg = cfg.lipschitz_g
    theta_k = 1.0 - ga * (2.0 - ga - (g / a) * lg**2 - 2.0 * g * lg)
    rho = cfg.m_xi**2 * _relative_drop(schedule, ks) ** 2 * (1.0 + ga) / ga
    tau = ga * cfg.theta
    sigma = theta_k * rho + g * g * cfg.k_w
    return SequenceTerms(ks, theta_k, rho, tau, sigma)


def sequence_terms(cfg: AnalysisConfig, schedule: Schedule, k_max: int) -> SequenceTerms:
    if k_max < 2:
        raise ValueError("k_max must be >= 2")
    return terms_at(cfg, schedule, np.arange(1, k_max + 1, dtype=float))


def sigma_ratio(cfg: AnalysisConfig, schedule: Schedule, ks: Sequence[float] | np.ndarray) -> np.ndarray:
    t = terms_at(cfg, schedule, ks)
    return t.sigma / t.tau


def error_bound_from_terms(tau: np.ndarray, sigma: np.ndarray, d_z: float, k: int) -> tuple[float, bool]:
    """
    E_k for E_1 = D_z^2, E_{n+1} = (1 - tau_n) E_n + sigma_n, with tau[0] = tau_1.

    Products are accumulated as log-sums. tau outside (0, 1) is clipped; the flag
    reports whether that happened.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if k == 1:
        return d_z * d_z, False
    t = np.asarray(tau, dtype=float)[: k - 1]
    s = np.asarray(sigma, dtype=float)[: k - 1]
    if t.size < k - 1 or s.size < k - 1:
        raise ValueError(f"need {k - 1} terms, got tau={t.size}, sigma={s.size}")
    clipped = bool(np.any((t <= 0.0) | (t >= 1.0)))
    logs = np.log1p(-np.clip(t, 0.0, _BELOW_ONE))
    cum = np.cumsum(logs)
    total = cum[-1]
    value = math.fsum([math.exp(total) * d_z * d_z, *(s * np.exp(total - cum)).tolist()])
    return value, clipped


def expected_error_bound(cfg: AnalysisConfig, schedule: Schedule, k: int) -> float:
    if k == 1:
        return cfg.d_z**2
    terms = terms_at(cfg, schedule, np.arange(1, k, dtype=float))
    value, clipped = error_bound_from_terms(terms.tau, terms.sigma, cfg.d_z, k)
    if clipped:
        log.warning("tau_n left (0, 1) before k=%d; clipped", k)
    return value


def zeta_arguments(schedule: StepSchedule) -> tuple[float, float, float]:
    s = schedule.c1 + schedule.c2
    return 2.0 * schedule.c2, 2.0 - s, 3.0 - s


def sigma_total_bound(cfg: AnalysisConfig, schedule: Schedule, *, scale_by_m_xi: bool = False) -> float:
    """
    Approximate bound on sum_{k>=1} sigma_k from zeta sums (truncated power series).

    gamma_bar^2 K_w zeta(2 c2) + 2 c1^2 / (alpha_bar gamma_bar) zeta(2 - c1 - c2)
    + 2 (c1^3 + c1^2) / (alpha_bar gamma_bar) zeta(3 - c1 - c2), with the drift terms
    free of M_xi. `scale_by_m_xi=True` multiplies them by the M_xi^2 that rho_k carries;
    see `sigma_total_bound_scaled`.
    """
    if not isinstance(schedule, StepSchedule):
        raise ScheduleError("the zeta bound needs a power-law schedule")
    args = zeta_arguments(schedule)
    if min(args) <= 1.0:
        raise ScheduleError(f"zeta arguments {args} must exceed 1 (sum of sigma_k diverges)")
    c1 = schedule.c1
    ab = schedule.alpha_bar * schedule.gamma_bar
    noise_part = schedule.gamma_bar**2 * cfg.k_w * float(zeta(args[0], 1))
    drift = 2.0 * c1**2 / ab * float(zeta(args[1], 1)) + 2.0 * (c1**3 + c1**2) / ab * float(zeta(args[2], 1))
    if scale_by_m_xi:
        drift *= cfg.m_xi**2
    return noise_part + drift


def sigma_total_bound_scaled(cfg: AnalysisConfig, schedule: Schedule) -> float:
    """The zeta bound with the drift terms scaled by M_xi^2, consistent with `terms_at`."""
    return sigma_total_bound(cfg, schedule, scale_by_m_xi=True)


def sigma_tail_bound(cfg: AnalysisConfig, schedule: Schedule, from_k: int, *, scale_by_m_xi: bool = False) -> float:
    """Bound on sum_{k>=from_k} sigma_k: total bound minus the exact first from_k - 1 terms, floored at 0."""
    if from_k < 1:
        raise ValueError("from_k must be >= 1")
    total = sigma_total_bound(cfg, schedule, scale_by_m_xi=scale_by_m_xi)
    if from_k == 1:
        return total
    head = terms_at(cfg, schedule, np.arange(1, from_k, dtype=float)).sigma
    return max(total - math.fsum(head.tolist()), 0.0)


def convergence_probability(
    cfg: AnalysisConfig,
    schedule: Schedule,
    eps_ball: float,
    k: int,
    e_k: float | None = None,
    *,
    tail: float | None = None,
) -> float:
    """
    Lower bound on P(|z(j) - xi_{j-1}|^2 <= eps_ball for all j >= k); may be negative.
    """
    if not eps_ball > 0:
        raise ValueError("eps_ball must be positive")
    if e_k is None:
        e_k = expected_error_bound(cfg, schedule, k)
    if tail is None:
        tail = sigma_tail_bound(cfg, schedule, k)
    return 1.0 - (e_k + tail) / eps_ball


@dataclass(frozen=True)
class TradeoffPoint:
    epsilon: float
    k_w: float
    penalty: float  # gamma_1^2 W / epsilon^2


def laplace_variance_aggregate(sens: SensitivityBundle, radius: float, noisy_dual: bool = True) -> float:
    """W: the K_w of the Laplace mechanism at epsilon = 1."""
    if sens.p != 1:
        raise PrivacyError("the trade-off aggregate is defined for the Laplace mechanism (p = 1)")
    total = 0.0
    for i, d in sorted(sens.delta_blocks.items()):
        total += radius * radius * sens.block_dims[i] * 2.0 * d * d
    if noisy_dual:
        total += sens.m * 2.0 * sens.delta_g**2
    return total


def tradeoff_curve(
    cfg: AnalysisConfig, schedule: Schedule, sensitivities: SensitivityBundle, epsilons: Sequence[float]
) -> list[TradeoffPoint]:
    w = laplace_variance_aggregate(sensitivities, cfg.radius, cfg.noisy_dual)
    gamma_1 = schedule.step(1)[1]
    out = []
    for eps in epsilons:
        if not eps > 0:
            raise PrivacyError(f"epsilon must be positive, got {eps!r}")
        out.append(TradeoffPoint(float(eps), w / eps**2, gamma_1**2 * w / eps**2))
    return out


@dataclass(frozen=True)
class DecayReport:
    passed: bool
    hypotheses_ok: bool
    decayed: bool
    v0: float
    final_mean: float
    means: np.ndarray
    detail: str


def supermartingale_decay_check(
    tau: Sequence[float] | np.ndarray,
    sigma: Sequence[float] | np.ndarray,
    trials: int,
    seed: int,
    v0: float = 1.0,
) -> DecayReport:
    """
    Simulate v_{k+1} = (1 - tau_k) v_k + sigma_k u_k, u_k ~ U[0, 1], over `trials` paths
    and check that the mean falls below 1% of v0 by the end of the horizon.
    """
    t = np.asarray(tau, dtype=float)
    s = np.asarray(sigma, dtype=float)
    if t.shape != s.shape or t.ndim != 1 or t.size < 2:
        raise ValueError("tau and sigma must be 1-d sequences of equal length >= 2")
    if trials < 1:
        raise ValueError("trials must be >= 1")

    problems = []
    if np.any((t < 0) | (t > 1)):
        problems.append("tau outside [0, 1]")
    if t.sum() < math.log(100.0):
        problems.append(f"sum tau = {t.sum():.4g} too small for decay")
    half = t.size // 2
    tail_tau = t[half:]
    if np.any(tail_tau <= 0):
        problems.append("tau vanishes on the tail")
    else:
        ratio = s[half:] / tail_tau
        if not ratio[-1] <= ratio[0]:
            problems.append("sigma/tau does not decrease on the tail")

    rng = np.random.default_rng(seed)
    v = np.full(trials, float(v0))
    means = np.empty(t.size + 1)
    means[0] = v0
    for k in range(t.size):
        v = (1.0 - t[k]) * v + s[k] * rng.random(trials)
        means[k + 1] = v.mean()

    decayed = bool(means[-1] < 0.01 * v0)
    ok = not problems
    detail = "; ".join(problems) if problems else f"mean {means[-1]:.3g} after {t.size} steps"
    return DecayReport(decayed and ok, ok, decayed, float(v0), float(means[-1]), means, detail)
