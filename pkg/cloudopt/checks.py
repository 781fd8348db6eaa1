from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .analysis import supermartingale_decay_check
from .cloudsim import simulate
from .geometry import DualSet, EnsembleState, project_box, project_dual
from .privacy import NoiseBank, NoiseChannel, PrivacyPolicy, q_function, q_inverse
from .problem import BoxSet, ProblemSpec, check_gradients
from .schedule import Schedule
from .solver import (
    ReferenceSolution,
    SaddleMap,
    SolverConfig,
    sample_z,
    saddle_gap,
    step_deterministic,
    step_private,
)

log = logging.getLogger(__name__)

PROJECTION_TOL = 1e-12
MONOTONE_SLACK = 1e-9
Q_ROUNDTRIP_TOL = 1e-12
# allowed deviation of the sample mean and variance, in standard errors
MOMENT_SIGMAS = 6.0


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _projection_suite(
    name: str, project: Callable[[np.ndarray], np.ndarray], points: np.ndarray, others: np.ndarray
) -> list[CheckResult]:
    worst_idem = 0.0
    worst_expand = 0.0
    worst_vi = 0.0
    for y, w in zip(points, others):
        p = project(y)
        worst_idem = max(worst_idem, float(np.max(np.abs(project(p) - p))) / (1.0 + float(np.max(np.abs(p)))))
        q = project(w)
        dist = float(np.linalg.norm(y - w))
        gap = (float(np.linalg.norm(p - q)) - dist) / (1.0 + dist)
        worst_expand = max(worst_expand, gap)
        # <y - P(y), c - P(y)> <= 0 for every c in the set; q is such a point
        scale = 1.0 + float(np.linalg.norm(y - p)) * float(np.linalg.norm(q - p))
        worst_vi = max(worst_vi, float((y - p) @ (q - p)) / scale)
    return [
        CheckResult(f"{name}: idempotence", worst_idem <= PROJECTION_TOL, f"max relative |P(P(y)) - P(y)| = {worst_idem:.3g}"),
        CheckResult(f"{name}: non-expansive", worst_expand <= PROJECTION_TOL * 100, f"max excess = {worst_expand:.3g}"),
        CheckResult(f"{name}: variational", worst_vi <= PROJECTION_TOL * 100, f"max scaled inner product = {worst_vi:.3g}"),
    ]


def projection_checks(spec: ProblemSpec, dual_set: DualSet, samples: int, seed: int) -> list[CheckResult]:
    """Idempotence, non-expansiveness and the variational inequality for Pi_X and Pi_M."""
    rng = np.random.default_rng(seed)
    full = BoxSet(spec.lower, spec.upper)
    width = spec.upper - spec.lower
    wide = BoxSet(spec.lower - width, spec.upper + width)
    xs = wide.sample(rng, samples)
    xs2 = wide.sample(rng, samples)
    r = dual_set.radius
    mus = rng.uniform(-r, 2.0 * r, size=(samples, dual_set.m))
    mus2 = rng.uniform(-r, 2.0 * r, size=(samples, dual_set.m))
    out = _projection_suite("Pi_X", lambda v: project_box(v, full), xs, xs2)
    out += _projection_suite("Pi_M", lambda v: project_dual(v, dual_set), mus, mus2)
    return out


def monotonicity_check(G: SaddleMap, pairs: int, seed: int) -> CheckResult:
    """(G(a) - G(b))^T (a - b) >= 0 over sampled pairs in Z, up to roundoff."""
    rng = np.random.default_rng(seed)
    a = sample_z(G.spec, G.dual_set, rng, pairs)
    b = sample_z(G.spec, G.dual_set, rng, pairs)
    worst = math.inf
    for za, zb in zip(a, b):
        ga = G.stacked(za)
        gb = G.stacked(zb)
        value = float((ga - gb) @ (za - zb))
        scale = float(np.linalg.norm(ga) + np.linalg.norm(gb)) * float(np.linalg.norm(za - zb))
        worst = min(worst, value + MONOTONE_SLACK + 1e-12 * scale)
    return CheckResult("G monotone", worst >= 0.0, f"min slackened inner product = {worst:.3g}")


def gradient_check(spec: ProblemSpec, samples: int, seed: int) -> CheckResult:
    report = check_gradients(spec, samples, seed)
    worst = max(report.errors.values())
    detail = f"max relative error {worst:.3g}"
    if report.flagged:
        detail += "; flagged: " + ", ".join(report.flagged)
    return CheckResult("gradients", report.passed, detail)


def zero_variance_check(spec: ProblemSpec, dual_set: DualSet, schedule: Schedule, iterations: int) -> CheckResult:
    """The private step with zero-scale channels must reproduce the deterministic step bitwise."""
    channels = [NoiseChannel("laplace", 0.0, (spec.m,), 0)]
    channels += [NoiseChannel("laplace", 0.0, (spec.m, blk.stop - blk.start), i) for i, blk in enumerate(spec.blocks, start=1)]
    bank = NoiseBank(channels)
    G = SaddleMap(spec, dual_set)
    za = zb = EnsembleState.zeros(spec)
    for k in range(1, iterations + 1):
        alpha, gamma = schedule.step(k)
        za = step_deterministic(za, G, alpha, gamma)
        zb, _ = step_private(zb, G, alpha, gamma, bank, k)
        if not (np.array_equal(za.x, zb.x) and np.array_equal(za.mu, zb.mu)):
            return CheckResult("zero-variance reduction", False, f"states differ at k={k}")
    return CheckResult("zero-variance reduction", True, f"{iterations} steps identical")


def q_roundtrip_check(samples: int, seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    # keep Q(y) away from 0 and 1 where the round trip loses absolute precision
    deltas = rng.uniform(1e-6, 0.5, size=samples)
    worst = max(abs(q_function(q_inverse(d)) - d) for d in deltas)
    return CheckResult("Q round trip", worst <= Q_ROUNDTRIP_TOL, f"max |Q(Q^-1(d)) - d| = {worst:.3g}")


def noise_moment_checks(draws: int, seed: int) -> list[CheckResult]:
    """Empirical mean and variance of both mechanisms against their closed forms."""
    out = []
    for dist in ("laplace", "gaussian"):
        ch = NoiseChannel(dist, 2.5, (4,), 1, seed)
        steps = max(1, draws // 4)
        bank = NoiseBank([ch])
        sample = np.concatenate([bank.draw(1, k) for k in range(steps)])
        n = sample.size
        var = ch.variance
        mean_se = math.sqrt(var / n)
        # var of the sample variance: (mu4 - var^2)/n; kurtosis 6 (Laplace), 3 (Gaussian)
        kurt = 6.0 if dist == "laplace" else 3.0
        var_se = var * math.sqrt((kurt - 1.0) / n)
        mean = float(sample.mean())
        svar = float(sample.var())
        out.append(
            CheckResult(
                f"{dist} noise moments",
                abs(mean) <= MOMENT_SIGMAS * mean_se and abs(svar - var) <= MOMENT_SIGMAS * var_se,
                f"mean {mean:.4g} (se {mean_se:.2g}), variance {svar:.4g} vs {var:.4g}",
            )
        )
    return out


def decay_check(horizon: int, trials: int, seed: int) -> CheckResult:
    ks = np.arange(1, horizon + 1, dtype=float)
    report = supermartingale_decay_check(1.0 / ks, 1.0 / ks**2, trials, seed)
    return CheckResult("supermartingale decay", report.passed, report.detail)


def payload_privacy_check(
    spec: ProblemSpec, dual_set: DualSet, config: SolverConfig, policy: PrivacyPolicy, seed: int, rounds: int
) -> CheckResult:
    """
    Run the cloud protocol in debug mode and confirm every downlink payload differs
    from its pre-noise value whenever mu is nonzero.
    """
    if not policy.active:
        return CheckResult("payload privacy", True, "no mechanism configured")
    _, logs = simulate(spec, config, policy, seed, rounds, dual_set=dual_set, debug=True)
    exposed = 0
    mu = np.zeros(spec.m)
    for entry in logs:
        if np.any(mu != 0.0):
            for msg, exact in zip(entry.downlink, entry.exact_payloads or ()):
                if np.array_equal(msg.payload, exact):
                    exposed += 1
        mu = entry.mu_after
    return CheckResult("payload privacy", exposed == 0, f"{exposed} exact payload(s) in {len(logs)} rounds")


def saddle_gap_check(
    spec: ProblemSpec, dual_set: DualSet, reference: ReferenceSolution, samples: int, seed: int
) -> CheckResult:
    """
    L(x0, mu) <= L(x0, mu0) <= L(x, mu0) over sampled (x, mu), with slack 1e-6 widened
    by the residual of z0 times the size of Z.
    """
    left, right = saddle_gap(spec, dual_set, reference, samples, seed)
    width = float(np.linalg.norm(spec.upper - spec.lower))
    slack = 1e-6 + reference.kkt_residual * (dual_set.radius + width)
    worst = max(left, right)
    return CheckResult("saddle inequality", worst <= slack, f"max violation {worst:.3g} (slack {slack:.3g})")


def run_all(
    spec: ProblemSpec,
    dual_set: DualSet,
    config: SolverConfig,
    policy: PrivacyPolicy,
    *,
    samples: int = 10_000,
    seed: int = 0,
    reference: ReferenceSolution | None = None,
) -> list[CheckResult]:
    """The `check` verb's property suites; sample counts scale with `samples`."""
    G = SaddleMap(spec, dual_set)
    results = projection_checks(spec, dual_set, samples, seed)
    results.append(monotonicity_check(G, samples, seed + 1))
    results.append(gradient_check(spec, max(1, samples // 100), seed + 2))
    results.append(zero_variance_check(spec, dual_set, config.schedule, min(config.max_iters, 1000)))
    results.append(q_roundtrip_check(samples, seed + 3))
    results.extend(noise_moment_checks(100 * samples, seed + 4))
    results.append(decay_check(2000, samples, seed + 5))
    results.append(payload_privacy_check(spec, dual_set, config, policy, seed, min(config.max_iters, 50)))
    if reference is not None:
        results.append(saddle_gap_check(spec, dual_set, reference, min(samples, 1000), seed + 6))
    else:
        log.warning("no reference solution; skipping the saddle inequality check")
    for r in results:
        log.log(logging.INFO if r.passed else logging.ERROR, "%-32s %s  %s", r.name, "ok" if r.passed else "FAIL", r.detail)
    return results
