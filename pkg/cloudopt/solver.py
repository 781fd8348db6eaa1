from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import SolverSettings
from .geometry import (
    DualSet,
    EnsembleState,
    compute_dual_radius,
    project_box,
    project_dual,
    project_stacked,
    z_diameter,
    z_sup_norm,
)
from .privacy import NoiseBank, PrivacyPolicy
from .problem import BoxSet, ProblemError, ProblemSpec
from .runtime import RunTrace
from .schedule import Schedule

log = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 10.0

TSENG_THETA = 0.99
TSENG_SHRINK = 0.7
TSENG_CHECK_EVERY = 50
REFINE_MARGIN = 1e-3  # refinement aims this far below the declared tolerance


class NumericalError(ArithmeticError):
    def __init__(self, message: str, *, k: int | None = None, quantity: str | None = None) -> None:
        super().__init__(message if k is None else f"{message} (k={k})")
        self.k = k
        self.quantity = quantity


@dataclass(frozen=True)
class SolverConfig:
    schedule: Schedule
    max_iters: int
    fixed_point_tol: float = 0.0
    record_every: int = 10
    dense_until: int = 1000  # every iterate up to here is recorded
    kkt_every: int = 0

    def __post_init__(self) -> None:
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")
        if self.fixed_point_tol < 0:
            raise ValueError("fixed_point_tol must be >= 0")

    @classmethod
    def from_settings(cls, settings: SolverSettings, schedule: Schedule) -> SolverConfig:
        return cls(
            schedule=schedule,
            max_iters=settings.iterations,
            fixed_point_tol=settings.fixed_point_tol,
            record_every=settings.record_every,
            dense_until=settings.dense_until,
            kkt_every=settings.kkt_every,
        )


@dataclass(frozen=True, eq=False)
class SaddleMap:
    """G(x, mu) = (f_x + g_x^T mu, -g(x)) on Z = X x M."""

    spec: ProblemSpec
    dual_set: DualSet

    def stacked(self, z: np.ndarray) -> np.ndarray:
        spec = self.spec
        x = z[: spec.n]
        mu = z[spec.n :]
        c = spec.constraint
        lx = spec.objective_grad(x) + c.jacobian(x).T @ mu
        return np.concatenate([lx, -c.value(x)])

    def evaluate(self, z: EnsembleState) -> tuple[np.ndarray, np.ndarray]:
        out = self.stacked(z.stacked())
        return out[: self.spec.n], out[self.spec.n :]

    __call__ = evaluate


@dataclass(frozen=True, eq=False)
class ReferenceSolution:
    x0: np.ndarray
    mu0: np.ndarray
    kkt_residual: float
    radius: float
    tolerance: float

    @property
    def state(self) -> EnsembleState:
        return EnsembleState(self.x0, self.mu0)

    @property
    def converged(self) -> bool:
        return self.kkt_residual <= self.tolerance


@dataclass(frozen=True, eq=False)
class NoiseRecord:
    k: int
    agent_noise: tuple[np.ndarray, ...]
    constraint_noise: np.ndarray | None
    mu: np.ndarray

    @property
    def w_x(self) -> np.ndarray:
        return np.hstack(self.agent_noise)

    @property
    def w_s(self) -> np.ndarray:
        return self.w_x.T @ self.mu


# ---------------------------------------------------------------------------
# per-agent and cloud pieces of one step; the ensemble step is built from these


def agent_payload(jac_block: np.ndarray, mu: np.ndarray, noise: np.ndarray | None = None) -> np.ndarray:
    """g_{x_i}^T mu, with w_i added to g_{x_i} first when given."""
    if noise is not None:
        jac_block = jac_block + noise
    return jac_block.T @ mu


def agent_primal_step(
    i: int,
    x_i: np.ndarray,
    payload: np.ndarray,
    alpha: float,
    gamma: float,
    grad_f: np.ndarray,
    box: BoxSet,
) -> np.ndarray:
    out = project_box(x_i - gamma * (grad_f + payload + alpha * x_i), box)
    if not np.isfinite(out).all():
        raise NumericalError(f"agent {i} produced a non-finite state", quantity="x")
    return out


def cloud_dual_step(mu: np.ndarray, g_value: np.ndarray, alpha: float, gamma: float, dual_set: DualSet) -> np.ndarray:
    pre = mu + gamma * (g_value - alpha * mu)
    if not np.isfinite(pre).all():
        raise NumericalError("dual update produced a non-finite multiplier", quantity="mu")
    return project_dual(pre, dual_set)


def _advance(
    z: EnsembleState,
    G: SaddleMap,
    alpha: float,
    gamma: float,
    agent_noise: Sequence[np.ndarray | None] | None,
    constraint_noise: np.ndarray | None,
) -> EnsembleState:
    spec = G.spec
    x, mu = z.x, z.mu
    jac = spec.constraint.jacobian(x)
    g = spec.constraint.value(x)
    parts = []
    for i, (obj, box, blk) in enumerate(zip(spec.objectives, spec.boxes, spec.blocks), start=1):
        x_i = x[blk]
        w_i = None if agent_noise is None else agent_noise[i - 1]
        payload = agent_payload(jac[:, blk], mu, w_i)
        parts.append(agent_primal_step(i, x_i, payload, alpha, gamma, obj.grad(x_i), box))
    g_hat = g if constraint_noise is None else g + constraint_noise
    return EnsembleState(np.concatenate(parts), cloud_dual_step(mu, g_hat, alpha, gamma, G.dual_set))


def step_deterministic(z: EnsembleState, G: SaddleMap, alpha: float, gamma: float) -> EnsembleState:
    """Pi_Z[z - gamma (G(z) + alpha z)]."""
    return _advance(z, G, alpha, gamma, None, None)


def step_private(
    z: EnsembleState, G: SaddleMap, alpha: float, gamma: float, noise: NoiseBank, k: int
) -> tuple[EnsembleState, NoiseRecord | None]:
    """
    Pi_Z[z - gamma (G(z) + alpha z + w(k))] with w = (w_x^T mu, -w_g).

    w_g enters the dual block as noise on g, so mu is driven by g(x) + w_g.
    """
    if not noise.active:
        return step_deterministic(z, G, alpha, gamma), None
    agent_noise = tuple(noise.agent(i, k) for i in range(1, G.spec.num_agents + 1))
    constraint_noise = noise.constraint(k)
    nxt = _advance(z, G, alpha, gamma, agent_noise, constraint_noise)
    return nxt, NoiseRecord(k, agent_noise, constraint_noise, z.mu)


def kkt_residual(z: EnsembleState, G: SaddleMap) -> float:
    """Natural-map residual |z - Pi_Z[z - G(z)]|_2."""
    zv = z.stacked()
    r = zv - project_stacked(zv - G.stacked(zv), G.spec, G.dual_set)
    return float(np.sqrt(r @ r))


# ---------------------------------------------------------------------------
# the iteration loop


class TraceRecorder:
    """
    Records a run's iterates on the dense-then-sparse cadence and applies the stop rules.

    Shared by the ensemble solver and the cloud simulation so both produce the same trace.
    """

    def __init__(
        self,
        G: SaddleMap,
        config: SolverConfig,
        seed: int,
        reference: ReferenceSolution | None = None,
        *,
        keep_noise: bool = False,
    ) -> None:
        self.G = G
        self.config = config
        self.reference = reference
        self.limit = DIVERGENCE_FACTOR * max(z_diameter(G.spec, G.dual_set), z_sup_norm(G.spec, G.dual_set))
        self.trace = RunTrace(seed=seed)
        if reference is not None:
            self.trace.primal_error = []
            self.trace.dual_error = []
        if keep_noise:
            self.trace.noise = []
        self._t0 = time.perf_counter()

    def _record(self, k: int, z: EnsembleState, final: bool) -> None:
        t = self.trace
        t.ks.append(k)
        t.xs.append(z.x)
        t.mus.append(z.mu)
        if self.reference is not None:
            dx = z.x - self.reference.x0
            dm = z.mu - self.reference.mu0
            t.primal_error.append(math.sqrt(float(dx @ dx)))
            t.dual_error.append(math.sqrt(float(dm @ dm)))
        every = self.config.kkt_every
        if every > 0 and (k % every == 0 or final):
            t.kkt[k] = kkt_residual(z, self.G)

    def start(self, z: EnsembleState) -> None:
        self._record(0, z, final=False)

    def observe(self, k: int, prev: EnsembleState, z: EnsembleState, noise: NoiseRecord | None, noise_free: bool) -> bool:
        """Take z(k); returns True when the run should stop here."""
        nz = math.sqrt(float(z.x @ z.x) + float(z.mu @ z.mu))
        if not nz <= self.limit:
            raise NumericalError(f"|z| = {nz:g} exceeds the divergence guard {self.limit:g}", k=k, quantity="z")
        if noise is not None and self.trace.noise is not None:
            self.trace.noise.append(noise)

        cfg = self.config
        stop = noise_free and cfg.fixed_point_tol > 0 and z.distance(prev) <= cfg.fixed_point_tol
        final = stop or k >= cfg.max_iters
        kkt_due = cfg.kkt_every > 0 and k % cfg.kkt_every == 0
        if final or kkt_due or k <= cfg.dense_until or k % cfg.record_every == 0:
            self._record(k, z, final)
        if final:
            self.trace.iterations = k
            self.trace.stopped_early = stop and k < cfg.max_iters
        return stop

    def finish(self) -> RunTrace:
        self.trace.wall_time = time.perf_counter() - self._t0
        return self.trace


def initial_state(spec: ProblemSpec, dual_set: DualSet, z0: EnsembleState | None) -> EnsembleState:
    if z0 is None:
        return EnsembleState.zeros(spec)
    if z0.x.shape != (spec.n,) or z0.mu.shape != (spec.m,):
        raise ProblemError("initial state has the wrong dimensions")
    if not (spec.contains(z0.x) and dual_set.contains(z0.mu)):
        raise ProblemError("initial state must lie in Z")
    return EnsembleState(np.array(z0.x, dtype=float), np.array(z0.mu, dtype=float))


def solve(
    spec: ProblemSpec,
    config: SolverConfig,
    policy: PrivacyPolicy | None = None,
    seed: int = 0,
    *,
    dual_set: DualSet | None = None,
    reference: ReferenceSolution | None = None,
    z0: EnsembleState | None = None,
    noisy_dual: bool = True,
    keep_noise: bool = False,
) -> RunTrace:
    """
    Run the regularized projection iteration from z0 (default 0) for config.max_iters steps.

    Step k uses alpha_k, gamma_k and noise w(k). The fixed-point stop applies only to
    noise-free runs.
    """
    dual_set = dual_set or compute_dual_radius(spec)
    G = SaddleMap(spec, dual_set)
    bank = NoiseBank.for_policy(spec, policy, seed, noisy_dual=noisy_dual)
    z = initial_state(spec, dual_set, z0)

    recorder = TraceRecorder(G, config, seed, reference, keep_noise=keep_noise)
    recorder.start(z)
    schedule = config.schedule
    for k in range(1, config.max_iters + 1):
        alpha, gamma = schedule.step(k)
        try:
            nxt, record = step_private(z, G, alpha, gamma, bank, k)
        except NumericalError as e:
            raise NumericalError(str(e), k=k, quantity=e.quantity) from e
        stop = recorder.observe(k, z, nxt, record, noise_free=not bank.active)
        z = nxt
        if stop:
            break
    trace = recorder.finish()
    log.debug("seed %d: %d iterations in %.2fs", seed, trace.iterations, trace.wall_time)
    return trace


# ---------------------------------------------------------------------------
# reference solution


def tseng_refine(G: SaddleMap, z0: np.ndarray, iters: int, target: float) -> tuple[np.ndarray, float]:
    """
    Forward-backward-forward iterations with backtracking on the stacked z.

    Returns the iterate with the smallest natural-map residual seen.
    """
    spec, dset = G.spec, G.dual_set

    def proj(v: np.ndarray) -> np.ndarray:
        return project_stacked(v, spec, dset)

    z = proj(np.asarray(z0, dtype=float))
    gz = G.stacked(z)
    r = z - proj(z - gz)
    best_z, best_r = z, float(np.sqrt(r @ r))
    if best_r <= target:
        return best_z, best_r

    t = 1.0
    for it in range(1, iters + 1):
        while True:
            y = proj(z - t * gz)
            gy = G.stacked(y)
            dy = float(np.linalg.norm(y - z))
            if dy == 0.0 or t * float(np.linalg.norm(gy - gz)) <= TSENG_THETA * dy:
                break
            t *= TSENG_SHRINK
        if dy == 0.0:
            # z is a fixed point of the forward-backward map
            return z, 0.0
        z = proj(y - t * (gy - gz))
        gz = G.stacked(z)
        if it % TSENG_CHECK_EVERY == 0:
            r = z - proj(z - gz)
            res = float(np.sqrt(r @ r))
            if res < best_r:
                best_z, best_r = z, res
            if res <= target:
                break
            t /= TSENG_SHRINK
    return best_z, best_r


def compute_reference(
    spec: ProblemSpec,
    dual_set: DualSet,
    schedule: Schedule,
    *,
    tikhonov_iters: int,
    refine_iters: int,
    tolerance: float,
    check_every: int = 1000,
) -> ReferenceSolution:
    """
    z0 from a long noise-free regularized run (keeping the iterate with the smallest
    KKT residual), then refined without regularization until the residual is well
    below `tolerance`.
    """
    G = SaddleMap(spec, dual_set)
    z = EnsembleState.zeros(spec)
    best, best_r = z, kkt_residual(z, G)
    check_every = max(1, check_every)
    for k in range(1, tikhonov_iters + 1):
        alpha, gamma = schedule.step(k)
        try:
            z = step_deterministic(z, G, alpha, gamma)
        except NumericalError as e:
            raise NumericalError(str(e), k=k, quantity=e.quantity) from e
        if k % check_every == 0 or k == tikhonov_iters:
            r = kkt_residual(z, G)
            if r < best_r:
                best, best_r = z, r
    log.info("regularized run: best KKT residual %.3g after %d iterations", best_r, tikhonov_iters)

    zr, rr = tseng_refine(G, best.stacked(), refine_iters, tolerance * REFINE_MARGIN)
    if rr < best_r:
        best = EnsembleState.from_stacked(zr, spec.n)
        best_r = rr
    log.info("refined KKT residual %.3g (tolerance %.3g)", best_r, tolerance)
    return ReferenceSolution(best.x, best.mu, best_r, dual_set.radius, tolerance)


# ---------------------------------------------------------------------------
# oracles on G and the Lagrangian


def sample_z(spec: ProblemSpec, dual_set: DualSet, rng: np.random.Generator, count: int) -> np.ndarray:
    """Random points of Z: uniform on X, uniform on the capped simplex for mu."""
    x = BoxSet(spec.lower, spec.upper).sample(rng, count)
    mu = dual_set.radius * rng.dirichlet(np.ones(spec.m + 1), size=count)[:, : spec.m]
    return np.hstack([x, mu])


def estimate_saddle_lipschitz(G: SaddleMap, samples: int, seed: int) -> float:
    """
    Sampled lower estimate of L_G: max |G(a) - G(b)| / |a - b| over far and near pairs.
    """
    if samples < 2:
        raise ValueError("samples must be >= 2")
    rng = np.random.default_rng(seed)
    spec, dset = G.spec, G.dual_set
    a = sample_z(spec, dset, rng, samples)
    b = sample_z(spec, dset, rng, samples)
    near = samples // 2
    scale = 1e-3 * z_diameter(spec, dset) / math.sqrt(spec.n + spec.m)
    for j in range(near):
        b[j] = project_stacked(a[j] + scale * rng.standard_normal(a.shape[1]), spec, dset)
    best = 0.0
    for za, zb in zip(a, b):
        d = float(np.linalg.norm(za - zb))
        if d > 0:
            best = max(best, float(np.linalg.norm(G.stacked(za) - G.stacked(zb))) / d)
    return best


def lagrangian(spec: ProblemSpec, x: np.ndarray, mu: np.ndarray) -> float:
    return spec.objective_value(x) + float(mu @ spec.constraint.value(x))


def saddle_gap(
    spec: ProblemSpec, dual_set: DualSet, ref: ReferenceSolution, samples: int, seed: int
) -> tuple[float, float]:
    """
    Worst sampled violations of L(x0, mu) <= L(x0, mu0) and L(x0, mu0) <= L(x, mu0).
    """
    rng = np.random.default_rng(seed)
    zs = sample_z(spec, dual_set, rng, samples)
    l0 = lagrangian(spec, ref.x0, ref.mu0)
    g0 = spec.constraint.value(ref.x0)
    left = max(float(mu @ g0) + spec.objective_value(ref.x0) - l0 for mu in zs[:, spec.n :])
    right = max(l0 - lagrangian(spec, x, ref.mu0) for x in zs[:, : spec.n])
    return left, right
