from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .problem import BoxSet, ObjectiveTerm, ProblemError, ProblemSpec

log = logging.getLogger(__name__)

BOX_MIN_TOL = 1e-8
BOX_MIN_MAX_ITERS = 100_000


@dataclass(frozen=True)
class DualSet:
    """{mu >= 0, |mu|_1 <= radius}"""

    m: int
    radius: float

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ProblemError("dual set needs m >= 1")
        if not (math.isfinite(self.radius) and self.radius > 0):
            raise ProblemError(f"dual radius must be positive and finite, got {self.radius!r}")

    def contains(self, mu: np.ndarray, tol: float = 1e-12) -> bool:
        mu = np.asarray(mu, dtype=float)
        return bool(mu.shape == (self.m,) and np.all(mu >= 0.0) and mu.sum() <= self.radius + tol)

    @property
    def diameter(self) -> float:
        # farthest pair is R*e_i, R*e_j (or 0, R*e_1 when m = 1)
        return self.radius * math.sqrt(2.0) if self.m >= 2 else self.radius


@dataclass(frozen=True, eq=False)
class EnsembleState:
    x: np.ndarray
    mu: np.ndarray

    @classmethod
    def zeros(cls, spec: ProblemSpec) -> EnsembleState:
        return cls(np.zeros(spec.n), np.zeros(spec.m))

    @classmethod
    def from_stacked(cls, z: np.ndarray, n: int) -> EnsembleState:
        z = np.asarray(z, dtype=float)
        return cls(z[:n].copy(), z[n:].copy())

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.x, self.mu])

    def distance(self, other: EnsembleState) -> float:
        dx = self.x - other.x
        dm = self.mu - other.mu
        return math.sqrt(float(dx @ dx) + float(dm @ dm))


def project_box(point: np.ndarray, box: BoxSet) -> np.ndarray:
    return np.minimum(np.maximum(point, box.lower), box.upper)


def project_dual(point: np.ndarray, dual_set: DualSet) -> np.ndarray:
    """
    Euclidean projection onto the l1-capped nonnegative orthant.

    Clamp to the orthant; if the l1 cap is violated, shift by the simplex threshold
    found from the sorted entries.
    """
    mu = np.maximum(point, 0.0)
    r = dual_set.radius
    if mu.sum() <= r:
        return mu
    desc = np.sort(mu)[::-1]
    thresholds = (np.cumsum(desc) - r) / np.arange(1, desc.size + 1)
    idx = np.flatnonzero(desc - thresholds > 0)[-1]
    return np.maximum(mu - thresholds[idx], 0.0)


def project_x(x: np.ndarray, spec: ProblemSpec) -> np.ndarray:
    return np.minimum(np.maximum(x, spec.lower), spec.upper)


def project_ensemble(state: EnsembleState, spec: ProblemSpec, dual_set: DualSet) -> EnsembleState:
    x = np.asarray(state.x, dtype=float)
    mu = np.asarray(state.mu, dtype=float)
    if x.shape != (spec.n,) or mu.shape != (spec.m,) or dual_set.m != spec.m:
        raise ProblemError(
            f"state shapes x{x.shape}, mu{mu.shape} do not match n={spec.n}, m={spec.m}"
        )
    parts = [project_box(x[blk], box) for blk, box in zip(spec.blocks, spec.boxes)]
    return EnsembleState(np.concatenate(parts), project_dual(mu, dual_set))


def project_stacked(z: np.ndarray, spec: ProblemSpec, dual_set: DualSet) -> np.ndarray:
    n = spec.n
    return np.concatenate([project_x(z[:n], spec), project_dual(z[n:], dual_set)])


def minimize_over_box(objective: ObjectiveTerm, box: BoxSet, tol: float = BOX_MIN_TOL) -> np.ndarray:
    """
    Projected gradient with Armijo backtracking on one agent's box.

    Stops once the unit-step projected-gradient map moves x by at most `tol`.
    """
    x = 0.5 * (box.lower + box.upper)
    fx = objective.value(x)
    t = 1.0
    for _ in range(BOX_MIN_MAX_ITERS):
        g = objective.grad(x)
        if np.linalg.norm(project_box(x - g, box) - x) <= tol:
            break
        t *= 2.0
        while True:
            y = project_box(x - t * g, box)
            fy = objective.value(y)
            d = y - x
            if fy <= fx + g @ d + (d @ d) / (2.0 * t) or t < 1e-16:
                break
            t *= 0.5
        if np.array_equal(y, x):
            break
        x, fx = y, fy
    else:
        log.warning("box minimizer for agent %d hit the iteration cap", objective.agent_id)
    return x


def box_minimizer(spec: ProblemSpec) -> tuple[np.ndarray, float]:
    """x* = argmin_X f, solved agent by agent since f and X are separable."""
    x_star = np.concatenate([minimize_over_box(obj, box) for obj, box in zip(spec.objectives, spec.boxes)])
    return x_star, spec.objective_value(x_star)


def compute_dual_radius(spec: ProblemSpec, override: float | None = None) -> DualSet:
    """
    R = (f(x_bar) - f(x*)) / min_j(-g_j(x_bar)).

    An `override` may replace R only when it is at least as large.
    """
    margin = spec.slater_margin()
    if not margin > 0:
        raise ProblemError(f"Slater margin must be positive, got {margin:g}")
    _, f_star = box_minimizer(spec)
    f_bar = spec.objective_value(spec.slater_point)
    radius = (f_bar - f_star) / margin
    if radius <= 0:
        # x_bar already minimizes f over X; any positive radius contains mu_hat = 0
        fallback = max(abs(f_bar), 1.0) * 1e-12
        log.warning("dual radius %g is not positive (x_bar minimizes f); using %g", radius, fallback)
        radius = fallback
    log.debug("dual radius: f(x_bar)=%g f(x*)=%g margin=%g R=%g", f_bar, f_star, margin, radius)

    if override is not None:
        if override < radius:
            raise ProblemError(f"radius override {override:g} is below the Slater bound {radius:g}")
        radius = float(override)
    return DualSet(spec.m, float(radius))


def z_sup_norm(spec: ProblemSpec, dual_set: DualSet) -> float:
    """sup over Z of |z|_2."""
    corner = np.maximum(np.abs(spec.lower), np.abs(spec.upper))
    return math.sqrt(float(corner @ corner) + dual_set.radius**2)


def z_diameter(spec: ProblemSpec, dual_set: DualSet) -> float:
    width = spec.upper - spec.lower
    return math.sqrt(float(width @ width) + dual_set.diameter**2)
