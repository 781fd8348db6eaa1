from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from .config import ScheduleConfig

TAIL_GRID_POINTS = 200


class ScheduleError(ValueError):
    pass


class Schedule(Protocol):
    def step(self, k: int) -> tuple[float, float]: ...

    def alphas(self, ks: np.ndarray) -> np.ndarray: ...

    def gammas(self, ks: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class StepSchedule:
    """alpha_k = alpha_bar * k^-c1, gamma_k = gamma_bar * k^-c2 for k >= k0 (= 1)."""

    alpha_bar: float
    gamma_bar: float
    c1: float
    c2: float
    k0: int = 1

    def __post_init__(self) -> None:
        if not (self.alpha_bar > 0 and self.gamma_bar > 0):
            raise ScheduleError("alpha_bar and gamma_bar must be positive")
        if self.k0 < 1:
            raise ScheduleError("iterations are counted from k = 1")

    @classmethod
    def from_config(cls, cfg: ScheduleConfig) -> StepSchedule:
        return cls(cfg.alpha_bar, cfg.gamma_bar, cfg.c1, cfg.c2)

    def step(self, k: int) -> tuple[float, float]:
        if k < self.k0:
            raise ScheduleError(f"step index must be >= {self.k0}, got {k}")
        kf = float(k)
        return self.alpha_bar * kf ** (-self.c1), self.gamma_bar * kf ** (-self.c2)

    def _check(self, ks: np.ndarray) -> np.ndarray:
        ks = np.asarray(ks, dtype=float)
        if ks.size and ks.min() < self.k0:
            raise ScheduleError(f"step index must be >= {self.k0}")
        return ks

    def alphas(self, ks: np.ndarray) -> np.ndarray:
        return self.alpha_bar * self._check(ks) ** (-self.c1)

    def gammas(self, ks: np.ndarray) -> np.ndarray:
        return self.gamma_bar * self._check(ks) ** (-self.c2)

    def as_dict(self) -> dict[str, float]:
        return {"alpha_bar": self.alpha_bar, "gamma_bar": self.gamma_bar, "c1": self.c1, "c2": self.c2}


@dataclass(frozen=True)
class SequenceSchedule:
    """User-supplied alpha_k / gamma_k callbacks, validated numerically only."""

    alpha: Callable[[int], float]
    gamma: Callable[[int], float]
    k0: int = 1

    def step(self, k: int) -> tuple[float, float]:
        if k < self.k0:
            raise ScheduleError(f"step index must be >= {self.k0}, got {k}")
        a = float(self.alpha(k))
        g = float(self.gamma(k))
        if not (a > 0 and g > 0):
            raise ScheduleError(f"schedule values must be positive at k={k}: alpha={a}, gamma={g}")
        return a, g

    def alphas(self, ks: np.ndarray) -> np.ndarray:
        return np.array([self.step(int(k))[0] for k in np.asarray(ks).ravel()])

    def gammas(self, ks: np.ndarray) -> np.ndarray:
        return np.array([self.step(int(k))[1] for k in np.asarray(ks).ravel()])


@dataclass(frozen=True)
class ConditionResult:
    index: int
    name: str
    passed: bool
    detail: str


@dataclass(frozen=True)
class ScheduleReport:
    conditions: tuple[ConditionResult, ...]
    summable_sigma: bool
    horizon: int

    @property
    def valid(self) -> bool:
        return all(c.passed for c in self.conditions)

    @property
    def failures(self) -> list[int]:
        return [c.index for c in self.conditions if not c.passed]


def drift_term(schedule: Schedule, ks: np.ndarray) -> np.ndarray:
    """(alpha_{k-1} - alpha_k) / (gamma_k alpha_k^2) for k >= 2."""
    ks = np.asarray(ks, dtype=float)
    a = schedule.alphas(ks)
    a_prev = schedule.alphas(ks - 1)
    return (a_prev - a) / (schedule.gammas(ks) * a * a)


def _tail_decreasing(schedule: Schedule, horizon: int) -> tuple[bool, float, float]:
    lo = max(2.0, math.sqrt(horizon))
    ks = np.unique(np.round(np.geomspace(lo, horizon, TAIL_GRID_POINTS)))
    term = drift_term(schedule, ks)
    diffs = np.diff(term)
    ok = bool(np.all(diffs <= 1e-12 * np.maximum(1.0, np.abs(term[:-1]))))
    return ok, float(term[0]), float(term[-1])


def _local_exponents(schedule: Schedule, horizon: int) -> tuple[float, float]:
    k = float(max(2, horizon // 2))
    a1, g1 = schedule.step(int(k))
    a2, g2 = schedule.step(int(2 * k))
    return -math.log(a2 / a1) / math.log(2.0), -math.log(g2 / g1) / math.log(2.0)


def validate(schedule: Schedule, horizon: int) -> ScheduleReport:
    """
    Check the four step-size conditions under which the regularized iteration converges.

    Power-law exponents decide (1)-(3) analytically; (4) combines a numeric check
    that the drift term decreases over the horizon with the exponent condition
    c1 + c2 < 1. Callback schedules use exponents estimated at the horizon.
    """
    if horizon < 10:
        raise ScheduleError("validation horizon must be >= 10")
    if isinstance(schedule, StepSchedule):
        c1, c2 = schedule.c1, schedule.c2
        origin = "exponents"
    else:
        c1, c2 = _local_exponents(schedule, horizon)
        origin = "local exponents"

    tail_ok, first, last = _tail_decreasing(schedule, horizon)
    conditions = (
        ConditionResult(1, "sum gamma_k alpha_k diverges", c1 + c2 <= 1.0, f"{origin}: c1+c2={c1 + c2:.6g} (need <= 1)"),
        ConditionResult(2, "gamma_k / alpha_k -> 0", c2 > c1, f"{origin}: c1={c1:.6g}, c2={c2:.6g} (need c2 > c1)"),
        ConditionResult(3, "alpha_k -> 0", c1 > 0.0, f"{origin}: c1={c1:.6g} (need > 0)"),
        ConditionResult(
            4,
            "(alpha_{k-1} - alpha_k) / (gamma_k alpha_k^2) -> 0",
            tail_ok and c1 + c2 < 1.0,
            f"tail {first:.4g} -> {last:.4g} over [{int(math.sqrt(horizon))}, {horizon}], "
            f"{'decreasing' if tail_ok else 'not decreasing'}; exponent c1+c2-1={c1 + c2 - 1:.4g}",
        ),
    )
    return ScheduleReport(conditions, summable_sigma=c2 > 0.5, horizon=horizon)
