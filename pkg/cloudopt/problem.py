from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .config import AgentTermConfig, ConstraintRowConfig, ProblemConfig

log = logging.getLogger(__name__)

VectorFn = Callable[[np.ndarray], np.ndarray]

GRADIENT_TOL = 1e-5
CONVEXITY_TOL = 1e-9


class ProblemError(ValueError):
    pass


def _frozen(a: Sequence[float] | np.ndarray) -> np.ndarray:
    arr = np.array(a, dtype=float).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ObjectiveTerm:
    agent_id: int  # 1-based
    dim: int
    value: Callable[[np.ndarray], float]
    grad: VectorFn
    lipschitz_grad: float | None = None
    kind: str = "custom"


@dataclass(frozen=True, eq=False)
class BoxSet:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self) -> None:
        lo = _frozen(self.lower)
        hi = _frozen(self.upper)
        if lo.shape != hi.shape:
            raise ProblemError(f"box bounds differ in shape: {lo.shape} vs {hi.shape}")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ProblemError("box bounds must be finite")
        if np.any(lo > hi):
            raise ProblemError("box lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return int(self.lower.size)

    def contains(self, x: np.ndarray, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def sample(self, rng: np.random.Generator, count: int, margin: float = 0.0) -> np.ndarray:
        """Uniform samples of shape (count, dim); `margin` shrinks the box by that fraction per side."""
        u = rng.random((count, self.dim))
        width = self.upper - self.lower
        return self.lower + width * (margin + (1.0 - 2.0 * margin) * u)


@dataclass(frozen=True)
class ConstraintFunction:
    m: int
    value: VectorFn
    jacobian: VectorFn
    agent_blocks: tuple[slice, ...]
    lipschitz_g: dict[int, float] = field(default_factory=dict)
    lipschitz_blocks: dict[tuple[int, int], float] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.agent_blocks[-1].stop if self.agent_blocks else 0


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    objectives: tuple[ObjectiveTerm, ...]
    boxes: tuple[BoxSet, ...]
    constraint: ConstraintFunction
    slater_point: np.ndarray
    name: str = "custom"

    def __post_init__(self) -> None:
        object.__setattr__(self, "objectives", tuple(self.objectives))
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(self, "slater_point", _frozen(self.slater_point))

        if not self.objectives:
            raise ProblemError("problem needs at least one agent")
        if len(self.objectives) != len(self.boxes):
            raise ProblemError("one box per objective is required")
        for i, (obj, box) in enumerate(zip(self.objectives, self.boxes), start=1):
            if obj.agent_id != i:
                raise ProblemError(f"objective {i} carries agent_id {obj.agent_id}")
            if obj.dim != box.dim:
                raise ProblemError(f"agent {i}: objective dim {obj.dim} != box dim {box.dim}")

        blocks = self.constraint.agent_blocks
        if len(blocks) != len(self.boxes):
            raise ProblemError("constraint agent_blocks must have one block per agent")
        start = 0
        for i, (blk, box) in enumerate(zip(blocks, self.boxes), start=1):
            if blk.start != start or blk.stop - blk.start != box.dim:
                raise ProblemError(f"agent_blocks do not partition the columns at agent {i}")
            start = blk.stop

        if self.slater_point.size != self.n:
            raise ProblemError(f"slater_point has {self.slater_point.size} entries, expected {self.n}")
        if not self.contains(self.slater_point):
            raise ProblemError("slater_point must lie in X")
        margin = self.slater_margin()
        if not margin > 0:
            raise ProblemError(f"Slater margin must be positive, got {margin:g}")

    @property
    def num_agents(self) -> int:
        return len(self.objectives)

    @property
    def n(self) -> int:
        return sum(b.dim for b in self.boxes)

    @property
    def m(self) -> int:
        return self.constraint.m

    @property
    def blocks(self) -> tuple[slice, ...]:
        return self.constraint.agent_blocks

    @cached_property
    def lower(self) -> np.ndarray:
        return _frozen(np.concatenate([b.lower for b in self.boxes]))

    @cached_property
    def upper(self) -> np.ndarray:
        return _frozen(np.concatenate([b.upper for b in self.boxes]))

    def split(self, x: np.ndarray) -> list[np.ndarray]:
        return [x[blk] for blk in self.blocks]

    def contains(self, x: np.ndarray, tol: float = 0.0) -> bool:
        return all(box.contains(x[blk], tol) for box, blk in zip(self.boxes, self.blocks))

    def objective_value(self, x: np.ndarray) -> float:
        return math.fsum(obj.value(x[blk]) for obj, blk in zip(self.objectives, self.blocks))

    def objective_grad(self, x: np.ndarray) -> np.ndarray:
        return np.concatenate([obj.grad(x[blk]) for obj, blk in zip(self.objectives, self.blocks)])

    def slater_margin(self) -> float:
        return float(np.min(-self.constraint.value(self.slater_point)))


# ---------------------------------------------------------------------------
# primitive terms


def quadratic_distance(agent_id: int, center: Sequence[float]) -> ObjectiveTerm:
    c = _frozen(center)

    def value(x: np.ndarray) -> float:
        d = x - c
        return float(d @ d)

    def grad(x: np.ndarray) -> np.ndarray:
        return 2.0 * (x - c)

    return ObjectiveTerm(agent_id, c.size, value, grad, lipschitz_grad=2.0, kind="quadratic_distance")


def linear(agent_id: int, weights: Sequence[float], offset: float = 0.0) -> ObjectiveTerm:
    w = _frozen(weights)

    def value(x: np.ndarray) -> float:
        return float(w @ x) + offset

    def grad(x: np.ndarray) -> np.ndarray:
        return w.copy()

    return ObjectiveTerm(agent_id, w.size, value, grad, lipschitz_grad=0.0, kind="linear")


def fourth_power_distance(agent_id: int, center: Sequence[float], box: BoxSet | None = None) -> ObjectiveTerm:
    c = _frozen(center)

    def value(x: np.ndarray) -> float:
        d = x - c
        s = float(d @ d)
        return s * s

    def grad(x: np.ndarray) -> np.ndarray:
        d = x - c
        return 4.0 * float(d @ d) * d

    lip = None
    if box is not None:
        # Hessian 4|d|^2 I + 8 d d^T has top eigenvalue 12|d|^2
        far = np.maximum(np.abs(box.lower - c), np.abs(box.upper - c))
        lip = 12.0 * float(far @ far)
    return ObjectiveTerm(agent_id, c.size, value, grad, lipschitz_grad=lip, kind="fourth_power_distance")


def constant(agent_id: int, dim: int, c: float = 0.0) -> ObjectiveTerm:
    def value(x: np.ndarray) -> float:
        return float(c)

    def grad(x: np.ndarray) -> np.ndarray:
        return np.zeros(dim)

    return ObjectiveTerm(agent_id, dim, value, grad, lipschitz_grad=0.0, kind="constant")


def _blocks_for(boxes: Sequence[BoxSet]) -> tuple[slice, ...]:
    out = []
    start = 0
    for b in boxes:
        out.append(slice(start, start + b.dim))
        start += b.dim
    return tuple(out)


def quadratic_constraint(
    q: np.ndarray,
    lin: np.ndarray,
    offset: np.ndarray,
    boxes: Sequence[BoxSet],
    *,
    lipschitz_g: dict[int, float] | None = None,
    lipschitz_blocks: dict[tuple[int, int], float] | None = None,
) -> ConstraintFunction:
    """
    g(x) = q (x*x) + lin x - offset with q >= 0 (so every g_j is convex).

    Missing Lipschitz constants are filled with the analytic bounds over the boxes.
    """
    q = np.array(q, dtype=float)
    lin = np.array(lin, dtype=float)
    b = np.array(offset, dtype=float).reshape(-1)
    if q.shape != lin.shape or q.shape[0] != b.size:
        raise ProblemError("constraint coefficient shapes disagree")
    if np.any(q < 0):
        raise ProblemError("quadratic coefficients must be nonnegative")
    blocks = _blocks_for(boxes)
    if q.shape[1] != (blocks[-1].stop if blocks else 0):
        raise ProblemError("constraint columns must match the stacked state dimension")
    for arr in (q, lin, b):
        arr.setflags(write=False)
    two_q = 2.0 * q

    def value(x: np.ndarray) -> np.ndarray:
        return q @ (x * x) + lin @ x - b

    def jacobian(x: np.ndarray) -> np.ndarray:
        return two_q * x + lin

    analytic_g, analytic_blocks = _analytic_lipschitz(q, lin, boxes, blocks)
    return ConstraintFunction(
        m=b.size,
        value=value,
        jacobian=jacobian,
        agent_blocks=blocks,
        lipschitz_g=dict(lipschitz_g) if lipschitz_g is not None else analytic_g,
        lipschitz_blocks=dict(lipschitz_blocks) if lipschitz_blocks is not None else analytic_blocks,
    )


def _analytic_lipschitz(
    q: np.ndarray, lin: np.ndarray, boxes: Sequence[BoxSet], blocks: Sequence[slice]
) -> tuple[dict[int, float], dict[tuple[int, int], float]]:
    xmax = np.concatenate([np.maximum(np.abs(bx.lower), np.abs(bx.upper)) for bx in boxes])
    jac_bound = 2.0 * q * xmax + np.abs(lin)
    lip_g = {
        1: float(np.max(np.sum(jac_bound, axis=0))),
        2: float(np.sqrt(np.sum(jac_bound**2))),
    }
    lip_blocks: dict[tuple[int, int], float] = {}
    for i, blk in enumerate(blocks, start=1):
        qi = 2.0 * q[:, blk]
        lip_blocks[(i, 1)] = float(np.max(np.sum(qi, axis=0)))
        lip_blocks[(i, 2)] = float(np.max(np.sqrt(np.sum(qi**2, axis=0))))
    return lip_g, lip_blocks


# ---------------------------------------------------------------------------
# built-in instances

# published constants of the 10-agent instance (K^g_p and the per-agent table)
_REFERENCE_LIPSCHITZ_G = {1: 39.82, 2: 56.71}
_REFERENCE_WIDE_AGENTS = (1, 6, 8)


def build_reference_problem(constants: str = "published") -> ProblemSpec:
    """
    The 10-agent, 6-constraint instance: n_i = 2, X_i = [-10, 10]^2, Slater point x = 0.

    `constants="published"` uses the published Lipschitz constants; `"analytic"` uses
    the exact bounds of the quadratic constraint family over the boxes.
    """
    boxes = tuple(BoxSet((-10.0, -10.0), (10.0, 10.0)) for _ in range(10))
    objectives = (
        linear(1, (1.0, 1.0), 0.0),  # (x11 - 5) + (x12 + 5)
        quadratic_distance(2, (0.0, 0.0)),
        quadratic_distance(3, (-7.0, 7.0)),
        linear(4, (1.0, 1.0), -16.0),
        fourth_power_distance(5, (-3.0, -3.0), boxes[4]),
        linear(6, (1.0, 1.0), -20.0),
        linear(7, (1.0, 1.0), 20.0),
        quadratic_distance(8, (-7.0, 0.0)),
        linear(9, (1.0, 1.0), -6.0),
        fourth_power_distance(10, (0.0, 8.0), boxes[9]),
    )

    def col(agent: int, comp: int) -> int:
        return 2 * (agent - 1) + (comp - 1)

    q = np.zeros((6, 20))
    lin = np.zeros((6, 20))
    for row, agents in ((0, (1, 2, 3)), (1, (4, 5, 6)), (2, (7, 8, 9)), (5, (8, 6))):
        for a in agents:
            q[row, col(a, 1)] = q[row, col(a, 2)] = 1.0
    q[3, col(1, 1)] = q[3, col(10, 1)] = 1.0
    lin[3, col(5, 1)] = 1.0
    q[4, col(4, 2)] = 1.0
    lin[4, col(7, 1)] = lin[4, col(9, 2)] = 1.0
    offset = np.array([10.0, 50.0, 50.0, 50.0, 20.0, 30.0])

    if constants == "published":
        blocks = {}
        for i in range(1, 11):
            wide = i in _REFERENCE_WIDE_AGENTS
            blocks[(i, 1)] = 4.0 if wide else 2.0
            blocks[(i, 2)] = math.sqrt(8.0) if wide else 2.0
        constraint = quadratic_constraint(
            q, lin, offset, boxes, lipschitz_g=_REFERENCE_LIPSCHITZ_G, lipschitz_blocks=blocks
        )
    elif constants == "analytic":
        constraint = quadratic_constraint(q, lin, offset, boxes)
    else:
        raise ProblemError(f"unknown constants source: {constants!r}")

    return ProblemSpec(objectives, boxes, constraint, np.zeros(20), name="reference10")


def build_scalar_problem() -> ProblemSpec:
    """f(x) = x^2 subject to 1 - x <= 0 on [-10, 10]; KKT point (1, 2)."""
    boxes = (BoxSet((-10.0,), (10.0,)),)
    constraint = quadratic_constraint(np.zeros((1, 1)), np.array([[-1.0]]), np.array([-1.0]), boxes)
    return ProblemSpec((quadratic_distance(1, (0.0,)),), boxes, constraint, np.array([5.0]), name="scalar")


def _term_from_config(agent_id: int, a: AgentTermConfig, box: BoxSet) -> ObjectiveTerm:
    if a.kind == "quadratic_distance":
        return quadratic_distance(agent_id, a.center or (0.0,) * box.dim)
    if a.kind == "fourth_power_distance":
        return fourth_power_distance(agent_id, a.center or (0.0,) * box.dim, box)
    if a.kind == "linear":
        return linear(agent_id, a.weights or (1.0,) * box.dim, a.offset)
    return constant(agent_id, box.dim, a.offset)


def _constraint_from_rows(rows: Sequence[ConstraintRowConfig], boxes: Sequence[BoxSet]) -> ConstraintFunction:
    blocks = _blocks_for(boxes)
    n = blocks[-1].stop
    q = np.zeros((len(rows), n))
    lin = np.zeros((len(rows), n))

    def col(agent: int, comp: int) -> int:
        if not (1 <= agent <= len(blocks)):
            raise ProblemError(f"constraint refers to unknown agent {agent}")
        blk = blocks[agent - 1]
        if not (1 <= comp <= blk.stop - blk.start):
            raise ProblemError(f"constraint refers to unknown component {comp} of agent {agent}")
        return blk.start + comp - 1

    for j, row in enumerate(rows):
        for agent, comp, coef in row.quadratic:
            q[j, col(agent, comp)] += coef
        for agent, comp, coef in row.linear:
            lin[j, col(agent, comp)] += coef
    return quadratic_constraint(q, lin, np.array([r.offset for r in rows]), boxes)


def build_problem(cfg: ProblemConfig) -> ProblemSpec:
    if cfg.name == "reference10":
        return build_reference_problem(cfg.constants)
    if cfg.name == "scalar":
        return build_scalar_problem()

    boxes = tuple(BoxSet(a.lower, a.upper) for a in cfg.agents)
    objectives = tuple(_term_from_config(i, a, box) for i, (a, box) in enumerate(zip(cfg.agents, boxes), start=1))
    constraint = _constraint_from_rows(cfg.constraints, boxes)
    n = sum(b.dim for b in boxes)
    slater = np.array(cfg.slater_point, dtype=float) if cfg.slater_point else np.zeros(n)
    return ProblemSpec(objectives, boxes, constraint, slater, name="custom")


# ---------------------------------------------------------------------------
# numeric oracles


def _pnorm(v: np.ndarray, p: int) -> float:
    return float(np.sum(np.abs(v))) if p == 1 else float(np.sqrt(v @ v))


def estimate_lipschitz(fn: VectorFn, domain: BoxSet, p: int, samples: int, seed: int) -> float:
    """
    Max over random pairs (a, b) in `domain` of |fn(a) - fn(b)|_p / |a - b|_p.

    Matrix-valued outputs are flattened (entrywise p-norm). The result is a lower bound
    on the true constant; a degenerate domain yields 0.
    """
    if samples < 2:
        raise ValueError("samples must be >= 2")
    if p not in (1, 2):
        raise ValueError("p must be 1 or 2")
    rng = np.random.default_rng(seed)
    a = domain.sample(rng, samples)
    b = domain.sample(rng, samples)
    diff = a - b
    dx = np.sum(np.abs(diff), axis=1) if p == 1 else np.sqrt(np.sum(diff * diff, axis=1))

    best = 0.0
    for ai, bi, d in zip(a, b, dx):
        if d <= 0.0:
            continue
        dy = np.asarray(fn(ai), dtype=float).reshape(-1) - np.asarray(fn(bi), dtype=float).reshape(-1)
        best = max(best, _pnorm(dy, p) / d)
    return best


def _central_difference(fn: VectorFn, x: np.ndarray) -> np.ndarray:
    # columns are partial derivatives; scalar fns give a 1-row matrix
    cols = []
    for j in range(x.size):
        h = 1e-5 * max(1.0, abs(x[j]))
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        fp = np.atleast_1d(np.asarray(fn(xp), dtype=float))
        fm = np.atleast_1d(np.asarray(fn(xm), dtype=float))
        cols.append((fp - fm) / (xp[j] - xm[j]))
    return np.stack(cols, axis=1)


def _relative_error(numeric: np.ndarray, analytic: np.ndarray) -> float:
    scale = max(1.0, float(np.max(np.abs(analytic))) if analytic.size else 0.0)
    return float(np.max(np.abs(numeric - analytic))) / scale


@dataclass
class GradientReport:
    errors: dict[str, float]
    convexity_violations: dict[str, float]
    tolerance: float = GRADIENT_TOL

    @property
    def flagged(self) -> list[str]:
        bad = [name for name, e in self.errors.items() if not e <= self.tolerance]
        bad += [f"convexity:{name}" for name, v in self.convexity_violations.items() if v > CONVEXITY_TOL]
        return bad

    @property
    def passed(self) -> bool:
        return not self.flagged


def check_gradients(spec: ProblemSpec, samples: int, seed: int) -> GradientReport:
    """
    Central-difference check of every grad f_i and of g_x at interior sample points,
    plus a convexity spot-check of every f_i and g_j along random chords.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    convexity: dict[str, float] = {}

    for obj, box in zip(spec.objectives, spec.boxes):
        name = f"f_{obj.agent_id}"
        worst = 0.0
        for x in box.sample(rng, samples, margin=0.01):
            num = _central_difference(lambda v: obj.value(v), x)[0]
            worst = max(worst, _relative_error(num, np.asarray(obj.grad(x), dtype=float)))
        errors[name] = worst
        convexity[name] = _convexity_violation(lambda v: np.atleast_1d(obj.value(v)), box, rng, samples)[0]

    full = BoxSet(spec.lower, spec.upper)
    worst = 0.0
    for x in full.sample(rng, samples, margin=0.01):
        num = _central_difference(spec.constraint.value, x)
        worst = max(worst, _relative_error(num, spec.constraint.jacobian(x)))
    errors["g_x"] = worst
    for j, v in enumerate(_convexity_violation(spec.constraint.value, full, rng, samples), start=1):
        convexity[f"g_{j}"] = v

    report = GradientReport(errors, convexity)
    if report.flagged:
        log.warning("gradient check flagged: %s", ", ".join(report.flagged))
    return report


def _convexity_violation(fn: VectorFn, box: BoxSet, rng: np.random.Generator, samples: int) -> np.ndarray:
    a = box.sample(rng, samples)
    b = box.sample(rng, samples)
    lam = rng.random(samples)
    worst = None
    for ai, bi, t in zip(a, b, lam):
        fa = np.asarray(fn(ai), dtype=float)
        fb = np.asarray(fn(bi), dtype=float)
        fm = np.asarray(fn(t * ai + (1 - t) * bi), dtype=float)
        chord = t * fa + (1 - t) * fb
        # roundoff allowance scales with the magnitude of the values involved
        slack = 1e-13 * np.maximum(1.0, np.abs(chord))
        v = fm - chord - slack
        worst = v if worst is None else np.maximum(worst, v)
    return np.maximum(worst, 0.0)
