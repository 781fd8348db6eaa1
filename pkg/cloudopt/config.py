from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal

import yaml

CONFIG_PATH = "config.yaml"

ProblemName = Literal["reference10", "scalar", "custom"]
ConstantsSource = Literal["published", "analytic"]
TermKind = Literal["quadratic_distance", "linear", "fourth_power_distance", "constant"]
MechanismName = Literal["none", "laplace", "gaussian"]
RunMode = Literal["solve", "cloudsim", "analyze", "reference"]

_PROBLEM_NAMES = ("reference10", "scalar", "custom")
_CONSTANTS = ("published", "analytic")
_TERM_KINDS = ("quadratic_distance", "linear", "fourth_power_distance", "constant")
_MECHANISMS = ("none", "laplace", "gaussian")
_MODES = ("solve", "cloudsim", "analyze", "reference")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AgentTermConfig:
    # one agent: its objective primitive and its box X_i
    kind: TermKind = "quadratic_distance"
    lower: tuple[float, ...] = (-10.0, -10.0)
    upper: tuple[float, ...] = (10.0, 10.0)
    center: tuple[float, ...] = ()
    weights: tuple[float, ...] = ()
    offset: float = 0.0


@dataclass(frozen=True)
class ConstraintRowConfig:
    # g_j(x) = sum q * x[a,c]^2 + sum l * x[a,c] - offset; entries are (agent, component, coef), 1-based
    offset: float = 0.0
    quadratic: tuple[tuple[int, int, float], ...] = ()
    linear: tuple[tuple[int, int, float], ...] = ()


@dataclass(frozen=True)
class ProblemConfig:
    name: ProblemName = "reference10"
    constants: ConstantsSource = "published"
    agents: tuple[AgentTermConfig, ...] = ()
    constraints: tuple[ConstraintRowConfig, ...] = ()
    slater_point: tuple[float, ...] = ()
    radius_override: float | None = None


@dataclass(frozen=True)
class ScheduleConfig:
    alpha_bar: float = 0.1
    gamma_bar: float = 0.01
    c1: float = 0.3
    c2: float = 0.52


@dataclass(frozen=True)
class PrivacyConfig:
    mechanism: MechanismName = "laplace"
    epsilon: float = math.log(2.0)
    delta: float = 0.0
    bound: float = 1.0  # adjacency parameter B
    noisy_dual: bool = True  # cloud drives mu with the privatized g


@dataclass(frozen=True)
class SolverSettings:
    iterations: int = 100_000
    fixed_point_tol: float = 0.0
    record_every: int = 10
    dense_until: int = 1000  # every iterate is recorded up to here
    kkt_every: int = 0  # 0 = no residual column


@dataclass(frozen=True)
class ReferenceConfig:
    path: str = "reference.json"
    tikhonov_iters: int = 1_000_000
    refine_iters: int = 200_000
    tolerance: float = 1e-4
    check_every: int = 1000


@dataclass(frozen=True)
class AnalysisSettings:
    epsilons: tuple[float, ...] = (0.1, math.log(2.0), math.log(3.0))
    eps_ball: float = 1.0
    probability_k: int = 100_000
    lipschitz_samples: int = 20_000
    theta: float | None = None  # None = chosen from the proof thresholds
    checkpoints: tuple[int, ...] = (100, 1000, 10_000, 100_000)


@dataclass(frozen=True)
class OutputConfig:
    directory: str = "runs"
    workers: int = 1
    event_log: bool = False
    debug: bool = False


@dataclass(frozen=True)
class RunConfig:
    mode: RunMode = "solve"
    seeds: tuple[int, ...] = tuple(range(10))
    problem: ProblemConfig = ProblemConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    privacy: PrivacyConfig = PrivacyConfig()
    solver: SolverSettings = SolverSettings()
    reference: ReferenceConfig = ReferenceConfig()
    analysis: AnalysisSettings = AnalysisSettings()
    output: OutputConfig = OutputConfig()


DEFAULT_CONFIG = RunConfig()


def load_config(path: Path) -> RunConfig:
    data = {}
    if path.exists():
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return _parse_config_dict(data)


def save_config(cfg: RunConfig, path: Path) -> None:
    path.write_text(
        yaml.safe_dump(_to_dict(cfg), sort_keys=False, allow_unicode=True),
        encoding="utf-8",
    )


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """
    Apply dotted `key=value` overrides, e.g. `solver.iterations=1000`.
    Values are parsed as YAML scalars/lists.
    """
    if not overrides:
        return cfg
    d = _to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value: {item!r}")
        key, raw = item.split("=", 1)
        parts = [p for p in key.strip().split(".") if p]
        if not parts:
            raise ConfigError(f"empty override key: {item!r}")
        node = d
        for p in parts[:-1]:
            nxt = node.get(p)
            if not isinstance(nxt, dict):
                raise ConfigError(f"unknown config section: {key}")
            node = nxt
        node[parts[-1]] = yaml.safe_load(raw)
    return _parse_config_dict(d)


def validate_config(cfg: RunConfig) -> tuple[bool, str | None]:
    """
    Return (ok, error_message).
    """
    s = cfg.solver
    if s.iterations < 1:
        return False, "solver.iterations must be >= 1"
    if s.record_every < 1:
        return False, "solver.record_every must be >= 1"
    if s.fixed_point_tol < 0:
        return False, "solver.fixed_point_tol must be >= 0"
    if not cfg.seeds:
        return False, "seeds must list at least one seed"

    sch = cfg.schedule
    if sch.alpha_bar <= 0 or sch.gamma_bar <= 0:
        return False, "schedule.alpha_bar and schedule.gamma_bar must be positive"

    pv = cfg.privacy
    if pv.mechanism != "none":
        if pv.epsilon <= 0:
            return False, "privacy.epsilon must be positive"
        if pv.bound <= 0:
            return False, "privacy.bound (B) must be positive"
        if pv.mechanism == "laplace" and pv.delta != 0:
            return False, "privacy.delta must be 0 for the laplace mechanism"
        if pv.mechanism == "gaussian" and not (0 < pv.delta < 0.5):
            return False, "privacy.delta must lie in (0, 1/2) for the gaussian mechanism"

    pb = cfg.problem
    if pb.name == "custom":
        if not pb.agents:
            return False, "problem.agents is required when problem.name=custom"
        if not pb.constraints:
            return False, "problem.constraints is required when problem.name=custom"
    if pb.radius_override is not None and pb.radius_override <= 0:
        return False, "problem.radius_override must be positive"

    if cfg.output.workers < 1:
        return False, "output.workers must be >= 1"
    if cfg.reference.tolerance <= 0:
        return False, "reference.tolerance must be positive"
    if any(e <= 0 for e in cfg.analysis.epsilons):
        return False, "analysis.epsilons must be positive"
    return True, None


def _choice(raw: Any, allowed: tuple[str, ...], default: str) -> Any:
    v = str(raw if raw is not None else default).strip().lower()
    return v if v in allowed else default


def _floats(raw: Any) -> tuple[float, ...]:
    return tuple(float(v) for v in (raw or ()))


def _entries(raw: Any) -> tuple[tuple[int, int, float], ...]:
    out = []
    for e in raw or ():
        e = list(e)
        coef = float(e[2]) if len(e) > 2 else 1.0
        out.append((int(e[0]), int(e[1]), coef))
    return tuple(out)


def _parse_config_dict(d: dict[str, Any]) -> RunConfig:
    problem = d.get("problem") or {}
    schedule = d.get("schedule") or {}
    privacy = d.get("privacy") or {}
    solver = d.get("solver") or {}
    reference = d.get("reference") or {}
    analysis = d.get("analysis") or {}
    output = d.get("output") or {}

    dp = DEFAULT_CONFIG
    agents = tuple(
        AgentTermConfig(
            kind=_choice(a.get("kind"), _TERM_KINDS, "quadratic_distance"),
            lower=_floats(a.get("lower", AgentTermConfig.lower)),
            upper=_floats(a.get("upper", AgentTermConfig.upper)),
            center=_floats(a.get("center")),
            weights=_floats(a.get("weights")),
            offset=float(a.get("offset", 0.0) or 0.0),
        )
        for a in (problem.get("agents") or ())
    )
    constraints = tuple(
        ConstraintRowConfig(
            offset=float(c.get("offset", 0.0) or 0.0),
            quadratic=_entries(c.get("quadratic")),
            linear=_entries(c.get("linear")),
        )
        for c in (problem.get("constraints") or ())
    )
    radius_override = problem.get("radius_override")

    theta = analysis.get("theta")
    seeds_raw = d.get("seeds", list(dp.seeds))
    if isinstance(seeds_raw, int):
        seeds_raw = [seeds_raw]

    return RunConfig(
        mode=_choice(d.get("mode"), _MODES, dp.mode),
        seeds=tuple(int(s) for s in seeds_raw),
        problem=ProblemConfig(
            name=_choice(problem.get("name"), _PROBLEM_NAMES, dp.problem.name),
            constants=_choice(problem.get("constants"), _CONSTANTS, dp.problem.constants),
            agents=agents,
            constraints=constraints,
            slater_point=_floats(problem.get("slater_point")),
            radius_override=None if radius_override is None else float(radius_override),
        ),
        schedule=ScheduleConfig(
            alpha_bar=float(schedule.get("alpha_bar", dp.schedule.alpha_bar)),
            gamma_bar=float(schedule.get("gamma_bar", dp.schedule.gamma_bar)),
            c1=float(schedule.get("c1", dp.schedule.c1)),
            c2=float(schedule.get("c2", dp.schedule.c2)),
        ),
        privacy=PrivacyConfig(
            mechanism=_choice(privacy.get("mechanism"), _MECHANISMS, dp.privacy.mechanism),
            epsilon=float(privacy.get("epsilon", dp.privacy.epsilon)),
            delta=float(privacy.get("delta", dp.privacy.delta)),
            bound=float(privacy.get("bound", dp.privacy.bound)),
            noisy_dual=bool(privacy.get("noisy_dual", dp.privacy.noisy_dual)),
        ),
        solver=SolverSettings(
            iterations=int(solver.get("iterations", dp.solver.iterations)),
            fixed_point_tol=float(solver.get("fixed_point_tol", dp.solver.fixed_point_tol)),
            record_every=int(solver.get("record_every", dp.solver.record_every)),
            dense_until=int(solver.get("dense_until", dp.solver.dense_until)),
            kkt_every=int(solver.get("kkt_every", dp.solver.kkt_every)),
        ),
        reference=ReferenceConfig(
            path=str(reference.get("path", dp.reference.path)),
            tikhonov_iters=int(reference.get("tikhonov_iters", dp.reference.tikhonov_iters)),
            refine_iters=int(reference.get("refine_iters", dp.reference.refine_iters)),
            tolerance=float(reference.get("tolerance", dp.reference.tolerance)),
            check_every=int(reference.get("check_every", dp.reference.check_every)),
        ),
        analysis=AnalysisSettings(
            epsilons=_floats(analysis.get("epsilons", list(dp.analysis.epsilons))),
            eps_ball=float(analysis.get("eps_ball", dp.analysis.eps_ball)),
            probability_k=int(analysis.get("probability_k", dp.analysis.probability_k)),
            lipschitz_samples=int(analysis.get("lipschitz_samples", dp.analysis.lipschitz_samples)),
            theta=None if theta is None else float(theta),
            checkpoints=tuple(int(k) for k in analysis.get("checkpoints", list(dp.analysis.checkpoints))),
        ),
        output=OutputConfig(
            directory=str(output.get("directory", dp.output.directory)),
            workers=int(output.get("workers", dp.output.workers)),
            event_log=bool(output.get("event_log", dp.output.event_log)),
            debug=bool(output.get("debug", dp.output.debug)),
        ),
    )


def _to_dict(cfg: RunConfig) -> dict[str, Any]:
    pb = cfg.problem
    return {
        "mode": cfg.mode,
        "seeds": list(cfg.seeds),
        "problem": {
            "name": pb.name,
            "constants": pb.constants,
            "agents": [
                {
                    "kind": a.kind,
                    "lower": list(a.lower),
                    "upper": list(a.upper),
                    "center": list(a.center),
                    "weights": list(a.weights),
                    "offset": a.offset,
                }
                for a in pb.agents
            ],
            "constraints": [
                {
                    "offset": c.offset,
                    "quadratic": [list(e) for e in c.quadratic],
                    "linear": [list(e) for e in c.linear],
                }
                for c in pb.constraints
            ],
            "slater_point": list(pb.slater_point),
            "radius_override": pb.radius_override,
        },
        "schedule": {
            "alpha_bar": cfg.schedule.alpha_bar,
            "gamma_bar": cfg.schedule.gamma_bar,
            "c1": cfg.schedule.c1,
            "c2": cfg.schedule.c2,
        },
        "privacy": {
            "mechanism": cfg.privacy.mechanism,
            "epsilon": cfg.privacy.epsilon,
            "delta": cfg.privacy.delta,
            "bound": cfg.privacy.bound,
            "noisy_dual": cfg.privacy.noisy_dual,
        },
        "solver": {
            "iterations": cfg.solver.iterations,
            "fixed_point_tol": cfg.solver.fixed_point_tol,
            "record_every": cfg.solver.record_every,
            "dense_until": cfg.solver.dense_until,
            "kkt_every": cfg.solver.kkt_every,
        },
        "reference": {
            "path": cfg.reference.path,
            "tikhonov_iters": cfg.reference.tikhonov_iters,
            "refine_iters": cfg.reference.refine_iters,
            "tolerance": cfg.reference.tolerance,
            "check_every": cfg.reference.check_every,
        },
        "analysis": {
            "epsilons": list(cfg.analysis.epsilons),
            "eps_ball": cfg.analysis.eps_ball,
            "probability_k": cfg.analysis.probability_k,
            "lipschitz_samples": cfg.analysis.lipschitz_samples,
            "theta": cfg.analysis.theta,
            "checkpoints": list(cfg.analysis.checkpoints),
        },
        "output": {
            "directory": cfg.output.directory,
            "workers": cfg.output.workers,
            "event_log": cfg.output.event_log,
            "debug": cfg.output.debug,
        },
    }
