from __future__ import annotations

from typing import Any

import numpy as np
from pydantic import BaseModel, Field

from .solver import ReferenceSolution


class ReferenceArtifact(BaseModel):
    # no timestamps: a rerun with the same config writes the same bytes
    config_hash: str
    problem: str
    x0: list[float]
    mu0: list[float]
    kkt_residual: float = Field(ge=0)
    tolerance: float = Field(gt=0)
    radius: float = Field(gt=0)
    x0_norm: float
    mu0_norm: float

    @classmethod
    def from_solution(cls, sol: ReferenceSolution, *, config_hash: str, problem: str) -> ReferenceArtifact:
        return cls(
            config_hash=config_hash,
            problem=problem,
            x0=[float(v) for v in sol.x0],
            mu0=[float(v) for v in sol.mu0],
            kkt_residual=sol.kkt_residual,
            tolerance=sol.tolerance,
            radius=sol.radius,
            x0_norm=float(np.linalg.norm(sol.x0)),
            mu0_norm=float(np.linalg.norm(sol.mu0)),
        )

    def to_solution(self) -> ReferenceSolution:
        return ReferenceSolution(
            x0=np.array(self.x0, dtype=float),
            mu0=np.array(self.mu0, dtype=float),
            kkt_residual=self.kkt_residual,
            radius=self.radius,
            tolerance=self.tolerance,
        )


class TraceMetadata(BaseModel):
    """Sidecar record of one trace CSV."""

    config_hash: str
    seed: int
    mode: str
    problem: str
    config: dict[str, Any]
    radius: float
    sensitivities: dict[str, float] = Field(default_factory=dict)
    noise_scales: dict[str, float] = Field(default_factory=dict)
    iterations: int
    stopped_early: bool = False
    wall_time: float = 0.0
    has_reference: bool = False
    final_x: list[float] = Field(default_factory=list)
    final_mu: list[float] = Field(default_factory=list)


class SeedSummary(BaseModel):
    seed: int
    iterations: int
    wall_time: float
    initial_primal_error: float | None = None
    midpoint_primal_error: float | None = None
    final_primal_error: float | None = None
    initial_dual_error: float | None = None
    midpoint_dual_error: float | None = None
    final_dual_error: float | None = None
    kkt_residual: float | None = None
    trace_file: str = ""


class ErrorStats(BaseModel):
    median: float
    min: float
    max: float

    @classmethod
    def of(cls, values: list[float | None]) -> ErrorStats | None:
        vals = [v for v in values if v is not None]
        if not vals:
            return None
        arr = np.array(vals, dtype=float)
        return cls(median=float(np.median(arr)), min=float(arr.min()), max=float(arr.max()))


class RunSummaryModel(BaseModel):
    config_hash: str
    mode: str
    problem: str
    seeds: list[SeedSummary]
    midpoint_k: int = 0
    midpoint_primal: ErrorStats | None = None
    final_primal: ErrorStats | None = None
    final_dual: ErrorStats | None = None


class TradeoffRow(BaseModel):
    epsilon: float
    k_w: float
    penalty: float


class CheckpointRow(BaseModel):
    k: int
    bound: float
    observed_max: float | None = None  # largest squared error over the traces


class AnalysisSummary(BaseModel):
    config_hash: str
    lipschitz_g: float
    m_xi: float
    d_z: float
    k_w: float
    theta: float
    threshold_m: float | None = None
    threshold_m_hat: float | None = None
    sigma_total_bound: float
    sigma_total_bound_scaled: float | None = None
    sigma_total_approximate: bool = True
    probability_k: int
    tail_at_k: float
    e_k_bound: float
    eps_ball: float
    probability: float
    tau_clipped: bool = False
    tradeoff: list[TradeoffRow] = Field(default_factory=list)
    checkpoints: list[CheckpointRow] = Field(default_factory=list)
    observed_below_bound: bool | None = None
    traces: list[str] = Field(default_factory=list)
