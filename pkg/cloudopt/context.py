from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Literal

import numpy as np

from . import checks
from .analysis import (
    AnalysisConfig,
    build_analysis_config,
    error_bound_from_terms,
    sigma_tail_bound,
    sigma_total_bound,
    sigma_total_bound_scaled,
    terms_at,
    tradeoff_curve,
)
from .cloudsim import simulate
from .config import ConfigError, RunConfig, _to_dict, config_hash
from .geometry import DualSet, compute_dual_radius
from .models import (
    AnalysisSummary,
    CheckpointRow,
    ErrorStats,
    ReferenceArtifact,
    RunSummaryModel,
    SeedSummary,
    TraceMetadata,
    TradeoffRow,
)
from .paths import output_root
from .privacy import NoiseBank, PrivacyPolicy, sensitivities
from .problem import ProblemSpec, build_problem
from .runtime import CsvTable, RunTrace, read_rows_csv, write_rows_csv, write_trace_csv
from .schedule import ScheduleError, StepSchedule, validate
from .solver import NumericalError, ReferenceSolution, SaddleMap, SolverConfig, compute_reference, estimate_saddle_lipschitz, solve

log = logging.getLogger(__name__)

RunMode = Literal["solve", "cloudsim"]

TERM_GRID_POINTS = 200


def trace_stem(mode: RunMode, seed: int) -> str:
    return f"trace_{mode}_seed{seed}"


@dataclass(frozen=True)
class SeedJob:
    # everything a worker process needs; the problem is rebuilt from cfg there
    cfg: RunConfig
    config_hash: str
    mode: RunMode
    seed: int
    radius: float
    reference: ReferenceSolution | None
    out_dir: Path


def _error_at(values: list[float] | None, index: int) -> float | None:
    return None if values is None else float(values[index])


def summarize_trace(trace: RunTrace, trace_file: str) -> SeedSummary:
    """Initial, midpoint and final errors of one trace (midpoint = last recorded k <= iterations / 2)."""
    mid_k = trace.iterations // 2
    mid = max(i for i, k in enumerate(trace.ks) if k <= mid_k)
    return SeedSummary(
        seed=trace.seed,
        iterations=trace.iterations,
        wall_time=trace.wall_time,
        initial_primal_error=_error_at(trace.primal_error, 0),
        midpoint_primal_error=_error_at(trace.primal_error, mid),
        final_primal_error=_error_at(trace.primal_error, -1),
        initial_dual_error=_error_at(trace.dual_error, 0),
        midpoint_dual_error=_error_at(trace.dual_error, mid),
        final_dual_error=_error_at(trace.dual_error, -1),
        kkt_residual=trace.kkt.get(trace.ks[-1]) if trace.kkt else None,
        trace_file=trace_file,
    )


def _sensitivity_record(spec: ProblemSpec, policy: PrivacyPolicy) -> dict[str, float]:
    if not policy.active:
        return {}
    sens = sensitivities(spec, policy.bound, policy.p)
    out = {"delta_g": sens.delta_g}
    out.update({f"delta_{i}": v for i, v in sorted(sens.delta_blocks.items())})
    return out


def run_seed_job(job: SeedJob) -> SeedSummary:
    """One seed of `run`/`simulate`; writes the trace CSV and its metadata sidecar."""
    cfg = job.cfg
    spec = build_problem(cfg.problem)
    dual_set = DualSet(spec.m, job.radius)
    schedule = StepSchedule.from_config(cfg.schedule)
    solver_cfg = SolverConfig.from_settings(cfg.solver, schedule)
    policy = PrivacyPolicy.from_config(cfg.privacy)
    stem = trace_stem(job.mode, job.seed)

    if job.mode == "cloudsim":
        event_log = job.out_dir / f"events_seed{job.seed}.jsonl" if cfg.output.event_log else None
        trace, _ = simulate(
            spec,
            solver_cfg,
            policy,
            job.seed,
            dual_set=dual_set,
            reference=job.reference,
            noisy_dual=cfg.privacy.noisy_dual,
            debug=cfg.output.debug,
            event_log=event_log,
            keep_logs=False,
        )
    else:
        trace = solve(
            spec,
            solver_cfg,
            policy,
            job.seed,
            dual_set=dual_set,
            reference=job.reference,
            noisy_dual=cfg.privacy.noisy_dual,
        )

    write_trace_csv(job.out_dir / f"{stem}.csv", trace, job.config_hash)
    bank = NoiseBank.for_policy(spec, policy, job.seed, noisy_dual=cfg.privacy.noisy_dual)
    meta = TraceMetadata(
        config_hash=job.config_hash,
        seed=job.seed,
        mode=job.mode,
        problem=cfg.problem.name,
        config=_to_dict(cfg),
        radius=dual_set.radius,
        sensitivities=_sensitivity_record(spec, policy),
        noise_scales=bank.scales(),
        iterations=trace.iterations,
        stopped_early=trace.stopped_early,
        wall_time=trace.wall_time,
        has_reference=trace.has_reference,
        final_x=[float(v) for v in trace.xs[-1]],
        final_mu=[float(v) for v in trace.mus[-1]],
    )
    (job.out_dir / f"{stem}.json").write_text(meta.model_dump_json(indent=2), encoding="utf-8")
    log.info("seed %d: %d iterations in %.1fs -> %s.csv", job.seed, trace.iterations, trace.wall_time, stem)
    return summarize_trace(trace, f"{stem}.csv")


class ExperimentContext:
    """
    Owns one validated RunConfig and the artifacts it produces under the output directory.
    """

    def __init__(self, project_root: Path, cfg: RunConfig) -> None:
        self.project_root = project_root
        self.cfg = cfg
        self.config_hash = config_hash(cfg)
        self.out_dir = output_root(cfg.output.directory, project_root)
        self.spec = build_problem(cfg.problem)
        self.schedule = StepSchedule.from_config(cfg.schedule)
        self.policy = PrivacyPolicy.from_config(cfg.privacy)
        self._dual_set: DualSet | None = None

    @property
    def dual_set(self) -> DualSet:
        if self._dual_set is None:
            self._dual_set = compute_dual_radius(self.spec, self.cfg.problem.radius_override)
            log.info("dual radius R = %.6g", self._dual_set.radius)
        return self._dual_set

    @property
    def reference_path(self) -> Path:
        p = Path(self.cfg.reference.path).expanduser()
        return p if p.is_absolute() else self.out_dir / p

    def solver_config(self) -> SolverConfig:
        return SolverConfig.from_settings(self.cfg.solver, self.schedule)

    def validate_schedule(self) -> None:
        report = validate(self.schedule, max(self.cfg.solver.iterations, 10))
        for c in report.conditions:
            log.debug("schedule condition %d (%s): %s", c.index, c.name, c.detail)
        if not report.valid:
            failed = "; ".join(c.detail for c in report.conditions if not c.passed)
            raise ScheduleError(f"step-size schedule violates condition(s) {report.failures}: {failed}")

    # ------------------------------------------------------------------ reference

    def compute_reference(self) -> tuple[ReferenceSolution, Path]:
        """Noise-free z0; raises NumericalError when the KKT residual misses the tolerance."""
        r = self.cfg.reference
        sol = compute_reference(
            self.spec,
            self.dual_set,
            self.schedule,
            tikhonov_iters=r.tikhonov_iters,
            refine_iters=r.refine_iters,
            tolerance=r.tolerance,
            check_every=r.check_every,
        )
        if not sol.converged:
            raise NumericalError(
                f"reference KKT residual {sol.kkt_residual:.3g} is above the tolerance {r.tolerance:.3g}",
                quantity="kkt_residual",
            )
        art = ReferenceArtifact.from_solution(sol, config_hash=self.config_hash, problem=self.cfg.problem.name)
        path = self.reference_path
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(art.model_dump_json(indent=2), encoding="utf-8")
        log.info("reference: |x0| = %.6g, |mu0| = %.6g, residual %.3g -> %s", art.x0_norm, art.mu0_norm, art.kkt_residual, path)
        return sol, path

    def load_reference(self) -> ReferenceSolution | None:
        path = self.reference_path
        if not path.exists():
            log.warning("no reference solution at %s; error columns are omitted", path)
            return None
        art = ReferenceArtifact.model_validate_json(path.read_text(encoding="utf-8"))
        if art.problem != self.cfg.problem.name or len(art.x0) != self.spec.n or len(art.mu0) != self.spec.m:
            log.warning("reference at %s belongs to another problem (%s); error columns are omitted", path, art.problem)
            return None
        if not math.isclose(art.radius, self.dual_set.radius, rel_tol=1e-9):
            log.warning("reference at %s used R=%g, current R=%g", path, art.radius, self.dual_set.radius)
        return art.to_solution()

    # ------------------------------------------------------------------ runs

    def run_seeds(self, mode: RunMode) -> tuple[RunSummaryModel, Path]:
        self.validate_schedule()
        reference = self.load_reference()
        self.out_dir.mkdir(parents=True, exist_ok=True)
        jobs = [
            SeedJob(self.cfg, self.config_hash, mode, seed, self.dual_set.radius, reference, self.out_dir)
            for seed in self.cfg.seeds
        ]
        workers = min(self.cfg.output.workers, len(jobs))
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                seeds = list(pool.map(run_seed_job, jobs))
        else:
            seeds = [run_seed_job(job) for job in jobs]

        summary = RunSummaryModel(
            config_hash=self.config_hash,
            mode=mode,
            problem=self.cfg.problem.name,
            seeds=seeds,
            midpoint_k=self.cfg.solver.iterations // 2,
            midpoint_primal=ErrorStats.of([s.midpoint_primal_error for s in seeds]),
            final_primal=ErrorStats.of([s.final_primal_error for s in seeds]),
            final_dual=ErrorStats.of([s.final_dual_error for s in seeds]),
        )
        path = self.out_dir / f"summary_{mode}.json"
        path.write_text(summary.model_dump_json(indent=2), encoding="utf-8")
        fields = list(SeedSummary.model_fields)
        write_rows_csv(
            self.out_dir / f"summary_{mode}.csv",
            {"config_hash": self.config_hash, "seeds": ",".join(str(s) for s in self.cfg.seeds)},
            fields,
            [s.model_dump() for s in seeds],
        )
        if summary.final_primal is not None:
            log.info(
                "final primal error over %d seed(s): median %.4g [%.4g, %.4g]",
                len(seeds),
                summary.final_primal.median,
                summary.final_primal.min,
                summary.final_primal.max,
            )
        return summary, path

    # ------------------------------------------------------------------ analysis

    def _trace_files(self, paths: list[Path] | None) -> list[Path]:
        if paths:
            return [Path(p) for p in paths]
        found = sorted(self.out_dir.glob("trace_*_seed*.csv"))
        if not found:
            raise ConfigError(f"no trace files in {self.out_dir}; run `run` or `simulate` first")
        return found

    def _load_metadata(self, trace_path: Path) -> TraceMetadata:
        meta_path = trace_path.with_suffix(".json")
        if not meta_path.exists():
            raise ConfigError(f"trace {trace_path} has no metadata sidecar {meta_path.name}")
        meta = TraceMetadata.model_validate_json(meta_path.read_text(encoding="utf-8"))
        expected = _to_dict(self.cfg)["schedule"]
        if meta.config.get("schedule") != expected:
            raise ConfigError(
                f"trace {trace_path.name} was produced with schedule {meta.config.get('schedule')}, "
                f"but the analysis config uses {expected}"
            )
        return meta

    def analyze(self, trace_paths: list[Path] | None = None) -> tuple[AnalysisSummary, Path]:
        """
        Sequence terms, bounds, the probability estimate and the trade-off table, joined
        with the observed errors of the given traces (default: every trace in the output directory).
        """
        cfg = self.cfg
        files = self._trace_files(trace_paths)
        metas = [self._load_metadata(p) for p in files]
        tables = [read_rows_csv(p) for p in files]

        G = SaddleMap(self.spec, self.dual_set)
        lipschitz_g = estimate_saddle_lipschitz(G, cfg.analysis.lipschitz_samples, seed=cfg.seeds[0])
        bank = NoiseBank.for_policy(self.spec, self.policy, cfg.seeds[0], noisy_dual=cfg.privacy.noisy_dual)
        acfg, choice = build_analysis_config(
            self.spec, self.dual_set, self.schedule, lipschitz_g, noise=bank, theta=cfg.analysis.theta
        )
        log.info("L_G ~ %.6g, theta = %.4g, K_w = %.6g", lipschitz_g, acfg.theta, acfg.k_w)

        horizon = max(
            [cfg.analysis.probability_k, *cfg.analysis.checkpoints, *(m.iterations for m in metas), 2]
        )
        terms = terms_at(acfg, self.schedule, np.arange(1, horizon, dtype=float))
        clipped_any = False

        def bound(k: int) -> float:
            nonlocal clipped_any
            value, clipped = error_bound_from_terms(terms.tau, terms.sigma, acfg.d_z, k)
            clipped_any = clipped_any or clipped
            return value

        grid = np.unique(np.round(np.geomspace(1, horizon, TERM_GRID_POINTS)).astype(int))
        grid = np.union1d(grid, [k for k in cfg.analysis.checkpoints if 1 <= k <= horizon])
        grid_terms = terms_at(acfg, self.schedule, grid.astype(float))
        rows = [
            {
                "k": int(k),
                "theta_k": float(grid_terms.theta_k[i]),
                "rho": float(grid_terms.rho[i]),
                "tau": float(grid_terms.tau[i]),
                "sigma": float(grid_terms.sigma[i]),
                "bound_k": bound(int(k)),
            }
            for i, k in enumerate(grid)
        ]
        header = {"config_hash": self.config_hash, "seed": cfg.seeds[0]}
        write_rows_csv(self.out_dir / "analysis_terms.csv", header, ["k", "theta_k", "rho", "tau", "sigma", "bound_k"], rows)

        pk = cfg.analysis.probability_k
        e_k = bound(pk)
        tail = sigma_tail_bound(acfg, self.schedule, pk)
        probability = 1.0 - (e_k + tail) / cfg.analysis.eps_ball

        tradeoff: list[TradeoffRow] = []
        if cfg.privacy.mechanism == "gaussian":
            log.info("trade-off table covers the Laplace mechanism only; skipped")
        else:
            sens = sensitivities(self.spec, cfg.privacy.bound, 1)
            for pt in tradeoff_curve(acfg, self.schedule, sens, cfg.analysis.epsilons):
                tradeoff.append(TradeoffRow(epsilon=pt.epsilon, k_w=pt.k_w, penalty=pt.penalty))
            write_rows_csv(
                self.out_dir / "analysis_tradeoff.csv",
                header,
                ["epsilon", "k_w", "penalty"],
                [t.model_dump() for t in tradeoff],
            )

        checkpoints, below = self._observed_vs_bound(acfg, metas, tables, horizon)
        self._write_figure_series(tables, header)

        summary = AnalysisSummary(
            config_hash=self.config_hash,
            lipschitz_g=lipschitz_g,
            m_xi=acfg.m_xi,
            d_z=acfg.d_z,
            k_w=acfg.k_w,
            theta=acfg.theta,
            threshold_m=None if choice is None else choice.threshold_m,
            threshold_m_hat=None if choice is None or math.isinf(choice.threshold_m_hat) else choice.threshold_m_hat,
            sigma_total_bound=sigma_total_bound(acfg, self.schedule),
            sigma_total_bound_scaled=sigma_total_bound_scaled(acfg, self.schedule),
            probability_k=pk,
            tail_at_k=tail,
            e_k_bound=e_k,
            eps_ball=cfg.analysis.eps_ball,
            probability=probability,
            tau_clipped=clipped_any,
            tradeoff=tradeoff,
            checkpoints=checkpoints,
            observed_below_bound=below,
            traces=[p.name for p in files],
        )
        path = self.out_dir / "analysis_summary.json"
        path.write_text(summary.model_dump_json(indent=2), encoding="utf-8")
        if probability < 0:
            log.info("probability estimate %.4g at k=%d is vacuous", probability, pk)
        return summary, path

    def _observed_vs_bound(
        self, acfg: AnalysisConfig, metas: list[TraceMetadata], tables: list[CsvTable], horizon: int
    ) -> tuple[list[CheckpointRow], bool | None]:
        """
        Squared observed error |z(k) - z0|^2 at each checkpoint against E_k; noise-free
        traces are held to the K_w = 0 bound.
        """
        noise_free = all(m.config.get("privacy", {}).get("mechanism") == "none" for m in metas)
        with_errors = [t for t in tables if "primal_error" in t.columns]
        bcfg = replace(acfg, k_w=0.0) if noise_free else acfg
        terms = terms_at(bcfg, self.schedule, np.arange(1, horizon, dtype=float))

        rows = []
        below = True
        for k in self.cfg.analysis.checkpoints:
            if not 1 <= k <= horizon:
                continue
            value, _ = error_bound_from_terms(terms.tau, terms.sigma, bcfg.d_z, k)
            observed = []
            for t in with_errors:
                hit = np.flatnonzero(t.columns["k"] == k)
                if hit.size:
                    i = int(hit[0])
                    observed.append(float(t.columns["primal_error"][i] ** 2 + t.columns["dual_error"][i] ** 2))
            obs = max(observed) if observed else None
            if obs is not None and obs > value:
                below = False
            rows.append(CheckpointRow(k=k, bound=value, observed_max=obs))
        if not with_errors:
            return rows, None
        if not below:
            log.warning("observed squared error exceeds the expected-error bound at a checkpoint")
        return rows, below if noise_free else None

    def _write_figure_series(self, tables: list[CsvTable], header: dict[str, object]) -> None:
        # |x(k) - x0| and |mu(k) - mu0| across seeds at the k recorded by every trace
        with_errors = [t for t in tables if "primal_error" in t.columns]
        if not with_errors:
            return
        common = with_errors[0].columns["k"]
        for t in with_errors[1:]:
            common = np.intersect1d(common, t.columns["k"])
        rows = []
        for k in common:
            primal = []
            dual = []
            for t in with_errors:
                i = int(np.flatnonzero(t.columns["k"] == k)[0])
                primal.append(t.columns["primal_error"][i])
                dual.append(t.columns["dual_error"][i])
            rows.append(
                {
                    "k": int(k),
                    "primal_median": float(np.median(primal)),
                    "primal_min": float(np.min(primal)),
                    "primal_max": float(np.max(primal)),
                    "dual_median": float(np.median(dual)),
                    "dual_min": float(np.min(dual)),
                    "dual_max": float(np.max(dual)),
                }
            )
        write_rows_csv(
            self.out_dir / "analysis_figure.csv",
            header,
            ["k", "primal_median", "primal_min", "primal_max", "dual_median", "dual_min", "dual_max"],
            rows,
        )

    # ------------------------------------------------------------------ checks

    def check(self, samples: int) -> list[checks.CheckResult]:
        report = validate(self.schedule, max(self.cfg.solver.iterations, 10))
        results = [
            checks.CheckResult(f"schedule condition {c.index}", c.passed, c.detail) for c in report.conditions
        ]
        reference = self.load_reference()
        results += checks.run_all(
            self.spec,
            self.dual_set,
            self.solver_config(),
            self.policy,
            samples=samples,
            seed=self.cfg.seeds[0],
            reference=reference,
        )
        return results
