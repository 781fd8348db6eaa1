from __future__ import annotations

import json

import pytest

from cloudopt.models import AnalysisSummary, ReferenceArtifact, RunSummaryModel
from cloudopt.run import main


def _args(config_file, *extra):
    return ["--config", str(config_file), *extra]


def test_invalid_config_exits_with_validation_code(scalar_config_file):
    assert main(_args(scalar_config_file, "--set", "solver.iterations=0", "run")) == 1


def test_missing_config_file(tmp_path):
    assert main(["--config", str(tmp_path / "nope.yaml"), "run"]) == 1


def test_bad_schedule_is_rejected_before_running(scalar_config_file, scalar_config):
    assert main(_args(scalar_config_file, "--set", "schedule.c1=0.6", "run")) == 1


def test_reference_is_reproducible(scalar_config_file, scalar_config):
    out = scalar_config.output.directory
    assert main(_args(scalar_config_file, "reference")) == 0
    path = f"{out}/reference.json"
    with open(path, encoding="utf-8") as f:
        first = f.read()
    art = ReferenceArtifact.model_validate_json(first)
    assert art.problem == "scalar"
    assert art.x0[0] == pytest.approx(1.0, abs=1e-3)
    assert art.kkt_residual <= 1e-6
    assert main(_args(scalar_config_file, "reference")) == 0
    with open(path, encoding="utf-8") as f:
        assert f.read() == first


def test_unconverged_reference_is_a_numerical_failure(scalar_config_file):
    code = main(
        _args(
            scalar_config_file,
            "--set",
            "reference.tikhonov_iters=10",
            "--set",
            "reference.refine_iters=0",
            "--set",
            "reference.tolerance=1e-12",
            "reference",
        )
    )
    assert code == 2


def test_run_then_analyze(scalar_config_file, scalar_config, tmp_path):
    out = tmp_path / "runs"
    assert main(_args(scalar_config_file, "reference")) == 0
    assert main(_args(scalar_config_file, "run")) == 0

    for seed in scalar_config.seeds:
        trace = out / f"trace_solve_seed{seed}.csv"
        lines = trace.read_text(encoding="utf-8").splitlines()
        assert lines[0].startswith("# config_hash=")
        assert lines[2] == "k,primal_error,dual_error"
        meta = json.loads((out / f"trace_solve_seed{seed}.json").read_text(encoding="utf-8"))
        assert meta["iterations"] == 2000
        assert meta["has_reference"]
    summary = RunSummaryModel.model_validate_json((out / "summary_solve.json").read_text(encoding="utf-8"))
    assert [s.seed for s in summary.seeds] == [0, 1]
    assert summary.final_primal is not None
    assert (out / "summary_solve.csv").exists()

    assert main(_args(scalar_config_file, "analyze")) == 0
    result = AnalysisSummary.model_validate_json((out / "analysis_summary.json").read_text(encoding="utf-8"))
    assert result.k_w > 0
    assert 0.0 < result.theta < 1.0
    assert len(result.tradeoff) == len(scalar_config.analysis.epsilons)
    assert result.observed_below_bound is None
    for name in ("analysis_terms.csv", "analysis_tradeoff.csv", "analysis_figure.csv"):
        assert (out / name).exists()

    # traces from another schedule cannot be analyzed under this one
    assert main(_args(scalar_config_file, "--set", "schedule.c1=0.31", "analyze")) == 1


def test_noise_free_traces_stay_below_bound(scalar_config_file, tmp_path):
    out = tmp_path / "quiet"
    quiet = ("--output", str(out), "--set", "privacy.mechanism=none")
    assert main(_args(scalar_config_file, *quiet, "reference")) == 0
    assert main(_args(scalar_config_file, *quiet, "simulate")) == 0
    assert (out / "trace_cloudsim_seed0.csv").exists()
    assert main(_args(scalar_config_file, *quiet, "analyze")) == 0
    result = AnalysisSummary.model_validate_json((out / "analysis_summary.json").read_text(encoding="utf-8"))
    assert result.k_w == 0.0
    assert result.observed_below_bound is True
    assert all(row.observed_max is not None for row in result.checkpoints)


def test_analyze_without_traces(scalar_config_file):
    assert main(_args(scalar_config_file, "analyze")) == 1


def test_mode_selects_default_verb(scalar_config_file, scalar_config):
    assert main(_args(scalar_config_file, "--set", "mode=cloudsim")) == 0
    out = scalar_config.output.directory
    with open(f"{out}/summary_cloudsim.json", encoding="utf-8") as f:
        assert json.load(f)["mode"] == "cloudsim"


def test_check_suite_passes(scalar_config_file):
    assert main(_args(scalar_config_file, "check", "--samples", "200")) == 0


def test_first_run_creates_config(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["--set", "solver.iterations=0"]) == 1
    assert (tmp_path / "config.yaml").exists()
