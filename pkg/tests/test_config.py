from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import pytest

from cloudopt.bootstrap import ensure_first_run_files
from cloudopt.config import (
    DEFAULT_CONFIG,
    ConfigError,
    apply_overrides,
    config_hash,
    load_config,
    save_config,
    validate_config,
)
from cloudopt.paths import OUTPUT_ROOT_ENV, output_root


def test_save_and_load_preserve_every_field(tmp_path, scalar_config):
    path = tmp_path / "c.yaml"
    save_config(scalar_config, path)
    assert load_config(path) == scalar_config


def test_missing_or_empty_file_gives_defaults(tmp_path):
    assert load_config(tmp_path / "absent.yaml") == DEFAULT_CONFIG
    empty = tmp_path / "empty.yaml"
    empty.write_text("", encoding="utf-8")
    assert load_config(empty) == DEFAULT_CONFIG


def test_non_mapping_rejected(tmp_path):
    path = tmp_path / "list.yaml"
    path.write_text("- 1\n- 2\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(path)


def test_hash_is_short_and_stable(scalar_config):
    h = config_hash(scalar_config)
    assert len(h) == 16
    assert h == config_hash(replace(scalar_config))
    assert h != config_hash(replace(scalar_config, seeds=(0,)))


def test_overrides():
    cfg = apply_overrides(DEFAULT_CONFIG, ["solver.iterations=500", "privacy.mechanism=gaussian", "seeds=[3, 4]"])
    assert cfg.solver.iterations == 500
    assert cfg.privacy.mechanism == "gaussian"
    assert cfg.seeds == (3, 4)
    assert apply_overrides(DEFAULT_CONFIG, []) is DEFAULT_CONFIG


@pytest.mark.parametrize("item", ["nosuch.key=1", "solver", "=3"])
def test_bad_overrides_rejected(item):
    with pytest.raises(ConfigError):
        apply_overrides(DEFAULT_CONFIG, [item])


def test_unknown_choices_fall_back_to_defaults(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("mode: bogus\nprivacy:\n  mechanism: LAPLACE\nproblem:\n  name: nope\n", encoding="utf-8")
    cfg = load_config(path)
    assert cfg.mode == "solve"
    assert cfg.privacy.mechanism == "laplace"
    assert cfg.problem.name == "reference10"


def test_single_seed_scalar_accepted(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("seeds: 7\n", encoding="utf-8")
    assert load_config(path).seeds == (7,)


def test_default_config_is_valid():
    assert validate_config(DEFAULT_CONFIG) == (True, None)


@pytest.mark.parametrize(
    "overrides, fragment",
    [
        (["solver.iterations=0"], "iterations"),
        (["seeds=[]"], "seeds"),
        (["privacy.epsilon=0"], "epsilon"),
        (["privacy.delta=0.1"], "delta"),
        (["privacy.mechanism=gaussian", "privacy.delta=0"], "delta"),
        (["problem.name=custom"], "agents"),
        (["output.workers=0"], "workers"),
        (["reference.tolerance=0"], "tolerance"),
        (["analysis.epsilons=[1.0, -1.0]"], "epsilons"),
    ],
)
def test_validate_reports_first_problem(overrides, fragment):
    ok, err = validate_config(apply_overrides(DEFAULT_CONFIG, overrides))
    assert not ok
    assert fragment in err


def test_mechanism_none_skips_privacy_checks():
    cfg = apply_overrides(DEFAULT_CONFIG, ["privacy.mechanism=none", "privacy.epsilon=0"])
    assert validate_config(cfg)[0]


def test_first_run_writes_default_config(tmp_path):
    path = ensure_first_run_files(tmp_path)
    assert path == tmp_path / "config.yaml"
    assert load_config(path) == DEFAULT_CONFIG
    path.write_text("seeds: [1]\n", encoding="utf-8")
    ensure_first_run_files(tmp_path)
    assert load_config(path).seeds == (1,)


def test_output_root_resolution(tmp_path, monkeypatch):
    monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
    assert output_root("runs", tmp_path) == tmp_path / "runs"
    absolute = tmp_path / "elsewhere"
    assert output_root(str(absolute), Path("/nowhere")) == absolute
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "env"))
    assert output_root("runs", Path("/nowhere")) == tmp_path / "env" / "runs"


@pytest.mark.parametrize("name", ["eps_dp.yaml", "eps_delta_dp.yaml", "scalar.yaml"])
def test_shipped_configs_are_valid(name):
    cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / name)
    assert validate_config(cfg) == (True, None)
