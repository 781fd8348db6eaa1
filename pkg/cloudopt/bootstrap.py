from __future__ import annotations

from pathlib import Path

from .config import CONFIG_PATH, DEFAULT_CONFIG, save_config


def ensure_first_run_files(project_root: Path) -> Path:
    """
    Ensure ./config.yaml exists; it is generated with the defaults (the epsilon-DP
    experiment on the reference problem). Returns its path.
    """
    config_path = project_root / CONFIG_PATH
    if not config_path.exists():
        save_config(DEFAULT_CONFIG, config_path)
    return config_path
