from __future__ import annotations

import os
from pathlib import Path

OUTPUT_ROOT_ENV = "CLOUDOPT_OUTPUT_ROOT"


def project_root() -> Path:
    """
    Return the directory used for config.yaml and relative output paths.
    """
    return Path.cwd()


def output_root(directory: str, project_root_path: Path) -> Path:
    """
    Resolve the output directory for a run.

    - `CLOUDOPT_OUTPUT_ROOT` (if set) replaces the project root as the base
    - absolute `directory` values are used as-is
    """
    base = project_root_path
    override = os.environ.get(OUTPUT_ROOT_ENV, "").strip()
    if override:
        base = Path(override).expanduser()

    p = Path(directory).expanduser()
    if not p.is_absolute():
        p = base / p
    return p
