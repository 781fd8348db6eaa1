from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Iterable, Sequence

import numpy as np

from .geometry import EnsembleState

if TYPE_CHECKING:
    from .solver import NoiseRecord


@dataclass
class RunTrace:
    """
    Recorded iterates of one run.

    Row k is z(k), the state after k steps (k = 0 is the initial state).
    Error columns are present only when a reference solution was supplied.
    """

    seed: int
    ks: list[int] = field(default_factory=list)
    xs: list[np.ndarray] = field(default_factory=list)
    mus: list[np.ndarray] = field(default_factory=list)
    primal_error: list[float] | None = None
    dual_error: list[float] | None = None
    kkt: dict[int, float] = field(default_factory=dict)
    noise: list[NoiseRecord] | None = None
    iterations: int = 0
    stopped_early: bool = False
    wall_time: float = 0.0

    @property
    def has_reference(self) -> bool:
        return self.primal_error is not None

    @property
    def final_state(self) -> EnsembleState:
        return EnsembleState(self.xs[-1], self.mus[-1])

    def states(self) -> np.ndarray:
        """Recorded z(k) stacked row-wise."""
        return np.vstack([np.concatenate([x, mu]) for x, mu in zip(self.xs, self.mus)])

    def index_of(self, k: int) -> int:
        try:
            return self.ks.index(k)
        except ValueError:
            raise KeyError(f"iteration {k} was not recorded") from None

    def errors_at(self, k: int) -> tuple[float, float]:
        if not self.has_reference:
            raise KeyError("trace has no reference errors")
        i = self.index_of(k)
        return self.primal_error[i], self.dual_error[i]

    def rows(self) -> list[dict[str, Any]]:
        out = []
        for i, k in enumerate(self.ks):
            row: dict[str, Any] = {"k": k}
            if self.has_reference:
                row["primal_error"] = self.primal_error[i]
                row["dual_error"] = self.dual_error[i]
            if self.kkt:
                row["kkt_residual"] = self.kkt.get(k)
            out.append(row)
        return out

    def fieldnames(self) -> list[str]:
        names = ["k"]
        if self.has_reference:
            names += ["primal_error", "dual_error"]
        if self.kkt:
            names.append("kkt_residual")
        return names


def _fmt(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_rows_csv(
    path: Path, header: dict[str, Any], fieldnames: Sequence[str], rows: Iterable[dict[str, Any]]
) -> None:
    """CSV with leading `# key=value` comment lines (config_hash, seed, ...)."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        for key, value in header.items():
            f.write(f"# {key}={value}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(fieldnames)
        for row in rows:
            w.writerow([_fmt(row.get(name)) for name in fieldnames])


def write_trace_csv(path: Path, trace: RunTrace, config_hash: str) -> None:
    write_rows_csv(path, {"config_hash": config_hash, "seed": trace.seed}, trace.fieldnames(), trace.rows())


@dataclass
class CsvTable:
    header: dict[str, str]
    columns: dict[str, np.ndarray]

    def __len__(self) -> int:
        return len(next(iter(self.columns.values()))) if self.columns else 0


def read_rows_csv(path: Path) -> CsvTable:
    header: dict[str, str] = {}
    lines = []
    with path.open("r", encoding="utf-8", newline="") as f:
        for line in f:
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                header[key.strip()] = value.strip()
            else:
                lines.append(line)
    reader = csv.reader(lines)
    try:
        names = next(reader)
    except StopIteration:
        return CsvTable(header, {})
    values: list[list[float]] = [[] for _ in names]
    for row in reader:
        for col, cell in zip(values, row):
            col.append(float(cell) if cell != "" else math.nan)
    return CsvTable(header, {name: np.array(col) for name, col in zip(names, values)})
