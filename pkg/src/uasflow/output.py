"""Columnar result tables, CSV export and the run manifest."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from uasflow import __version__
from uasflow.airspace import BOUNDARY_TOL
from uasflow.flowfield import SINGULAR_TOL

TOLERANCES = {
    "boundary_tol_m": BOUNDARY_TOL,
    "singularity_guard_m": SINGULAR_TOL,
    "streamline_level_rel": 1e-6,
    "steady_residual_rel": 1e-10,
    "riccati_residual_rel": 1e-8,
    "riccati_max_iter": 200,
    "weight_row_sum": 1e-9,
    "zero_speed_m_s": 1e-9,
    "flux_rel": 1e-8,
}


@dataclass
class Table:
    """Header names carry units, e.g. ``t_s`` or ``x_m``."""

    header: Sequence[str]
    rows: list = field(default_factory=list)

    def add(self, *values) -> None:
        if len(values) != len(self.header):
            raise ValueError(f"row has {len(values)} values, header has {len(self.header)}")
        self.rows.append(values)

    def column(self, name: str) -> np.ndarray:
        i = list(self.header).index(name)
        return np.array([r[i] for r in self.rows])


@dataclass
class ScenarioResult:
    tables: dict[str, Table] = field(default_factory=dict)
    metrics: dict[str, Any] = field(default_factory=dict)

    def merge(self, other: "ScenarioResult", prefix: str) -> None:
        for name, t in other.tables.items():
            self.tables[f"{prefix}/{name}"] = t
        for k, v in other.metrics.items():
            self.metrics[f"{prefix}.{k}"] = v


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        x = float(v)
        if x == 0.0:
            return "0"  # also folds -0.0
        return repr(x) if math.isfinite(x) else ("nan" if math.isnan(x) else ("inf" if x > 0 else "-inf"))
    return str(v)


def table_text(table: Table) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(table.header)
    for row in table.rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        x = float(v)
        return x if math.isfinite(x) else str(x)
    return v


def write_result(
    result: ScenarioResult,
    out_dir: str | Path,
    subcommand: str,
    spec_hash: str,
    extra: dict | None = None,
) -> Path:
    """Write every table as CSV plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in sorted(result.tables):
        text = table_text(result.tables[name])
        path = out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8", newline="")
        files[name] = hashlib.sha256(text.encode()).hexdigest()
    manifest = {
        "tool": "uasflow",
        "version": __version__,
        "subcommand": subcommand,
        "spec_sha256": spec_hash,
        "output_directory": ".",
        "tolerances": TOLERANCES,
        "files": files,
        "metrics": _jsonable(dict(sorted(result.metrics.items()))),
    }
    if extra:
        manifest.update(_jsonable(extra))
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
