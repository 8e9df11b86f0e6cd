"""RunMetrics <-> CSV.

The first line is a ``#`` run descriptor, the second the column header with
units in brackets. Missing values are empty cells. Floats use ``%.17g`` so the
text is deterministic and parses back exactly.
"""

from __future__ import annotations

import csv
import io
import os
from pathlib import Path

from .evalharness import MetricRecord, RunMetrics

COLUMNS = (
    ("step", "eta_steps"),
    ("active_node", "index"),
    ("phi_steps", "count"),
    ("dsm_loss_phi", "sigma2_weighted_mse"),
    ("d_mis", "score_l2"),
    ("energy_distance", "data_units"),
    ("mode_coverage", "fraction"),
    ("wall_clock", "s"),
)
HEADER = [f"{name}[{unit}]" for name, unit in COLUMNS]
_INT_COLUMNS = {"step", "active_node", "phi_steps"}


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, int):
        return str(v)
    return "%.17g" % v


def format_metrics(run: RunMetrics) -> str:
    buf = io.StringIO()
    buf.write(f"# variant={run.variant} seed={run.seed} config_hash={run.config_hash} x_axis=eta_steps\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for rec in run.records:
        w.writerow([_cell(getattr(rec, name)) for name, _ in COLUMNS])
    return buf.getvalue()


def write_metrics(run: RunMetrics, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".partial")
    tmp.write_text(format_metrics(run), encoding="utf-8")
    os.replace(tmp, path)
    return path


def parse_metrics(text: str) -> RunMetrics:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ValueError("metrics file lacks the run descriptor line")
    desc = dict(item.split("=", 1) for item in lines[0][1:].split())
    run = RunMetrics(seed=int(desc.get("seed", 0)), variant=desc.get("variant", ""),
                     config_hash=desc.get("config_hash", ""))
    rows = list(csv.reader(lines[1:]))
    if not rows or rows[0] != HEADER:
        raise ValueError("metrics header does not match the expected columns")
    for row in rows[1:]:
        vals = {}
        for (name, _), cell in zip(COLUMNS, row):
            if cell == "":
                vals[name] = None
            elif name in _INT_COLUMNS:
                vals[name] = int(cell)
            else:
                vals[name] = float(cell)
        if vals["phi_steps"] is None:
            vals["phi_steps"] = 0
        run.append(MetricRecord(**vals))
    return run


def read_metrics(path) -> RunMetrics:
    return parse_metrics(Path(path).read_text(encoding="utf-8"))
