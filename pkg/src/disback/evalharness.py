"""Run telemetry, two-sample statistics, mode coverage and SVG renders."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

METRIC_NAMES = ("dsm_loss_phi", "d_mis", "energy_distance", "mode_coverage", "wall_clock")


@dataclass(frozen=True)
class MetricRecord:
    step: int
    active_node: int | None = None
    phi_steps: int = 0
    dsm_loss_phi: float | None = None
    d_mis: float | None = None
    energy_distance: float | None = None
    mode_coverage: float | None = None
    wall_clock: float | None = None

    def __post_init__(self):
        for name in METRIC_NAMES:
            v = getattr(self, name)
            if v is not None and not math.isfinite(v):
                object.__setattr__(self, name, None)


@dataclass
class RunMetrics:
    seed: int = 0
    variant: str = "baseline"
    config_hash: str = ""
    records: list[MetricRecord] = field(default_factory=list)

    def append(self, rec: MetricRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError(f"metric steps must increase: {rec.step} after {self.records[-1].step}")
        self.records.append(rec)

    def steps(self) -> np.ndarray:
        return np.array([r.step for r in self.records], dtype=np.int64)

    def column(self, name: str) -> np.ndarray:
        """Values of one field as floats, NaN where missing."""
        if name not in {f.name for f in fields(MetricRecord)}:
            raise KeyError(f"unknown metric {name!r}")
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name)
                         for r in self.records], dtype=np.float64)

    def has(self, name: str) -> bool:
        return bool(self.records) and not np.all(np.isnan(self.column(name)))

    def __len__(self) -> int:
        return len(self.records)


def _as_points(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    return x


def _mean_pairwise(a: np.ndarray, b: np.ndarray, chunk: int = 1024) -> float:
    total = 0.0
    for lo in range(0, a.shape[0], chunk):
        total += float(cdist(a[lo:lo + chunk], b).sum())
    return total / (a.shape[0] * b.shape[0])


def energy_distance(X, Y) -> float:
    """V-statistic 2 E||x - y|| - E||x - x'|| - E||y - y'|| over all pairs."""
    X = _as_points(X, "X")
    Y = _as_points(Y, "Y")
    val = 2.0 * _mean_pairwise(X, Y) - _mean_pairwise(X, X) - _mean_pairwise(Y, Y)
    return max(val, 0.0)


@dataclass(frozen=True)
class TwoSampleStats:
    energy_distance: float
    n_x: int
    n_y: int
    seed: int | None = None


def two_sample_stats(X, Y, seed: int | None = None) -> TwoSampleStats:
    return TwoSampleStats(energy_distance(X, Y), len(X), len(Y), seed)


def mode_coverage(mix, samples, radius_multiplier: float = 3.0) -> float:
    """Fraction of components with a sample within radius_multiplier * std of the mean."""
    pts = _as_points(samples, "samples")
    d = cdist(mix.means, pts)
    radius = radius_multiplier * np.sqrt(mix.variances)
    return float(np.mean(np.any(d <= radius[:, None], axis=1)))


@dataclass(frozen=True)
class SpeedupReport:
    metric: str
    threshold: float
    step_a: int | None
    step_b: int | None
    ratio: Fraction | None
    flag: str = ""

    @property
    def ratio_float(self) -> float | None:
        return None if self.ratio is None else float(self.ratio)

    def describe(self) -> str:
        def fmt(s):
            return "never" if s is None else str(s)
        r = "undefined" if self.ratio is None else f"{float(self.ratio):.6g}"
        line = (f"metric={self.metric} threshold={self.threshold:.6g} "
                f"steps_a={fmt(self.step_a)} steps_b={fmt(self.step_b)} ratio={r} (eta-steps)")
        return line + (f" [{self.flag}]" if self.flag else "")


def first_step_below(run: RunMetrics, metric: str, threshold: float) -> int | None:
    if not run.has(metric):
        raise KeyError(f"run has no values for metric {metric!r}")
    for rec in run.records:
        v = getattr(rec, metric)
        if v is not None and v <= threshold:
            return rec.step
    return None


def _same_curve(a: RunMetrics, b: RunMetrics, metric: str) -> bool:
    return (np.array_equal(a.steps(), b.steps())
            and np.array_equal(a.column(metric), b.column(metric), equal_nan=True))


def compare_runs(a: RunMetrics, b: RunMetrics, metric: str, threshold: float) -> SpeedupReport:
    """First step at which each run's metric is <= threshold and the ratio step_a / step_b."""
    sa = first_step_below(a, metric, threshold)
    sb = first_step_below(b, metric, threshold)
    if _same_curve(a, b, metric):
        return SpeedupReport(metric, threshold, sa, sb, Fraction(1), "" if sa is not None else "identical curves")
    if sa is None or sb is None:
        who = " and ".join(n for n, s in (("a", sa), ("b", sb)) if s is None)
        return SpeedupReport(metric, threshold, sa, sb, None, f"{who} never reached threshold")
    if sa == sb:
        return SpeedupReport(metric, threshold, sa, sb, Fraction(1))
    if sa == 0 or sb == 0:
        return SpeedupReport(metric, threshold, sa, sb, None, "threshold met at step 0")
    return SpeedupReport(metric, threshold, sa, sb, Fraction(sa, sb))


# --- SVG -----------------------------------------------------------------

SVG_SIZE = 600
_PAD = 40


def _num(v: float) -> str:
    return format(float(v), ".6f")


def _exact(v: float) -> str:
    return repr(float(v))


def _svg_open(lim: float, title: str) -> list[str]:
    scale = (SVG_SIZE - 2 * _PAD) / (2 * lim)
    c = SVG_SIZE / 2
    # data coordinates inside the group: y axis points up
    return [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{SVG_SIZE}" '
        f'height="{SVG_SIZE}" viewBox="0 0 {SVG_SIZE} {SVG_SIZE}">',
        f'<title>{title}</title>',
        f'<rect x="0" y="0" width="{SVG_SIZE}" height="{SVG_SIZE}" fill="white"/>',
        f'<rect x="{_PAD}" y="{_PAD}" width="{SVG_SIZE - 2 * _PAD}" height="{SVG_SIZE - 2 * _PAD}" '
        'fill="none" stroke="black" stroke-width="1"/>',
        f'<text x="{_PAD}" y="{SVG_SIZE - 12}" font-size="12">x in [{-lim:g}, {lim:g}], '
        f'y in [{-lim:g}, {lim:g}]</text>',
        f'<g id="data" transform="matrix({_exact(scale)},0,0,{_exact(-scale)},{c},{c})">',
    ]


def _write(path, lines: list[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def snapshot_scatter(samples, training_samples, path, lim: float = 6.0,
                     title: str = "generated vs training") -> Path:
    """Scatter of generated (blue) and training (red) points on fixed axes."""
    scale = (SVG_SIZE - 2 * _PAD) / (2 * lim)
    r = _num(2.0 / scale)
    lines = _svg_open(lim, title)
    layers = (("training", "#d62728", training_samples), ("generated", "#1f77b4", samples))
    for name, color, pts in layers:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        if name == "generated" and len(pts) == 0:
            continue
        lines.append(f'<g id="{name}" fill="{color}" fill-opacity="0.5">')
        lines.extend(f'<circle cx="{_num(x)}" cy="{_num(y)}" r="{r}"/>' for x, y in pts)
        lines.append("</g>")
    lines.append("</g>")
    lines.append('<g id="legend" font-size="12">')
    ly = _PAD + 14
    legend = [("training", "#d62728")] + ([("generated", "#1f77b4")] if len(np.asarray(samples).reshape(-1, 2)) else [])
    for i, (name, color) in enumerate(legend):
        y = ly + 16 * i
        lines.append(f'<rect x="{_PAD + 8}" y="{y - 9}" width="10" height="10" fill="{color}"/>')
        lines.append(f'<text x="{_PAD + 24}" y="{y}">{name}</text>')
    lines.append("</g>")
    lines.append("</svg>")
    return _write(path, lines)


def arrow_segments(grid) -> tuple[np.ndarray, np.ndarray]:
    """Arrow start and end points in data coordinates.

    Length is proportional to magnitude, scaled so the longest arrow spans
    0.9 of the grid spacing. A zero vector gives a zero-length arrow (a dot).
    """
    pos = np.asarray(grid.positions, dtype=np.float64)
    vec = np.asarray(grid.vectors, dtype=np.float64)
    spacing = (grid.hi - grid.lo) / (grid.resolution - 1)
    mags = np.linalg.norm(vec, axis=1)
    peak = mags.max() if len(mags) else 0.0
    k = 0.9 * spacing / peak if peak > 0 else 0.0
    return pos, pos + k * vec


def render_vector_field(grid, path, title: str = "score field") -> Path:
    if len(grid.positions) == 0:
        raise ValueError("empty grid")
    lim = max(abs(grid.lo), abs(grid.hi))
    start, end = arrow_segments(grid)
    lines = _svg_open(lim, f"{title} (t={grid.t:g})")
    lines.insert(3, '<defs><marker id="head" viewBox="0 0 10 10" refX="10" refY="5" '
                    'markerWidth="4" markerHeight="4" orient="auto">'
                    '<path d="M0,0 L10,5 L0,10 z"/></marker></defs>')
    lines.append('<g id="arrows" stroke="#1f3b73" stroke-width="0.04" stroke-linecap="round">')
    for (x1, y1), (x2, y2) in zip(start, end):
        head = ' marker-end="url(#head)"' if (x1, y1) != (x2, y2) else ""
        lines.append(f'<line class="arrow" x1="{_exact(x1)}" y1="{_exact(y1)}" '
                     f'x2="{_exact(x2)}" y2="{_exact(y2)}"{head}/>')
    lines.append("</g>")
    lines.append("</g>")
    lines.append("</svg>")
    return _write(path, lines)
