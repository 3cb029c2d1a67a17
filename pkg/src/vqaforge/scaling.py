"""Log-scale trend fitting over dataset-size experiments.

Fits y = slope * ln(x) + intercept by ordinary least squares, reports fit
quality, predicts at new scales, and checks the diminishing-returns shape of
a measured series. Natural log is canonical internally; the curve CSV carries
a log10 column for plotting parity.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

logger = logging.getLogger(__name__)

__all__ = [
    "METRICS",
    "POINTS_CSV_HEADER",
    "CURVE_CSV_HEADER",
    "ScalingError",
    "FitError",
    "ScalingPoint",
    "LogFit",
    "MetricDiagnostics",
    "DiagnosticsReport",
    "fit_log",
    "predict",
    "fit_metric",
    "monotone_diagnostics",
    "read_points_csv",
    "fit_curve_rows",
    "write_curve_csv",
]

METRICS = ("loss", "performance")
_METRIC_FIELDS = {"loss": "convergence_loss", "performance": "avg_performance"}

POINTS_CSV_HEADER = "data_scale,convergence_loss,avg_performance"
CURVE_CSV_HEADER = "x,log10_x,y,y_fit,residual"


class ScalingError(ValueError):
    """Bad scaling-experiment input data."""


class FitError(ScalingError):
    """The requested fit or prediction is not computable."""


@dataclass(frozen=True)
class ScalingPoint:
    """One experiment: a dataset size with its measured outcomes."""

    data_scale: int
    convergence_loss: float | None = None
    avg_performance: float | None = None

    def __post_init__(self) -> None:
        if self.data_scale <= 0:
            raise ValueError(f"data_scale must be positive, got {self.data_scale}")
        if self.convergence_loss is None and self.avg_performance is None:
            raise ValueError("at least one of loss/performance must be present")
        if self.convergence_loss is not None and self.convergence_loss < 0:
            raise ValueError(
                f"convergence_loss must be nonnegative, got {self.convergence_loss}")
        if self.avg_performance is not None and not 0 <= self.avg_performance <= 100:
            raise ValueError(
                f"avg_performance must be in [0, 100], got {self.avg_performance}")


@dataclass(frozen=True)
class LogFit:
    """y = slope * ln(x) + intercept, with fit quality over n points."""

    slope: float
    intercept: float
    r_squared: float
    n: int

    def __post_init__(self) -> None:
        if self.n < 2:
            raise ValueError(f"fit needs n >= 2, got {self.n}")
        if not 0.0 <= self.r_squared <= 1.0:
            raise ValueError(f"r_squared must be in [0, 1], got {self.r_squared}")

    def to_json_dict(self) -> dict[str, Any]:
        return {"slope": self.slope, "intercept": self.intercept,
                "r_squared": self.r_squared, "n": self.n}

    @classmethod
    def from_json_dict(cls, d: Mapping[str, Any]) -> "LogFit":
        return cls(slope=float(d["slope"]), intercept=float(d["intercept"]),
                   r_squared=float(d["r_squared"]), n=int(d["n"]))


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

def fit_log(points: Iterable[tuple[float, float]]) -> LogFit:
    """Least-squares fit of y on ln(x), via centered normal equations.

    Points are sorted internally so the result is exactly invariant under
    input permutation.
    """
    pts = sorted(points)
    if len(pts) < 2:
        raise FitError(f"need at least 2 points, got {len(pts)}")
    for x, _ in pts:
        if x <= 0:
            raise FitError(f"x values must be positive, got {x}")
    if len({x for x, _ in pts}) < 2:
        raise FitError("need at least 2 distinct x values")
    lx = [math.log(x) for x, _ in pts]
    ys = [float(y) for _, y in pts]
    n = len(pts)
    mean_lx = sum(lx) / n
    mean_y = sum(ys) / n
    sxx = sum((l - mean_lx) ** 2 for l in lx)
    sxy = sum((l - mean_lx) * (y - mean_y) for l, y in zip(lx, ys))
    slope = sxy / sxx
    intercept = mean_y - slope * mean_lx
    sse = sum((y - (slope * l + intercept)) ** 2 for l, y in zip(lx, ys))
    sst = sum((y - mean_y) ** 2 for y in ys)
    r_squared = 1.0 if sst == 0.0 else 1.0 - sse / sst
    r_squared = min(1.0, max(0.0, r_squared))
    return LogFit(slope=slope, intercept=intercept, r_squared=r_squared, n=n)


def predict(fit: LogFit, scale: float) -> float:
    """Fitted value at a dataset size."""
    if scale <= 0:
        raise FitError(f"scale must be positive, got {scale}")
    return fit.slope * math.log(scale) + fit.intercept


def _metric_field(metric: str) -> str:
    if metric not in _METRIC_FIELDS:
        raise FitError(f"metric must be one of {METRICS}, got {metric!r}")
    return _METRIC_FIELDS[metric]


def _metric_series(points: Sequence[ScalingPoint], metric: str) -> list[tuple[int, float]]:
    field_name = _metric_field(metric)
    return [(p.data_scale, getattr(p, field_name)) for p in points
            if getattr(p, field_name) is not None]


def fit_metric(points: Sequence[ScalingPoint], metric: str) -> LogFit:
    """Fit one measured metric ("loss" or "performance") against scale,
    ignoring points where that metric is absent."""
    series = _metric_series(points, metric)
    if len(series) < 2:
        raise FitError(
            f"metric {metric}: need at least 2 measured points, got {len(series)}")
    return fit_log(series)


# ---------------------------------------------------------------------------
# diminishing-returns diagnostics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricDiagnostics:
    """Successive-difference table for one metric.

    ``violations`` holds indices i (into ``diffs``, i >= 1) where the step
    magnitude failed to shrink strictly: |diffs[i]| >= |diffs[i-1]|.
    """

    metric: str
    diffs: tuple[float, ...]
    violations: tuple[int, ...]

    @property
    def diminishing(self) -> bool:
        return not self.violations

    def to_json_dict(self) -> dict[str, Any]:
        return {"metric": self.metric, "diffs": list(self.diffs),
                "violations": list(self.violations),
                "diminishing": self.diminishing}


@dataclass(frozen=True)
class DiagnosticsReport:
    loss: MetricDiagnostics | None
    performance: MetricDiagnostics | None

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "loss": self.loss.to_json_dict() if self.loss else None,
            "performance":
                self.performance.to_json_dict() if self.performance else None,
        }


def _diagnose(metric: str, series: list[tuple[int, float]]) -> MetricDiagnostics | None:
    if len(series) < 3:
        return None
    diffs = tuple(series[i + 1][1] - series[i][1] for i in range(len(series) - 1))
    violations = tuple(i for i in range(1, len(diffs))
                       if abs(diffs[i]) >= abs(diffs[i - 1]))
    return MetricDiagnostics(metric=metric, diffs=diffs, violations=violations)


def monotone_diagnostics(points: Sequence[ScalingPoint]) -> DiagnosticsReport:
    """Check whether each measured series shows strictly shrinking step
    magnitudes as scale grows. Points must be sorted by strictly increasing
    data_scale; metrics with fewer than 3 measurements are reported as None.
    """
    if len(points) < 3:
        raise FitError(f"diagnostics need at least 3 points, got {len(points)}")
    scales = [p.data_scale for p in points]
    if any(b <= a for a, b in zip(scales, scales[1:])):
        raise FitError("points must be sorted by strictly increasing data_scale")
    return DiagnosticsReport(
        loss=_diagnose("loss", _metric_series(points, "loss")),
        performance=_diagnose("performance",
                              _metric_series(points, "performance")),
    )


# ---------------------------------------------------------------------------
# CSV interfaces
# ---------------------------------------------------------------------------

def read_points_csv(path: str | Path) -> list[ScalingPoint]:
    """Read experiment points. The header line must match
    ``data_scale,convergence_loss,avg_performance`` exactly; empty cells mean
    the metric was not measured."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScalingError(f"cannot read {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines or lines[0] != POINTS_CSV_HEADER:
        got = lines[0] if lines else ""
        raise ScalingError(
            f"{path}: header must be exactly {POINTS_CSV_HEADER!r}, got {got!r}")
    points: list[ScalingPoint] = []
    for lineno, row in enumerate(csv.reader(lines[1:]), start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != 3:
            raise ScalingError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
        try:
            scale = int(row[0])
            loss = float(row[1]) if row[1].strip() else None
            perf = float(row[2]) if row[2].strip() else None
            points.append(ScalingPoint(data_scale=scale, convergence_loss=loss,
                                       avg_performance=perf))
        except ValueError as exc:
            raise ScalingError(f"{path}:{lineno}: {exc}") from exc
    return points


def fit_curve_rows(
    points: Sequence[ScalingPoint], metric: str, fit: LogFit
) -> list[tuple[int, float, float, float, float]]:
    """Plot-ready rows (x, log10_x, y, y_fit, residual) for one metric."""
    rows = []
    for x, y in _metric_series(points, metric):
        y_fit = predict(fit, x)
        rows.append((x, math.log10(x), y, y_fit, y - y_fit))
    return rows


def write_curve_csv(path: str | Path,
                    rows: Sequence[tuple[int, float, float, float, float]]) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(CURVE_CSV_HEADER + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
