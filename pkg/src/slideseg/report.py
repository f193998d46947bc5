"""Report rendering: metric bars and the timing-vs-size scaling fit, saved
as PNG figures next to their delimited data files."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import FormatError, ValidationError
from .metrics import METRIC_NAMES, MetricsReport
from .pipeline import TIMING_COLUMNS, TimingRecord


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    r2: float
    n: int


def linear_fit(x, y) -> LinearFit:
    """Least-squares line y = slope*x + intercept with R^2."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValidationError("x and y must be equal-length 1-d sequences")
    if len(x) < 2:
        raise ValidationError("linear fit needs at least 2 points")
    if np.all(y == y[0]):
        # constant target: the horizontal line fits exactly, but polyfit's
        # rounding noise would otherwise report r2 = 0
        return LinearFit(slope=0.0, intercept=float(y[0]), r2=1.0, n=len(x))
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        r2 = 1.0 if ss_res == 0.0 else 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    return LinearFit(slope=float(slope), intercept=float(intercept), r2=r2,
                     n=len(x))


def read_timing_csv(path: str | Path) -> list[TimingRecord]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"timing file not found: {path}")
    records = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or \
                tuple(reader.fieldnames) != TIMING_COLUMNS:
            raise FormatError(
                f"expected columns {','.join(TIMING_COLUMNS)}", str(path))
        for i, row in enumerate(reader, start=2):
            try:
                records.append(TimingRecord(
                    slide_pixels=int(row["slide_pixels"]),
                    analyzed_pixels=int(row["analyzed_pixels"]),
                    wall_seconds=float(row["wall_seconds"]),
                    tile_count=int(row["tile_count"])))
            except (TypeError, ValueError) as exc:
                raise FormatError(f"bad timing row: {exc}",
                                  f"{path}:{i}") from exc
    return records


def render_metrics_figure(report: MetricsReport, out_path: str | Path) -> Path:
    """Bar chart of the eight metrics for one report."""
    out_path = Path(out_path)
    labels = ["F-score", "MCC", "Kappa", "IOU", "SE", "SP", "P", "A"]
    values = [getattr(report, name) for name in METRIC_NAMES]
    fig, ax = plt.subplots(figsize=(7, 4))
    bars = ax.bar(labels, values, color="#4c8a64")
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("score")
    ax.set_title(f"Segmentation metrics ({report.scope})")
    for bar, value in zip(bars, values):
        ax.annotate(f"{value:.3f}", (bar.get_x() + bar.get_width() / 2, value),
                    ha="center", va="bottom", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def render_timing_figure(records: list[TimingRecord],
                         out_path: str | Path) -> LinearFit:
    """Scatter of wall seconds vs analyzed pixels with its least-squares
    line; returns the fit."""
    if len(records) < 2:
        raise ValidationError("timing figure needs at least 2 records")
    out_path = Path(out_path)
    x = np.array([r.analyzed_pixels for r in records], dtype=np.float64)
    y = np.array([r.wall_seconds for r in records], dtype=np.float64)
    fit = linear_fit(x, y)
    fig, ax = plt.subplots(figsize=(6, 4.5))
    ax.scatter(x / 1e6, y, color="#2e5d87", label="jobs", zorder=3)
    xs = np.linspace(x.min(), x.max(), 64)
    ax.plot(xs / 1e6, fit.slope * xs + fit.intercept, color="#c44e52",
            label=f"fit  R$^2$={fit.r2:.4f}")
    ax.set_xlabel("analyzed region (megapixels)")
    ax.set_ylabel("wall time (s)")
    ax.set_title("Prediction time vs analyzed region")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return fit


def write_fit_csv(fit: LinearFit, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slope_seconds_per_pixel", "intercept_seconds",
                         "r_squared", "points"])
        writer.writerow([f"{fit.slope:.12g}", f"{fit.intercept:.6f}",
                         f"{fit.r2:.6f}", str(fit.n)])
    return path
