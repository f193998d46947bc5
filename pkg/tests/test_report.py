"""Reporting: least-squares fit, timing CSV parsing, figure rendering."""

from __future__ import annotations

import csv

import numpy as np
import pytest

from slideseg.errors import FormatError, ValidationError
from slideseg.metrics import ConfusionCounts, metrics
from slideseg.pipeline import TimingRecord, append_timing
from slideseg.report import (LinearFit, linear_fit, read_timing_csv,
                             render_metrics_figure, render_timing_figure,
                             write_fit_csv)


def test_linear_fit_exact_line():
    x = [1.0, 2.0, 5.0, 9.0]
    fit = linear_fit(x, [2 * v + 3 for v in x])
    assert fit.slope == pytest.approx(2.0, abs=1e-12)
    assert fit.intercept == pytest.approx(3.0, abs=1e-12)
    assert fit.r2 == pytest.approx(1.0, abs=1e-12)
    assert fit.n == 4


def test_linear_fit_known_r2():
    # hand-checked: slope 1.1, intercept 0.3, r2 = 1 - 0.4/8.8
    x = np.array([0.0, 1.0, 2.0, 3.0, 4.0])
    y = np.array([0.0, 2.0, 2.0, 4.0, 4.0])
    fit = linear_fit(x, y)
    assert fit.slope == pytest.approx(1.0, abs=1e-12)
    assert fit.intercept == pytest.approx(0.4, abs=1e-12)
    assert fit.r2 == pytest.approx(1 - 1.2 / 11.2, abs=1e-12)


def test_linear_fit_constant_y():
    fit = linear_fit([1.0, 2.0, 3.0], [5.0, 5.0, 5.0])
    assert fit.slope == pytest.approx(0.0, abs=1e-12)
    assert fit.r2 == 1.0  # zero total variance, zero residual


def test_linear_fit_validation():
    with pytest.raises(ValidationError):
        linear_fit([1.0], [2.0])
    with pytest.raises(ValidationError):
        linear_fit([1.0, 2.0], [1.0, 2.0, 3.0])
    with pytest.raises(ValidationError):
        linear_fit([[1.0, 2.0]], [[1.0, 2.0]])


def test_read_timing_csv_roundtrip(tmp_path):
    path = tmp_path / "timing.csv"
    records = [TimingRecord(4096 * 4096, 1000000, 1.5, 12),
               TimingRecord(1024 * 1024, 0, 0.002, 0)]
    for r in records:
        append_timing(path, r)
    assert read_timing_csv(path) == records


def test_read_timing_csv_errors(tmp_path):
    with pytest.raises(ValidationError, match="not found"):
        read_timing_csv(tmp_path / "missing.csv")
    wrong = tmp_path / "wrong.csv"
    wrong.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(FormatError, match="expected columns"):
        read_timing_csv(wrong)
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(FormatError, match="expected columns"):
        read_timing_csv(empty)
    bad_row = tmp_path / "bad.csv"
    bad_row.write_text(
        "slide_pixels,analyzed_pixels,wall_seconds,tile_count\n"
        "100,200,0.5,3\n"
        "100,nope,0.5,3\n")
    with pytest.raises(FormatError) as err:
        read_timing_csv(bad_row)
    assert err.value.location.endswith(":3")


def test_header_only_file_is_empty(tmp_path):
    path = tmp_path / "timing.csv"
    path.write_text("slide_pixels,analyzed_pixels,wall_seconds,tile_count\n")
    assert read_timing_csv(path) == []


def test_render_metrics_figure(tmp_path):
    report = metrics(ConfusionCounts(tp=90, fp=10, fn=10, tn=890))
    out = render_metrics_figure(report, tmp_path / "metrics.png")
    assert out.exists() and out.stat().st_size > 1000
    assert out.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_render_timing_figure_returns_fit(tmp_path):
    records = [TimingRecord(0, px, 2e-8 * px + 0.25, 1)
               for px in (10**6, 4 * 10**6, 9 * 10**6, 16 * 10**6)]
    fit = render_timing_figure(records, tmp_path / "timing.png")
    assert (tmp_path / "timing.png").exists()
    assert fit.slope == pytest.approx(2e-8, rel=1e-9)
    assert fit.intercept == pytest.approx(0.25, rel=1e-6)
    assert fit.r2 == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(ValidationError, match="at least 2"):
        render_timing_figure(records[:1], tmp_path / "x.png")


def test_write_fit_csv(tmp_path):
    path = write_fit_csv(LinearFit(slope=1.25e-8, intercept=0.5, r2=0.9876,
                                   n=5), tmp_path / "fit.csv")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["slope_seconds_per_pixel", "intercept_seconds",
                       "r_squared", "points"]
    assert rows[1] == ["1.25e-08", "0.500000", "0.987600", "5"]
