import re

import pytest

from adrp.errors import ContractError
from adrp.report import BENCH_PLOTS, PlotSpec, csv_text, emit_report, format_cell, read_csv, svg_text


def polylines(svg):
    return [p.split() for p in re.findall(r'points="([^"]*)"', svg)]


def test_thirteen_rows_one_polyline():
    rows = [{"n": n, "time": 100.0 - 3 * n} for n in range(13)]
    svg = svg_text(rows, PlotSpec("t", "n", "time", x_label="dropped", y_label="ms"))
    lines = polylines(svg)
    assert len(lines) == 1 and len(lines[0]) == 13
    assert '<text class="x-label"' in svg and ">dropped<" in svg and ">ms<" in svg


def test_missing_points_are_gaps():
    rows = [{"x": x, "y": None if x == 2 else float(x)} for x in range(5)]
    lines = polylines(svg_text(rows, PlotSpec("t", "x", "y")))
    assert [len(p) for p in lines] == [2, 2]


def test_series_split():
    rows = [{"x": x, "y": x * k, "s": f"k{k}"} for x in range(3) for k in (1, 2)]
    svg = svg_text(rows, PlotSpec("t", "x", "y", "s"))
    assert len(polylines(svg)) == 2 and 'data-series="k2"' in svg


def test_csv_is_deterministic_and_sorted():
    rows = [{"b": 2, "a": 0.1234567891}, {"b": 1, "a": None}, {"b": 1, "a": "x"}]
    one, two = csv_text(rows, ["b", "a"]), csv_text(list(reversed(rows)), ["b", "a"])
    assert one == two
    assert one.splitlines() == ["b,a", "1,x", "1,", "2,0.123457"]


def test_csv_schema_checks():
    with pytest.raises(ContractError):
        csv_text([{"a": 1, "z": 2}], ["a"])
    with pytest.raises(ContractError):
        csv_text([])
    assert csv_text([], ["a", "b"]) == "a,b\n"


def test_format_cell():
    assert format_cell(True) == "true" and format_cell(float("nan")) == "" and format_cell(1e-7) == "1e-07"


def test_emit_report(tmp_path):
    rows = [{"subject": "full", "seq_len": s, "median_ms": s / 10.0} for s in (64, 128)]
    paths = emit_report(rows, BENCH_PLOTS[0], tmp_path, "bench", ["subject", "seq_len", "median_ms"])
    assert [p.name for p in paths] == ["bench.csv", "time_vs_seq_len.svg"]
    first = (tmp_path / "bench.csv").read_bytes()
    emit_report(rows, BENCH_PLOTS[0], tmp_path, "bench", ["subject", "seq_len", "median_ms"])
    assert (tmp_path / "bench.csv").read_bytes() == first
    assert read_csv(tmp_path / "bench.csv")[1] == {"subject": "full", "seq_len": 128, "median_ms": 12.8}


def test_emit_report_empty_rows_gives_header_only(tmp_path):
    paths = emit_report([], BENCH_PLOTS, tmp_path, "empty", ["n", "t"])
    assert [p.name for p in paths] == ["empty.csv"]
    assert (tmp_path / "empty.csv").read_text() == "n,t\n"
