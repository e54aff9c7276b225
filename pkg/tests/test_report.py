import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest

from vtinv.corpus import ARTICULATORS
from vtinv.errors import DataError
from vtinv.metrics import aggregate_arrays, write_frame_errors_csv, write_metrics_csv
from vtinv.report import COLORS, Run, load_run, overlay_svg, render_table, write_table_csv

GOLDEN = Path(__file__).parent / "data" / "golden_table.txt"
SVG = "{http://www.w3.org/2000/svg}"


def test_golden_table(golden_runs):
    assert render_table(golden_runs, baseline="ABA ST-5") == GOLDEN.read_text()


def test_single_run_has_no_stars_or_footnote(golden_runs):
    text = render_table(golden_runs[1:])
    assert "*" not in text
    assert "paired t-test" not in text


def test_identical_runs_not_significant(golden_runs):
    twin = Run("copy", golden_runs[0].report)
    text = render_table([golden_runs[0], twin], baseline="ABA ST-5")
    assert "*" not in text.split("\n\n")[0]


def test_missing_baseline(golden_runs):
    with pytest.raises(DataError, match="baseline"):
        render_table(golden_runs, baseline="nope")


def test_table_rows(golden_runs):
    lines = render_table(golden_runs).splitlines()
    assert lines[1].split() == ["|", "RMSE", "MEDIAN", "|", "RMSE", "MEDIAN"]
    assert lines[-1].startswith("Mean")
    assert len(lines) == 2 + 1 + 8 + 1 + 1
    assert len({ln.replace("+", "|").index("|") for ln in lines}) == 1


def test_table_csv(tmp_path, golden_runs):
    path = tmp_path / "t.csv"
    write_table_csv(path, golden_runs, baseline="ABA ST-5")
    rows = path.read_text().splitlines()
    assert len(rows) == 1 + 2 * 9
    assert rows[-1].startswith("AAT ST-5,mean,") and rows[-1].endswith(",1")


def test_load_run_round_trip(tmp_path, golden_runs):
    rep = golden_runs[0].report
    write_metrics_csv(tmp_path / "metrics.csv", rep)
    write_frame_errors_csv(tmp_path / "frame_errors.csv", rep)
    run = load_run(tmp_path)
    assert run.label == "ABA ST-5"
    for a in ARTICULATORS:
        np.testing.assert_allclose(run.report.frame_errors[a], rep.frame_errors[a], rtol=1e-12)
    with pytest.raises(DataError):
        load_run(tmp_path / "missing")


def _frame(seed=0):
    return np.random.default_rng(seed).uniform(10, 60, (8, 50, 2))


def _parse(svg):
    root = ET.fromstring(svg)
    return root, root.findall(f".//{SVG}polyline")


def test_svg_structure():
    root, lines = _parse(overlay_svg(_frame(1), _frame(2), "frame 3"))
    assert len(lines) == 16
    truth = root.find(f"{SVG}g[@id='truth']")
    pred = root.find(f"{SVG}g[@id='prediction']")
    assert len(truth) == len(pred) == 8
    assert all("stroke-dasharray" not in p.attrib for p in truth)
    assert all(p.get("stroke-dasharray") for p in pred)
    assert [p.get("stroke") for p in truth] == [COLORS[a] for a in ARTICULATORS]
    assert all(len(p.get("points").split()) == 50 for p in lines)


def test_svg_identical_frames():
    f = _frame()
    root, _ = _parse(overlay_svg(f, f, "frame 0"))
    assert root.find(f"{SVG}text").text == "frame 0 - RMSE 0.00 mm"


def test_svg_one_pixel_offset():
    f = _frame()
    g = f.copy()
    g[..., 0] += 1.0
    root, _ = _parse(overlay_svg(g, f))
    assert root.find(f"{SVG}text").text.endswith(f"RMSE {1.62 / np.sqrt(2):.2f} mm")
    g[..., 1] += 1.0
    root, _ = _parse(overlay_svg(g, f))
    assert root.find(f"{SVG}text").text.endswith("RMSE 1.62 mm")


def test_svg_bad_shape():
    with pytest.raises(DataError):
        overlay_svg(np.zeros((8, 50, 2)), np.zeros((7, 50, 2)))


def test_distinct_colors():
    assert len(set(COLORS.values())) == 8 and set(COLORS) == set(ARTICULATORS)
