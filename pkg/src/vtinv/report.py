"""Comparison tables and contour-overlay figures."""

from __future__ import annotations

import csv
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from vtinv.corpus import (
    ARTICULATOR_LABELS,
    ARTICULATORS,
    IMAGE_SIZE,
    NormalizationStats,
    PIXEL_SPACING_MM,
    contours_to_vectors,
)
from vtinv.errors import DataError
from vtinv.metrics import (
    SIGNIFICANCE_LEVEL,
    MetricsReport,
    frame_rmse_mm,
    read_frame_errors_csv,
)

FOOTNOTE = "p < 0.05, paired t-test"

# One fixed colour per articulator, in articulator (alphabetical) order.
COLORS = {
    "arytenoid-cartilage": "#e6194b",
    "epiglottis": "#3cb44b",
    "lower-lip": "#4363d8",
    "pharyngeal-wall": "#f58231",
    "soft-palate-midline": "#911eb4",
    "tongue": "#d4a017",
    "upper-lip": "#42d4f4",
    "vocal-folds": "#f032e6",
}


@dataclass
class Run:
    label: str
    report: MetricsReport


def load_run(path, label: str | None = None) -> Run:
    """A run directory (or its ``frame_errors.csv``) as written by an experiment."""
    p = Path(path)
    fe = p / "frame_errors.csv" if p.is_dir() else p
    if not fe.exists():
        raise DataError(f"{path}: no frame_errors.csv")
    approach = model = ""
    metrics = fe.parent / "metrics.csv"
    if metrics.exists():
        with open(metrics, newline="") as f:
            first = next(csv.DictReader(f), None)
        if first:
            approach, model = first["approach"], first["model"]
    report = read_frame_errors_csv(fe, approach, model)
    return Run(label or _default_label(report, p), report)


def _default_label(report: MetricsReport, path: Path) -> str:
    parts = [x for x in (report.approach, report.model) if x]
    return " ".join(parts) if parts else path.name


def significance(runs: Sequence[Run], baseline: str | None) -> dict[str, dict[str, float]]:
    """p-values per run label and row name against the run labelled ``baseline``."""
    if baseline is None:
        return {}
    by_label = {r.label: r for r in runs}
    if baseline not in by_label:
        raise DataError(f"baseline run {baseline!r} not among the runs")
    base = by_label[baseline].report
    return {r.label: r.report.compare_to(base) for r in runs if r.label != baseline}


def _rows(run: Run):
    rep = run.report
    for a in ARTICULATORS:
        yield a, rep.rows.get(a)
    yield "mean", rep.mean


def render_table(runs: Sequence[Run], baseline: str | None = None) -> str:
    """Aligned text table: one RMSE +/- std and MEDIAN column pair per run."""
    if not runs:
        raise DataError("no runs to report")
    pvals = significance(runs, baseline)
    names = [ARTICULATOR_LABELS[a] for a in ARTICULATORS] + ["Mean"]
    w0 = max(len(n) for n in names)

    cells: list[list[tuple[str, str]]] = []
    for run in runs:
        col = []
        for key, st in _rows(run):
            if st is None:
                col.append(("-", "-"))
                continue
            star = "*" if pvals.get(run.label, {}).get(key, 1.0) < SIGNIFICANCE_LEVEL else ""
            col.append((f"{st.rmse_mean_mm:.2f}{star} ± {st.rmse_std_mm:.2f}", f"{st.median_mm:.2f}"))
        cells.append(col)

    widths = []
    for run, col in zip(runs, cells):
        wr = max(len("RMSE"), *(len(c[0]) for c in col))
        wm = max(len("MEDIAN"), *(len(c[1]) for c in col))
        wr = max(wr, len(run.label) - wm - 3)
        widths.append((wr, wm))

    def line(first: str, parts: list[str]) -> str:
        return (f"{first:<{w0}} | " + " | ".join(parts)).rstrip()

    out = [
        line("", [f"{r.label:^{wr + wm + 3}}" for r, (wr, wm) in zip(runs, widths)]),
        line("", [f"{'RMSE':<{wr}}   {'MEDIAN':<{wm}}" for wr, wm in widths]),
    ]
    rule = "-" * (w0 + 1) + "+" + "+".join("-" * (wr + wm + 5) for wr, wm in widths)
    out.append(rule)
    for i, name in enumerate(names):
        if name == "Mean":
            out.append(rule)
        out.append(line(name, [f"{c[i][0]:<{wr}}   {c[i][1]:<{wm}}" for c, (wr, wm) in zip(cells, widths)]))
    if baseline is not None:
        out.append("")
        out.append(f"* Significant difference compared to the {baseline} result ({FOOTNOTE}).")
    return "\n".join(out) + "\n"


def write_table_csv(path, runs: Sequence[Run], baseline: str | None = None) -> None:
    pvals = significance(runs, baseline)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["run", "articulator", "rmse_mean_mm", "rmse_std_mm", "median_mm", "p_value", "significant"])
        for run in runs:
            for key, st in _rows(run):
                if st is None:
                    continue
                p = pvals.get(run.label, {}).get(key)
                w.writerow([run.label, key, f"{st.rmse_mean_mm:.6f}", f"{st.rmse_std_mm:.6f}",
                            f"{st.median_mm:.6f}", "" if p is None else f"{p:.6g}",
                            "" if p is None else int(p < SIGNIFICANCE_LEVEL)])


# --- figures ------------------------------------------------------------------

def frame_rmse(pred: np.ndarray, truth: np.ndarray, pixel_spacing_mm: float = PIXEL_SPACING_MM) -> float:
    """Mean over articulators of the per-articulator RMSE (mm) for one ``(8, 50, 2)`` frame."""
    p = contours_to_vectors(np.asarray(pred, dtype=np.float64)[None])
    t = contours_to_vectors(np.asarray(truth, dtype=np.float64)[None])
    ident = NormalizationStats.identity(p.shape[1])
    return float(frame_rmse_mm(p, t, ident, pixel_spacing_mm).mean())


def overlay_svg(pred: np.ndarray, truth: np.ndarray, title: str = "",
                pixel_spacing_mm: float = PIXEL_SPACING_MM, scale: float = 4.0) -> str:
    """SVG with solid true contours and dashed predictions, one colour per articulator."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != (len(ARTICULATORS), 50, 2) or truth.shape != pred.shape:
        raise DataError("overlay needs two (8, 50, 2) contour frames")
    rmse = frame_rmse(pred, truth, pixel_spacing_mm)
    size = IMAGE_SIZE * scale
    head = 24
    svg = ET.Element("svg", {
        "xmlns": "http://www.w3.org/2000/svg",
        "width": f"{size:g}", "height": f"{size + head:g}",
        "viewBox": f"0 0 {size:g} {size + head:g}",
    })
    text = ET.SubElement(svg, "text", {"x": "8", "y": "17", "font-family": "sans-serif", "font-size": "14"})
    text.text = f"{title + ' - ' if title else ''}RMSE {rmse:.2f} mm"
    for group, data, dash in (("truth", truth, None), ("prediction", pred, "6,4")):
        g = ET.SubElement(svg, "g", {"id": group, "fill": "none", "stroke-width": "2"})
        for a, pts in zip(ARTICULATORS, data):
            attrs = {
                "class": a,
                "stroke": COLORS[a],
                "points": " ".join(f"{x * scale:.2f},{y * scale + head:.2f}" for x, y in pts),
            }
            if dash:
                attrs["stroke-dasharray"] = dash
            ET.SubElement(g, "polyline", attrs)
    ET.indent(svg)
    return ET.tostring(svg, encoding="unicode") + "\n"


def write_overlay(path, pred: np.ndarray, truth: np.ndarray, title: str = "",
                  pixel_spacing_mm: float = PIXEL_SPACING_MM) -> float:
    Path(path).write_text(overlay_svg(pred, truth, title, pixel_spacing_mm))
    return frame_rmse(pred, truth, pixel_spacing_mm)
