"""Training objectives, millimetre-space evaluation and paired t-tests."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import betainc

from vtinv.corpus import (
    ARTICULATORS,
    COORDS_PER_ARTICULATOR,
    N_POINTS,
    PIXEL_SPACING_MM,
    NormalizationStats,
    denormalize,
)
from vtinv.errors import DataError

PROB_FLOOR = 1e-12
SIGNIFICANCE_LEVEL = 0.05


def mse_loss(y: np.ndarray, y_hat: np.ndarray, n: int | None = None) -> tuple[float, np.ndarray]:
    """Mean squared error over ``n`` scalar observations and its gradient w.r.t. ``y_hat``."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise DataError(f"shape mismatch {y.shape} vs {y_hat.shape}")
    n = y.size if n is None else n
    if n == 0:
        raise DataError("empty batch")
    diff = y_hat - y
    return float(np.sum(diff * diff) / n), (2.0 / n) * diff


def _check_one_hot(y: np.ndarray) -> None:
    if y.ndim != 2 or not np.all((y == 0) | (y == 1)) or not np.all(y.sum(axis=1) == 1):
        raise DataError("invalid labels: every row must be one-hot")


def cross_entropy_loss(y: np.ndarray, probs: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Summed categorical cross-entropy.

    Returns ``(total, per_frame, grad_logits)``; ``grad_logits = probs - y`` is
    the gradient of the total with respect to the logits that fed the softmax.
    """
    y = np.asarray(y, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    if y.shape != probs.shape:
        raise DataError(f"shape mismatch {y.shape} vs {probs.shape}")
    _check_one_hot(y)
    per_frame = -np.sum(y * np.log(np.maximum(probs, PROB_FLOOR)), axis=1)
    return float(per_frame.sum()), per_frame, probs - y


def combined_loss(y: np.ndarray, y_hat: np.ndarray, labels: np.ndarray,
                  probs: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """MSE plus cross-entropy, the latter averaged over frames.

    Returns ``(loss, grad_y_hat, grad_logits)``.
    """
    if len(y) != len(labels):
        raise DataError(f"batch mismatch: {len(y)} regression frames vs {len(labels)} label frames")
    mse, g_reg = mse_loss(y, y_hat)
    ce, _, g_cls = cross_entropy_loss(labels, probs)
    n_frames = len(labels)
    return mse + ce / n_frames, g_reg, g_cls / n_frames


# --- millimetre evaluation ----------------------------------------------------

def rmse_frame_articulator(pred: np.ndarray, truth: np.ndarray, stats: NormalizationStats,
                           pixel_spacing_mm: float = PIXEL_SPACING_MM) -> float:
    """RMSE in mm over the 100 coordinates (50 x, 50 y) of one articulator in one frame."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != (COORDS_PER_ARTICULATOR,) or truth.shape != (COORDS_PER_ARTICULATOR,):
        raise DataError(f"contour length error: expected {COORDS_PER_ARTICULATOR} values")
    diff_mm = (denormalize(pred, stats) - denormalize(truth, stats)) * pixel_spacing_mm
    return float(np.sqrt(np.mean(diff_mm * diff_mm)))


def frame_rmse_mm(pred: np.ndarray, truth: np.ndarray, stats: NormalizationStats,
                  pixel_spacing_mm: float = PIXEL_SPACING_MM) -> np.ndarray:
    """Vectorized per-frame, per-articulator RMSE; ``(T, n_art * 100)`` -> ``(T, n_art)``."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.shape[-1] % COORDS_PER_ARTICULATOR:
        raise DataError("contour length error")
    diff_mm = (denormalize(pred, stats) - denormalize(truth, stats)) * pixel_spacing_mm
    T = len(pred)
    sq = (diff_mm * diff_mm).reshape(T, -1, COORDS_PER_ARTICULATOR)
    return np.sqrt(sq.mean(axis=2))


def mean_point_distance_mm(pred: np.ndarray, truth: np.ndarray,
                           pixel_spacing_mm: float = PIXEL_SPACING_MM) -> float:
    """Secondary diagnostic: mean Euclidean distance between corresponding points.

    Inputs are one articulator's 100 pixel-space values (50 x then 50 y).
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(2, N_POINTS)
    truth = np.asarray(truth, dtype=np.float64).reshape(2, N_POINTS)
    return float(np.mean(np.hypot(*(pred - truth))) * pixel_spacing_mm)


@dataclass(frozen=True)
class FrameError:
    articulator: str
    frame_index: int
    rmse_mm: float
    eval_included: bool = True


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float

    @property
    def significant(self) -> bool:
        return self.p < SIGNIFICANCE_LEVEL


def t_two_sided_p(t: float, df: int) -> float:
    if math.isinf(t):
        return 0.0
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


def paired_t_test(errors_a: Sequence[float], errors_b: Sequence[float]) -> TTestResult:
    """Two-sided paired t-test on ``a - b`` with ``n - 1`` degrees of freedom."""
    a = np.asarray(errors_a, dtype=np.float64)
    b = np.asarray(errors_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DataError("paired samples must be 1-D and of equal length")
    n = len(a)
    if n < 2:
        raise DataError("paired t-test needs at least 2 pairs")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if mean == 0.0:
        return TTestResult(0.0, 1.0)
    if sd == 0.0:
        return TTestResult(math.copysign(math.inf, mean), 0.0)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(float(t), t_two_sided_p(t, n - 1))


@dataclass
class ArticulatorStats:
    rmse_mean_mm: float
    rmse_std_mm: float
    median_mm: float
    n_frames: int


@dataclass
class MetricsReport:
    """Per-articulator RMSE statistics plus the per-frame errors behind them."""

    rows: dict[str, ArticulatorStats]
    frame_errors: dict[str, np.ndarray]
    approach: str = ""
    model: str = ""
    p_values: dict[str, float] = field(default_factory=dict)

    @property
    def articulators(self) -> list[str]:
        return [a for a in ARTICULATORS if a in self.rows]

    @property
    def mean(self) -> ArticulatorStats:
        rows = [self.rows[a] for a in self.articulators]
        return ArticulatorStats(
            float(np.mean([r.rmse_mean_mm for r in rows])),
            float(np.mean([r.rmse_std_mm for r in rows])),
            float(np.mean([r.median_mm for r in rows])),
            int(sum(r.n_frames for r in rows)),
        )

    def frame_mean_errors(self) -> np.ndarray:
        """Per-frame error averaged over articulators (frames must be shared)."""
        return np.mean(np.stack([self.frame_errors[a] for a in self.articulators]), axis=0)

    def compare_to(self, baseline: "MetricsReport") -> dict[str, float]:
        """Paired t-tests against ``baseline`` over identical test frames."""
        p = {}
        for a in self.articulators:
            if a not in baseline.frame_errors:
                continue
            if len(self.frame_errors[a]) != len(baseline.frame_errors[a]):
                raise DataError(f"{a}: runs were evaluated on different frames")
            p[a] = paired_t_test(self.frame_errors[a], baseline.frame_errors[a]).p
        if set(self.articulators) <= set(baseline.articulators):
            p["mean"] = paired_t_test(self.frame_mean_errors(), baseline.frame_mean_errors()).p
        self.p_values = p
        return p


def aggregate(frame_errors: Iterable[FrameError], approach: str = "", model: str = "") -> MetricsReport:
    """Mean, population std and median of per-frame RMSE for each articulator."""
    per_art: dict[str, list[tuple[int, float]]] = {}
    for fe in frame_errors:
        if fe.rmse_mm < 0:
            raise DataError("negative RMSE")
        if fe.eval_included:
            per_art.setdefault(fe.articulator, []).append((fe.frame_index, fe.rmse_mm))
    return aggregate_arrays({a: np.array([v for _, v in sorted(vals, key=lambda x: x[0])])
                             for a, vals in per_art.items()}, approach, model)


def aggregate_arrays(errors: Mapping[str, np.ndarray], approach: str = "", model: str = "") -> MetricsReport:
    if not errors:
        raise DataError("empty articulator: no frames to aggregate")
    rows, kept = {}, {}
    for a in ARTICULATORS:
        if a not in errors:
            continue
        e = np.asarray(errors[a], dtype=np.float64)
        if e.size == 0:
            raise DataError(f"empty articulator: {a} has no evaluation frames")
        rows[a] = ArticulatorStats(float(e.mean()), float(e.std()), float(np.median(e)), int(e.size))
        kept[a] = e
    unknown = set(errors) - set(ARTICULATORS)
    if unknown:
        raise DataError(f"unknown articulator(s): {sorted(unknown)}")
    return MetricsReport(rows, kept, approach, model)


# --- CSV exchange -------------------------------------------------------------

METRICS_COLUMNS = ["articulator", "approach", "model", "rmse_mean_mm", "rmse_std_mm",
                   "median_mm", "p_value", "significant"]


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def write_metrics_csv(path, report: MetricsReport) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        entries = [(a, report.rows[a]) for a in report.articulators] + [("mean", report.mean)]
        for name, r in entries:
            p = report.p_values.get(name)
            w.writerow([name, report.approach, report.model, _fmt(r.rmse_mean_mm), _fmt(r.rmse_std_mm),
                        _fmt(r.median_mm), "" if p is None else f"{p:.6g}",
                        "" if p is None else int(p < SIGNIFICANCE_LEVEL)])


def write_frame_errors_csv(path, report: MetricsReport) -> None:
    arts = report.articulators
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["frame"] + arts)
        n = max(len(report.frame_errors[a]) for a in arts)
        for i in range(n):
            w.writerow([i] + [repr(float(report.frame_errors[a][i])) if i < len(report.frame_errors[a]) else ""
                              for a in arts])


def read_frame_errors_csv(path, approach: str = "", model: str = "") -> MetricsReport:
    try:
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader)
            cols: dict[str, list[float]] = {a: [] for a in header[1:]}
            for row in reader:
                for a, v in zip(header[1:], row[1:]):
                    if v != "":
                        cols[a].append(float(v))
    except (OSError, StopIteration, ValueError) as exc:
        raise DataError(f"{path}: cannot read frame errors ({exc})") from exc
    return aggregate_arrays({a: np.array(v) for a, v in cols.items()}, approach, model)
