"""Corpus schema, frame alignment, silence handling, normalization and splits.

Contour data for a sequence of frames is held as a ``(n_frames, 8, 50, 2)``
array in pixel units. Models see the flattened ``(n_frames, 800)`` layout:
articulator-major, and within an articulator the 50 x values followed by the
50 y values.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from vtinv.errors import DataError

ARTICULATORS = (
    "arytenoid-cartilage",
    "epiglottis",
    "lower-lip",
    "pharyngeal-wall",
    "soft-palate-midline",
    "tongue",
    "upper-lip",
    "vocal-folds",
)
ARTICULATOR_LABELS = {
    "arytenoid-cartilage": "Arytenoid cartilage",
    "epiglottis": "Epiglottis",
    "lower-lip": "Lower lip",
    "pharyngeal-wall": "Pharyngeal wall",
    "soft-palate-midline": "Soft palate midline",
    "tongue": "Tongue",
    "upper-lip": "Upper lip",
    "vocal-folds": "Vocal folds",
}
N_ARTICULATORS = len(ARTICULATORS)
N_POINTS = 50
COORDS_PER_ARTICULATOR = 2 * N_POINTS
CONTOUR_DIM = N_ARTICULATORS * COORDS_PER_ARTICULATOR
PIXEL_SPACING_MM = 1.62
CONTOUR_FPS = 50
ACOUSTIC_FPS = 100
IMAGE_SIZE = 136
N_PHONES = 44
STD_FLOOR = 1e-8

# SAMPA-style French inventory: 16 vowels, 3 glides, 18 consonants,
# 6 stop closures and the silence label (index 43).
FRENCH_PHONES = (
    "i", "e", "E", "a", "A", "O", "o", "u", "y", "2", "9", "@",
    "e~", "a~", "o~", "9~",
    "j", "w", "H",
    "p", "b", "t", "d", "k", "g", "f", "v", "s", "z", "S", "Z",
    "m", "n", "J", "N", "l", "R",
    "p_cl", "b_cl", "t_cl", "d_cl", "k_cl", "g_cl",
    "sil",
)


def articulator_index(name: str) -> int:
    try:
        return ARTICULATORS.index(name)
    except ValueError:
        raise DataError(f"unknown articulator: {name!r}") from None


def articulator_slice(name_or_index) -> slice:
    a = name_or_index if isinstance(name_or_index, int) else articulator_index(name_or_index)
    return slice(a * COORDS_PER_ARTICULATOR, (a + 1) * COORDS_PER_ARTICULATOR)


@dataclass(frozen=True)
class PhoneInventory:
    symbols: tuple = FRENCH_PHONES
    silence_symbol: str = "sil"

    def __post_init__(self):
        if len(self.symbols) != N_PHONES:
            raise DataError(f"phone inventory must have {N_PHONES} symbols, got {len(self.symbols)}")
        if len(set(self.symbols)) != len(self.symbols):
            raise DataError("phone symbols must be unique")
        if self.silence_symbol not in self.symbols:
            raise DataError("silence symbol missing from inventory")

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def silence_index(self) -> int:
        return self.symbols.index(self.silence_symbol)

    def index(self, symbol: str) -> int:
        try:
            return self.symbols.index(symbol)
        except ValueError:
            raise DataError(f"unknown phone: {symbol!r}") from None


DEFAULT_INVENTORY = PhoneInventory()


def one_hot(symbol: int, inventory: PhoneInventory = DEFAULT_INVENTORY) -> np.ndarray:
    if not 0 <= symbol < len(inventory):
        raise DataError(f"unknown phone index: {symbol}")
    v = np.zeros(len(inventory))
    v[symbol] = 1.0
    return v


def one_hot_matrix(symbols: Sequence[int], n_classes: int = N_PHONES) -> np.ndarray:
    symbols = np.asarray(symbols, dtype=int)
    if symbols.size and (symbols.min() < 0 or symbols.max() >= n_classes):
        raise DataError("unknown phone index in label sequence")
    out = np.zeros((len(symbols), n_classes))
    out[np.arange(len(symbols)), symbols] = 1.0
    return out


# --- contour layout -----------------------------------------------------------

def contours_to_vectors(contours: np.ndarray) -> np.ndarray:
    """``(n, 8, 50, 2)`` points -> ``(n, 800)`` model layout."""
    contours = np.asarray(contours, dtype=np.float64)
    if contours.shape[1:] != (N_ARTICULATORS, N_POINTS, 2):
        raise DataError(f"contour array has shape {contours.shape}, expected (n, 8, 50, 2)")
    return contours.transpose(0, 1, 3, 2).reshape(len(contours), CONTOUR_DIM)


def vectors_to_contours(vectors: np.ndarray) -> np.ndarray:
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[1] != CONTOUR_DIM:
        raise DataError(f"contour vectors must be (n, {CONTOUR_DIM})")
    return vectors.reshape(len(vectors), N_ARTICULATORS, 2, N_POINTS).transpose(0, 1, 3, 2)


def upsample_contours(contours: np.ndarray, target_count: int) -> np.ndarray:
    """Take 50 fps contours to the 100 fps acoustic rate.

    Midpoints are inserted between consecutive frames (``2N - 1`` frames);
    when ``target_count == 2N`` the final frame is duplicated.
    """
    contours = np.asarray(contours, dtype=np.float64)
    n = len(contours)
    if n < 1:
        raise DataError("no contour frames to upsample")
    if target_count not in (2 * n - 1, 2 * n):
        raise DataError(f"alignment mismatch: {n} contour frames cannot fill {target_count} acoustic frames")
    out = np.empty((2 * n - 1,) + contours.shape[1:])
    out[0::2] = contours
    out[1::2] = 0.5 * (contours[:-1] + contours[1:])
    if target_count == 2 * n:
        out = np.concatenate([out, out[-1:]])
    return out


# --- phone segmentation and silence policy ------------------------------------

@dataclass(frozen=True)
class PhoneInterval:
    start_ms: float
    end_ms: float
    symbol: int
    sentence_internal: bool = False

    def __post_init__(self):
        if not self.start_ms < self.end_ms:
            raise DataError(f"interval start {self.start_ms} must precede end {self.end_ms}")


def check_intervals(intervals: Sequence[PhoneInterval]) -> None:
    for a, b in zip(intervals, intervals[1:]):
        if b.start_ms < a.end_ms:
            raise DataError(f"overlapping or unordered intervals at {b.start_ms} ms")


def label_frames(frame_times: np.ndarray, intervals: Sequence[PhoneInterval]) -> np.ndarray:
    """Index of the interval covering each frame centre."""
    check_intervals(intervals)
    if len(intervals) == 0:
        raise DataError("segmentation gap: no intervals")
    starts = np.array([iv.start_ms for iv in intervals])
    ends = np.array([iv.end_ms for iv in intervals])
    pos = np.searchsorted(starts, frame_times, side="right") - 1
    bad = (pos < 0) | (frame_times >= ends[np.clip(pos, 0, None)])
    if bad.any():
        t = frame_times[np.argmax(bad)]
        raise DataError(f"segmentation gap: no interval covers frame time {t} ms")
    return pos


@dataclass
class SilencePolicyResult:
    keep: np.ndarray       # indices into the aligned frame sequence
    eval_mask: np.ndarray  # per kept frame: True when it counts in evaluation
    phones: np.ndarray     # phone index per kept frame


def apply_silence_policy(frame_times: np.ndarray, intervals: Sequence[PhoneInterval],
                         mode: str = "train",
                         inventory: PhoneInventory = DEFAULT_INVENTORY) -> SilencePolicyResult:
    """Drop inter-sentence silence; mask sentence-internal silence out of evaluation.

    In ``eval`` mode only the frames that count for evaluation are returned.
    """
    if mode not in ("train", "eval"):
        raise DataError(f"unknown silence-policy mode: {mode!r}")
    frame_times = np.asarray(frame_times, dtype=np.float64)
    which = label_frames(frame_times, intervals)
    sil = inventory.silence_index
    symbols = np.array([iv.symbol for iv in intervals])[which]
    internal = np.array([iv.sentence_internal for iv in intervals])[which]
    is_sil = symbols == sil
    retained = ~is_sil | internal
    keep = np.flatnonzero(retained)
    eval_mask = ~is_sil[keep]
    if mode == "eval":
        keep = keep[eval_mask]
        eval_mask = np.ones(len(keep), dtype=bool)
    return SilencePolicyResult(keep, eval_mask, symbols[keep])


def mark_internal_silences(rows: Sequence[tuple], silence_symbol: str = "sil") -> list[bool]:
    """Decide which silence rows are sentence-internal.

    ``rows`` are ``(start, end, phone, sentence_id)``. A silence is internal
    when the nearest non-silence rows on both sides belong to the same sentence.
    """
    speech = [i for i, r in enumerate(rows) if r[2] != silence_symbol]
    flags = []
    for i, r in enumerate(rows):
        if r[2] != silence_symbol:
            flags.append(False)
            continue
        before = [j for j in speech if j < i]
        after = [j for j in speech if j > i]
        flags.append(bool(before and after and rows[before[-1]][3] == rows[after[0]][3]))
    return flags


# --- normalization ------------------------------------------------------------

@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray
    scope: str = "global"

    def sliced(self, sl: slice) -> "NormalizationStats":
        return NormalizationStats(self.mean[sl], self.std[sl], self.scope)

    @classmethod
    def identity(cls, dim: int) -> "NormalizationStats":
        return cls(np.zeros(dim), np.ones(dim), "identity")


def fit_stats(frames: np.ndarray, scope: str = "global") -> NormalizationStats:
    """Per-dimension mean and population std, std floored at 1e-8."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or len(frames) < 2:
        raise DataError("need at least 2 frames to fit normalization statistics")
    mean = frames.mean(axis=0)
    std = frames.std(axis=0)
    low = std < STD_FLOOR
    if low.any():
        warnings.warn(f"{int(low.sum())} zero-variance dimension(s); std floored at {STD_FLOOR}",
                      RuntimeWarning, stacklevel=2)
        std = np.where(low, STD_FLOOR, std)
    return NormalizationStats(mean, std, scope)


fit_mfcc_stats = fit_stats


def normalize(frames: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return (np.asarray(frames, dtype=np.float64) - stats.mean) / stats.std


normalize_mfcc = normalize


def denormalize(frames: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return np.asarray(frames, dtype=np.float64) * stats.std + stats.mean


def local_window(n_recordings: int, center: int, half_window: int = 50) -> range:
    return range(max(0, center - half_window), min(n_recordings, center + half_window + 1))


def fit_contour_stats_local(recordings: Sequence[np.ndarray], center: int,
                            half_window: int = 50) -> NormalizationStats:
    """Contour statistics over the recordings within ``half_window`` of ``center``.

    ``recordings`` are ``(n_frames, 800)`` arrays ordered by acquisition time.
    The window is clamped at both ends of the list.
    """
    if not 0 <= center < len(recordings):
        raise DataError(f"center {center} outside 0..{len(recordings) - 1}")
    window = local_window(len(recordings), center, half_window)
    rows = np.concatenate([np.asarray(recordings[i], dtype=np.float64) for i in window])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        stats = fit_stats(rows, scope=f"contour-window:{center}")
    return stats


def local_contour_stats_all(recordings: Sequence[np.ndarray],
                            half_window: int = 50) -> list[NormalizationStats]:
    """``fit_contour_stats_local`` for every centre at once, via prefix sums."""
    if not recordings:
        return []
    ref = np.asarray(recordings[0], dtype=np.float64).mean(axis=0)
    counts = np.array([len(r) for r in recordings], dtype=np.float64)
    sums = np.stack([(np.asarray(r, dtype=np.float64) - ref).sum(axis=0) for r in recordings])
    sqs = np.stack([((np.asarray(r, dtype=np.float64) - ref) ** 2).sum(axis=0) for r in recordings])
    zero = np.zeros((1, sums.shape[1]))
    cs, cq = np.concatenate([zero, np.cumsum(sums, 0)]), np.concatenate([zero, np.cumsum(sqs, 0)])
    cn = np.concatenate([[0.0], np.cumsum(counts)])
    out = []
    for c in range(len(recordings)):
        w = local_window(len(recordings), c, half_window)
        n = cn[w.stop] - cn[w.start]
        m = (cs[w.stop] - cs[w.start]) / n
        var = np.maximum((cq[w.stop] - cq[w.start]) / n - m * m, 0.0)
        std = np.sqrt(var)
        out.append(NormalizationStats(m + ref, np.where(std < STD_FLOOR, STD_FLOOR, std),
                                      f"contour-window:{c}"))
    return out


# --- splits -------------------------------------------------------------------

def split_sizes(n: int) -> tuple[int, int, int]:
    if n < 3:
        raise DataError(f"corpus too small: {n} acquisitions (need at least 3)")
    n_valid = max(1, math.floor(0.1 * n))
    n_test = max(1, math.floor(0.1 * n))
    return n - n_valid - n_test, n_valid, n_test


def split_by_acquisition(acquisition_ids: Sequence[str], seed: int = 0) -> dict[str, list[str]]:
    """80/10/10 partition of whole acquisitions (valid and test sizes rounded down)."""
    ids = list(acquisition_ids)
    n_train, n_valid, _ = split_sizes(len(ids))
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return {
        "train": sorted(shuffled[:n_train]),
        "valid": sorted(shuffled[n_train:n_train + n_valid]),
        "test": sorted(shuffled[n_train + n_valid:]),
    }


# --- on-disk corpus -----------------------------------------------------------

@dataclass
class UtteranceRecord:
    id: str
    contours: str
    segmentation: str
    features: str | None = None
    wav: str | None = None


@dataclass
class Acquisition:
    id: str
    utterances: list[UtteranceRecord] = field(default_factory=list)


@dataclass
class Manifest:
    acquisitions: list[Acquisition]
    root: Path
    pixel_spacing_mm: float = PIXEL_SPACING_MM
    fps: int = CONTOUR_FPS

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def to_dict(self) -> dict:
        return {
            "pixel_spacing_mm": self.pixel_spacing_mm,
            "fps": self.fps,
            "acquisitions": [
                {"id": a.id, "utterances": [
                    {k: v for k, v in vars(u).items() if v is not None} for u in a.utterances]}
                for a in self.acquisitions
            ],
        }


def write_manifest(path, manifest: Manifest) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=2) + "\n")


def read_manifest(path) -> Manifest:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
        acqs = [Acquisition(a["id"], [UtteranceRecord(**u) for u in a["utterances"]])
                for a in d["acquisitions"]]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: invalid manifest ({exc})") from exc
    if not acqs:
        raise DataError(f"{path}: manifest lists no acquisitions")
    return Manifest(acqs, path.parent, float(d.get("pixel_spacing_mm", PIXEL_SPACING_MM)),
                    int(d.get("fps", CONTOUR_FPS)))


CONTOUR_COLUMNS = ["frame_index", "articulator", "point_index", "x_px", "y_px"]


def write_contour_csv(path, contours: np.ndarray, frame_indices: Sequence[int] | None = None) -> None:
    contours = np.asarray(contours)
    if frame_indices is None:
        frame_indices = range(len(contours))
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CONTOUR_COLUMNS)
        for fi, frame in zip(frame_indices, contours):
            for a, name in enumerate(ARTICULATORS):
                for p in range(N_POINTS):
                    w.writerow([fi, name, p, f"{frame[a, p, 0]:.6f}", f"{frame[a, p, 1]:.6f}"])


def read_contour_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(frame_indices, contours)`` with contours ``(n, 8, 50, 2)``."""
    frames: dict[int, np.ndarray] = {}
    seen: dict[int, int] = {}
    try:
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames != CONTOUR_COLUMNS:
                raise DataError(f"{path}: expected columns {CONTOUR_COLUMNS}")
            for row in reader:
                fi = int(row["frame_index"])
                p = int(row["point_index"])
                if not 0 <= p < N_POINTS:
                    raise DataError(f"{path}: point_index {p} out of range")
                a = articulator_index(row["articulator"])
                arr = frames.setdefault(fi, np.full((N_ARTICULATORS, N_POINTS, 2), np.nan))
                arr[a, p] = float(row["x_px"]), float(row["y_px"])
                seen[fi] = seen.get(fi, 0) + 1
    except OSError as exc:
        raise DataError(f"{path}: cannot read contours ({exc})") from exc
    except ValueError as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"{path}: malformed contour row ({exc})") from exc
    idx = np.array(sorted(frames), dtype=int)
    if len(idx) == 0:
        raise DataError(f"{path}: no contour frames")
    out = np.stack([frames[i] for i in idx])
    if np.isnan(out).any() or any(seen[i] != N_ARTICULATORS * N_POINTS for i in idx):
        raise DataError(f"{path}: every frame needs exactly 50 points for each of the 8 articulators")
    return idx, out


SEGMENTATION_COLUMNS = ["start_ms", "end_ms", "phone", "sentence_id"]


def write_segmentation_tsv(path, rows: Sequence[tuple]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(SEGMENTATION_COLUMNS)
        for start, end, phone, sentence in rows:
            w.writerow([f"{start:g}", f"{end:g}", phone, sentence])


def read_segmentation_tsv(path, inventory: PhoneInventory = DEFAULT_INVENTORY) -> list[PhoneInterval]:
    try:
        with open(path, newline="") as f:
            reader = csv.reader(f, delimiter="\t")
            header = next(reader, None)
            if header != SEGMENTATION_COLUMNS:
                raise DataError(f"{path}: expected columns {SEGMENTATION_COLUMNS}")
            rows = [(float(r[0]), float(r[1]), r[2], r[3]) for r in reader if r]
    except OSError as exc:
        raise DataError(f"{path}: cannot read segmentation ({exc})") from exc
    except (ValueError, IndexError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"{path}: malformed segmentation row ({exc})") from exc
    flags = mark_internal_silences(rows, inventory.silence_symbol)
    intervals = [PhoneInterval(s, e, inventory.index(p), internal)
                 for (s, e, p, _), internal in zip(rows, flags)]
    check_intervals(intervals)
    return intervals
