"""Seeded synthetic corpus with a known acoustic/articulatory mapping.

A smooth latent trajectory ``z(t)`` (100 fps, bounded in [-1, 1], band-limited
well below 8 Hz) drives both sides:

* contours (50 fps, even latent frames): per-articulator template polyline
  plus a fixed linear deformation of ``z``;
* features (100 fps): ``tanh(A z + b)`` plus Gaussian noise;
* phones: latent coordinate 0 quantized into the 43 speech phones, with
  silence inserted around and between the two sentences of an utterance.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.signal import butter, sosfiltfilt

from vtinv.corpus import (
    ACOUSTIC_FPS,
    ARTICULATORS,
    COORDS_PER_ARTICULATOR,
    DEFAULT_INVENTORY,
    NormalizationStats,
    N_ARTICULATORS,
    N_POINTS,
    PIXEL_SPACING_MM,
    contours_to_vectors,
    denormalize,
    vectors_to_contours,
)
from vtinv.dataset import RawCorpus, RawUtterance
from vtinv.errors import DataError
from vtinv.features import MfccConfig
from vtinv.metrics import frame_rmse_mm

FEATURE_DIM = 39
MAX_LATENT_HZ = 4.0

# Rough mid-sagittal placement (pixels, 136 x 136 image, lips to the right):
# (start, control, end) of a quadratic Bezier per articulator.
_TEMPLATE_ANCHORS = {
    "arytenoid-cartilage": ((44, 108), (40, 114), (46, 120)),
    "epiglottis": ((48, 92), (44, 98), (50, 104)),
    "lower-lip": ((104, 84), (116, 88), (112, 98)),
    "pharyngeal-wall": ((36, 50), (32, 80), (38, 116)),
    "soft-palate-midline": ((78, 48), (66, 50), (58, 62)),
    "tongue": ((54, 100), (70, 40), (100, 72)),
    "upper-lip": ((104, 64), (116, 62), (112, 76)),
    "vocal-folds": ((46, 122), (52, 124), (58, 126)),
}


@dataclass(frozen=True)
class SynthSpec:
    n_acquisitions: int = 20
    utterances_per_acquisition: int = 10
    frames_per_utterance: int = 200   # acoustic frames at 100 fps
    latent_dim: int = 6
    n_sinusoids: int = 8
    noise: float = 0.05
    displacement_px: float = 4.0
    seed: int = 42

    def __post_init__(self):
        if min(self.n_acquisitions, self.utterances_per_acquisition, self.latent_dim, self.n_sinusoids) <= 0:
            raise DataError("synthetic corpus sizes must be positive")
        if self.frames_per_utterance < 60:
            raise DataError("frames_per_utterance must be at least 60")
        if self.noise < 0:
            raise DataError("noise must be non-negative")


@dataclass
class Mapping:
    """Ground-truth parameters shared by every utterance of a corpus."""

    templates: np.ndarray      # (800,) pixel template in model layout
    deformation: np.ndarray    # (800, d)
    feature_weights: np.ndarray  # (39, d)
    feature_bias: np.ndarray   # (39,)

    def contours(self, z: np.ndarray) -> np.ndarray:
        return self.templates + z @ self.deformation.T

    def features(self, z: np.ndarray) -> np.ndarray:
        return np.tanh(z @ self.feature_weights.T + self.feature_bias)

    def to_json(self) -> str:
        return json.dumps({k: np.asarray(v).tolist() for k, v in asdict(self).items()})


def _bezier(p0, p1, p2, n=N_POINTS) -> np.ndarray:
    s = np.linspace(0.0, 1.0, n)[:, None]
    p0, p1, p2 = (np.asarray(p, dtype=float) for p in (p0, p1, p2))
    return (1 - s) ** 2 * p0 + 2 * (1 - s) * s * p1 + s ** 2 * p2


def template_contours() -> np.ndarray:
    """One ``(8, 50, 2)`` frame of non-self-intersecting template polylines."""
    return np.stack([_bezier(*_TEMPLATE_ANCHORS[a]) for a in ARTICULATORS])


def make_mapping(spec: SynthSpec, rng: np.random.Generator) -> Mapping:
    d = spec.latent_dim
    # Deformations vary smoothly along each contour: low-order cosine basis in point index.
    p = np.arange(N_POINTS) / (N_POINTS - 1)
    basis = np.stack([np.cos(np.pi * k * p) for k in range(3)], axis=1)  # (50, 3)
    blocks = []
    for _ in range(N_ARTICULATORS):
        for _axis in range(2):
            blocks.append(basis @ rng.normal(0.0, 1.0, size=(3, d)))
    deformation = np.concatenate(blocks) * spec.displacement_px / np.sqrt(3.0)
    return Mapping(
        templates=contours_to_vectors(template_contours()[None])[0],
        deformation=deformation,
        feature_weights=rng.normal(0.0, 1.0, size=(FEATURE_DIM, d)),
        feature_bias=rng.normal(0.0, 0.3, size=FEATURE_DIM),
    )


def latent_trajectory(n_frames: int, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """``(n_frames, d)`` smooth trajectory, ``|z| <= 1``."""
    t = np.arange(n_frames) / ACOUSTIC_FPS
    d, K = spec.latent_dim, spec.n_sinusoids
    freqs = rng.uniform(0.2, MAX_LATENT_HZ, size=(d, K))
    phases = rng.uniform(0.0, 2 * np.pi, size=(d, K))
    amps = rng.uniform(0.2, 1.0, size=(d, K))
    amps *= 0.8 / amps.sum(axis=1, keepdims=True)
    z = np.einsum("dk,tdk->td", amps, np.sin(2 * np.pi * freqs[None] * t[:, None, None] + phases[None]))
    sos = butter(4, MAX_LATENT_HZ, fs=ACOUSTIC_FPS, output="sos")
    noise = sosfiltfilt(sos, rng.standard_normal((n_frames, d)), axis=0)
    noise *= 0.2 / np.maximum(np.abs(noise).max(axis=0), 1e-12)
    return z + noise


def _frame_boundary_ms(frame: int, hop_ms: float) -> float:
    # Frame i is centred at i*hop + 12.5 ms; a boundary at i*hop + hop puts
    # frame i on the right-hand side.
    return 0.0 if frame == 0 else frame * hop_ms + hop_ms


def frame_labels_to_rows(labels: list[tuple[int, str]], hop_ms: float = 10.0,
                         inventory=DEFAULT_INVENTORY) -> list[tuple]:
    """Run-length encode per-frame ``(phone index, sentence_id)`` into TSV rows."""
    rows = []
    start = 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            phone, sentence = labels[start]
            end_ms = _frame_boundary_ms(i, hop_ms) if i < len(labels) else len(labels) * hop_ms + hop_ms
            rows.append((_frame_boundary_ms(start, hop_ms), end_ms, inventory.symbols[phone], sentence))
            start = i
    return rows


def phone_labels(z0: np.ndarray, utt_id: str, rng: np.random.Generator,
                 inventory=DEFAULT_INVENTORY) -> list[tuple[int, str]]:
    """Per-frame labels: lead silence, sentence 1 (maybe with a pause), gap, sentence 2, tail."""
    n = len(z0)
    sil = inventory.silence_index
    n_speech = len(inventory) - 1
    # |z0| rarely exceeds 0.6; spread that range over the speech phones.
    speech = np.clip(((z0 + 0.6) / 1.2 * n_speech).astype(int), 0, n_speech - 1)
    lead, gap, tail = (int(rng.integers(6, 14)) for _ in range(3))
    mid = int(rng.integers(int(0.4 * n), int(0.6 * n)))
    labels: list[tuple[int, str]] = []
    for i in range(n):
        if i < lead or i >= n - tail or mid <= i < mid + gap:
            labels.append((sil, "-"))
        else:
            sentence = f"{utt_id}_s1" if i < mid else f"{utt_id}_s2"
            labels.append((int(speech[i]), sentence))
    if rng.random() < 0.5 and mid - 12 > lead + 10:
        p0 = int(rng.integers(lead + 10, mid - 12))
        for i in range(p0, p0 + int(rng.integers(3, 8))):
            labels[i] = (sil, f"{utt_id}_s1")
    return labels


def generate_corpus(spec: SynthSpec = SynthSpec()) -> tuple[RawCorpus, Mapping]:
    """Deterministic corpus in the real-data schema, plus its ground-truth mapping."""
    master = np.random.default_rng(spec.seed)
    mapping = make_mapping(spec, master)
    utt_seeds = master.integers(0, 2**63 - 1, size=spec.n_acquisitions * spec.utterances_per_acquisition)
    utts = []
    k = 0
    for a in range(spec.n_acquisitions):
        acq = f"acq{a:03d}"
        for j in range(spec.utterances_per_acquisition):
            rng = np.random.default_rng(int(utt_seeds[k]))
            k += 1
            utts.append(synth_utterance(f"{acq}_u{j:02d}", acq, spec.frames_per_utterance, spec, mapping, rng))
    return RawCorpus(utts, PIXEL_SPACING_MM), mapping


def synth_utterance(utt_id: str, acquisition: str, n_frames: int, spec: SynthSpec, mapping: Mapping,
                    rng: np.random.Generator) -> RawUtterance:
    z = latent_trajectory(n_frames, spec, rng)
    n_contour = (n_frames + 1) // 2
    contours = vectors_to_contours(mapping.contours(z[0::2][:n_contour]))
    # Drawn even at zero noise so the noise level never shifts later draws.
    feats = mapping.features(z) + spec.noise * rng.standard_normal((n_frames, mapping.feature_bias.size))
    rows = frame_labels_to_rows(phone_labels(z[:, 0], utt_id, rng), MfccConfig().hop_ms)
    return RawUtterance(utt_id, acquisition, contours, feats, rows)


def write_mapping(path, mapping: Mapping, spec: SynthSpec) -> None:
    Path(path).write_text(json.dumps({"spec": asdict(spec), "mapping": json.loads(mapping.to_json())}) + "\n")


# --- yardsticks ---------------------------------------------------------------

@dataclass
class MeanPredictor:
    mean_px: np.ndarray   # (800,) training-mean contour in pixels

    def predict(self, n_frames: int) -> np.ndarray:
        return np.tile(self.mean_px, (n_frames, 1))


def baseline_mean_predictor(train_utterances) -> MeanPredictor:
    if not train_utterances:
        raise DataError("empty split")
    return MeanPredictor(np.concatenate([u.pixel_targets() for u in train_utterances]).mean(axis=0))


def baseline_frame_errors(predictor: MeanPredictor, utterances, pixel_spacing_mm: float = PIXEL_SPACING_MM,
                          articulators=ARTICULATORS) -> dict[str, np.ndarray]:
    """Per-frame RMSE (mm) of the constant predictor on evaluation frames."""
    per_art: dict[str, list[np.ndarray]] = {a: [] for a in articulators}
    identity = NormalizationStats.identity(N_ARTICULATORS * COORDS_PER_ARTICULATOR)
    for u in utterances:
        truth = denormalize(u.targets, u.contour_stats)
        err = frame_rmse_mm(predictor.predict(len(truth)), truth, identity, pixel_spacing_mm)[u.eval_mask]
        for a in articulators:
            per_art[a].append(err[:, ARTICULATORS.index(a)])
    return {a: np.concatenate(v) for a, v in per_art.items()}


def ridge_oracle_r2(raw: RawCorpus, alpha: float = 1e-3) -> np.ndarray:
    """Per-coordinate R^2 of a ridge regression from features to contours (even frames)."""
    X = np.concatenate([u.features[0::2][:len(u.contours)] for u in raw.utterances])
    Y = np.concatenate([contours_to_vectors(u.contours) for u in raw.utterances])
    X1 = np.hstack([X, np.ones((len(X), 1))])
    reg = alpha * np.eye(X1.shape[1])
    reg[-1, -1] = 0.0
    W = np.linalg.solve(X1.T @ X1 + reg, X1.T @ Y)
    resid = Y - X1 @ W
    return 1.0 - resid.var(axis=0) / Y.var(axis=0)
