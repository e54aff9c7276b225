"""Raw corpora on disk or in memory, and their preparation for training.

Preparation aligns 50 fps contours to the 100 fps acoustic frames, applies
the silence policy, normalizes features with training-split statistics and
contours with statistics from the neighbouring recordings, and partitions
utterances by acquisition.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from vtinv import corpus as C
from vtinv.errors import DataError
from vtinv.features import (
    MfccConfig,
    build_context_windows,
    compute_features,
    frame_times_ms,
    read_feature_file,
    read_wav,
    write_feature_file,
)


@dataclass
class RawUtterance:
    id: str
    acquisition: str
    contours: np.ndarray        # (N, 8, 50, 2) pixels at 50 fps
    features: np.ndarray        # (M, 39) unnormalized, M in {2N - 1, 2N}
    segmentation: list          # (start_ms, end_ms, phone symbol, sentence_id) rows

    def intervals(self, inventory: C.PhoneInventory = C.DEFAULT_INVENTORY) -> list[C.PhoneInterval]:
        flags = C.mark_internal_silences(self.segmentation, inventory.silence_symbol)
        return [C.PhoneInterval(s, e, inventory.index(p), f)
                for (s, e, p, _), f in zip(self.segmentation, flags)]


@dataclass
class RawCorpus:
    utterances: list[RawUtterance]    # ordered by acquisition, then position
    pixel_spacing_mm: float = C.PIXEL_SPACING_MM

    @property
    def acquisition_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for u in self.utterances:
            seen.setdefault(u.acquisition)
        return list(seen)


def write_corpus(raw: RawCorpus, out_dir) -> Path:
    """Write contour CSVs, segmentation TSVs, VTF1 features and ``manifest.json``."""
    out = Path(out_dir)
    acqs: dict[str, C.Acquisition] = {}
    for u in raw.utterances:
        d = out / u.acquisition
        d.mkdir(parents=True, exist_ok=True)
        rec = C.UtteranceRecord(
            id=u.id,
            contours=f"{u.acquisition}/{u.id}_contours.csv",
            segmentation=f"{u.acquisition}/{u.id}.tsv",
            features=f"{u.acquisition}/{u.id}.vtf",
        )
        C.write_contour_csv(out / rec.contours, u.contours)
        C.write_segmentation_tsv(out / rec.segmentation, u.segmentation)
        write_feature_file(out / rec.features, u.features)
        acqs.setdefault(u.acquisition, C.Acquisition(u.acquisition)).utterances.append(rec)
    manifest = C.Manifest(list(acqs.values()), out, raw.pixel_spacing_mm)
    path = out / "manifest.json"
    C.write_manifest(path, manifest)
    return path


def load_corpus(manifest_path, mfcc_config: MfccConfig = MfccConfig()) -> RawCorpus:
    """Read a corpus; utterances with a WAV but no feature file get features computed."""
    manifest = C.read_manifest(manifest_path)
    utts = []
    for acq in manifest.acquisitions:
        for rec in acq.utterances:
            _, contours = C.read_contour_csv(manifest.resolve(rec.contours))
            if rec.features:
                feats = read_feature_file(manifest.resolve(rec.features))
            elif rec.wav:
                feats = compute_features(read_wav(manifest.resolve(rec.wav)), mfcc_config)
            else:
                raise DataError(f"utterance {rec.id}: neither features nor wav listed")
            rows = _read_rows(manifest.resolve(rec.segmentation))
            utts.append(RawUtterance(rec.id, acq.id, contours, feats, rows))
    return RawCorpus(utts, manifest.pixel_spacing_mm)


def _read_rows(path) -> list[tuple]:
    C.read_segmentation_tsv(path)  # validates
    rows = []
    with open(path) as f:
        next(f)
        for line in f:
            if line.strip():
                s, e, p, sid = line.rstrip("\n").split("\t")
                rows.append((float(s), float(e), p, sid))
    return rows


@dataclass
class PreparedUtterance:
    id: str
    acquisition: str
    features: np.ndarray       # (T, 39) normalized
    targets: np.ndarray        # (T, 800) normalized with contour_stats
    phones: np.ndarray         # (T,)
    eval_mask: np.ndarray      # (T,) bool
    frame_indices: np.ndarray  # (T,) positions in the aligned 100 fps sequence
    contour_stats: C.NormalizationStats

    def pixel_targets(self) -> np.ndarray:
        return C.denormalize(self.targets, self.contour_stats)


SPLITS = ("train", "valid", "test")


@dataclass
class PreparedCorpus:
    splits: dict[str, list[PreparedUtterance]]
    mfcc_stats: C.NormalizationStats
    pixel_spacing_mm: float = C.PIXEL_SPACING_MM
    meta: dict = field(default_factory=dict)
    access_log: list[str] = field(default_factory=list)

    def split(self, name: str) -> list[PreparedUtterance]:
        """Access a split; every access is recorded for leakage audits."""
        if name not in SPLITS:
            raise DataError(f"unknown split {name!r}")
        self.access_log.append(name)
        return self.splits[name]

    def save(self, path) -> None:
        arrays: dict[str, np.ndarray] = {
            "mfcc_mean": self.mfcc_stats.mean, "mfcc_std": self.mfcc_stats.std,
        }
        index = []
        for split in SPLITS:
            for i, u in enumerate(self.splits[split]):
                key = f"{split}/{i}"
                index.append({"key": key, "split": split, "id": u.id, "acquisition": u.acquisition})
                arrays[f"{key}/features"] = u.features
                arrays[f"{key}/targets"] = u.targets
                arrays[f"{key}/phones"] = u.phones
                arrays[f"{key}/eval_mask"] = u.eval_mask
                arrays[f"{key}/frame_indices"] = u.frame_indices
                arrays[f"{key}/contour_mean"] = u.contour_stats.mean
                arrays[f"{key}/contour_std"] = u.contour_stats.std
        header = {"index": index, "pixel_spacing_mm": self.pixel_spacing_mm, "meta": self.meta}
        arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
        with open(path, "wb") as f:
            np.savez(f, **arrays)

    @classmethod
    def load(cls, path) -> "PreparedCorpus":
        try:
            z = np.load(path)
            header = json.loads(z["header"].tobytes())
        except (OSError, ValueError, KeyError) as exc:
            raise DataError(f"{path}: not a prepared corpus ({exc})") from exc
        splits: dict[str, list[PreparedUtterance]] = {s: [] for s in SPLITS}
        for entry in header["index"]:
            k = entry["key"]
            splits[entry["split"]].append(PreparedUtterance(
                entry["id"], entry["acquisition"], z[f"{k}/features"], z[f"{k}/targets"],
                z[f"{k}/phones"], z[f"{k}/eval_mask"], z[f"{k}/frame_indices"],
                C.NormalizationStats(z[f"{k}/contour_mean"], z[f"{k}/contour_std"], "contour-window"),
            ))
        stats = C.NormalizationStats(z["mfcc_mean"], z["mfcc_std"], "global-mfcc")
        return cls(splits, stats, header["pixel_spacing_mm"], header.get("meta", {}))


def align_utterance(u: RawUtterance, inventory: C.PhoneInventory = C.DEFAULT_INVENTORY,
                    mfcc_config: MfccConfig = MfccConfig()):
    """Upsample contours to the acoustic rate and apply the silence policy.

    Returns ``(features, contour_vectors, policy)`` restricted to kept frames.
    """
    contours = C.upsample_contours(u.contours, len(u.features))
    policy = C.apply_silence_policy(frame_times_ms(len(u.features), mfcc_config), u.intervals(inventory),
                                    "train", inventory)
    if len(policy.keep) == 0:
        raise DataError(f"utterance {u.id}: no frames left after silence removal")
    return u.features[policy.keep], C.contours_to_vectors(contours[policy.keep]), policy


def prepare_corpus(raw: RawCorpus, seed: int = 0, half_window: int = 50,
                   inventory: C.PhoneInventory = C.DEFAULT_INVENTORY,
                   mfcc_config: MfccConfig = MfccConfig()) -> PreparedCorpus:
    if not raw.utterances:
        raise DataError("corpus has no utterances")
    partition = C.split_by_acquisition(raw.acquisition_ids, seed)
    split_of = {a: s for s, ids in partition.items() for a in ids}

    recordings = [C.contours_to_vectors(u.contours) for u in raw.utterances]
    aligned = [align_utterance(u, inventory, mfcc_config) for u in raw.utterances]

    train_feats = [f for (f, _, _), u in zip(aligned, raw.utterances) if split_of[u.acquisition] == "train"]
    mfcc_stats = C.fit_mfcc_stats(np.concatenate(train_feats), scope="global-mfcc")

    splits: dict[str, list[PreparedUtterance]] = {s: [] for s in SPLITS}
    local_stats = C.local_contour_stats_all(recordings, half_window)
    for u, (feats, vecs, policy), stats in zip(raw.utterances, aligned, local_stats):
        splits[split_of[u.acquisition]].append(PreparedUtterance(
            u.id, u.acquisition, C.normalize_mfcc(feats, mfcc_stats), C.normalize(vecs, stats),
            policy.phones.astype(np.int64), policy.eval_mask, policy.keep, stats,
        ))
    meta = {"seed": seed, "half_window": half_window, "partition": partition}
    return PreparedCorpus(splits, mfcc_stats, raw.pixel_spacing_mm, meta)


def model_inputs(utterances: Sequence[PreparedUtterance], context_radius: int | None = None) -> list[np.ndarray]:
    if context_radius is None:
        return [u.features for u in utterances]
    return [build_context_windows(u.features, context_radius) for u in utterances]
