"""Adam, early stopping, and the ABA / AAT experiment runs."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from vtinv.corpus import ARTICULATORS, articulator_slice
from vtinv.dataset import PreparedCorpus, PreparedUtterance, model_inputs
from vtinv.errors import DataError, DivergenceError
from vtinv.metrics import (
    MetricsReport,
    aggregate_arrays,
    frame_rmse_mm,
    write_frame_errors_csv,
    write_metrics_csv,
)
from vtinv.models import InversionModel, ModelSpec, Sample, build_model, save_model
from vtinv.nn import ParameterStore

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    max_epochs: int = 500
    batch_size: int = 10
    learning_rate: float = 1e-3
    patience: int = 10
    min_delta: float = 1e-6
    seed: int = 0
    precision: str = "float64"
    hidden_width: int = 300
    variant: str = "ST5"
    task_mode: str = "AAT"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if min(self.max_epochs, self.batch_size, self.patience) <= 0 or self.learning_rate <= 0:
            raise DataError("training hyper-parameters must be positive")
        if self.patience >= self.max_epochs:
            raise DataError("patience must be smaller than max_epochs")
        if self.precision not in ("float64", "float32"):
            raise DataError("precision must be float64 or float32")
        if self.task_mode not in ("AAT", "ABA"):
            raise DataError(f"unknown task mode {self.task_mode!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


# --- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    m: ParameterStore
    v: ParameterStore
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParameterStore, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), 0, beta1, beta2, eps)


def adam_step(params: ParameterStore, grads: ParameterStore, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    if not grads.all_finite():
        raise DivergenceError("divergence: non-finite gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p = params[name]
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# --- early stopping -----------------------------------------------------------

class EarlyStopping:
    """Stop once ``patience`` epochs pass without a decrease larger than ``min_delta``."""

    def __init__(self, patience: int = 10, min_delta: float = 1e-6):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record ``value`` for ``epoch``; True if it is a new best."""
        if value < self.best - self.min_delta:
            self.best, self.best_epoch = value, epoch
            return True
        return False

    def should_stop(self, epoch: int) -> bool:
        return epoch - self.best_epoch >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_loss: float
    improved: bool


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_valid_loss: float = math.inf
    stop_reason: str = ""

    @property
    def stop_epoch(self) -> int:
        return self.records[-1].epoch if self.records else 0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "valid_loss", "best"])
            for r in self.records:
                w.writerow([r.epoch, repr(float(r.train_loss)), repr(float(r.valid_loss)), int(r.improved)])


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def dataset_loss(model: InversionModel, samples: Sequence[Sample], batch_size: int = 10) -> float:
    """Mean per-utterance loss over ``samples`` (no gradients)."""
    total = 0.0
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        loss, _ = model.objective(chunk, need_grad=False)
        total += loss * len(chunk)
    return float(total / len(samples))


def train(model: InversionModel, train_samples: Sequence[Sample], valid_samples: Sequence[Sample],
          config: TrainConfig, valid_loss_fn: Callable[[int, InversionModel], float] | None = None
          ) -> tuple[ParameterStore, TrainLog]:
    """Mini-batch Adam with early stopping; returns the best-validation parameters.

    ``valid_loss_fn(epoch, model)`` replaces the validation loss when given.
    """
    if not train_samples:
        raise DataError("empty split: no training utterances")
    if not valid_samples and valid_loss_fn is None:
        raise DataError("empty split: no validation utterances")
    rng = np.random.default_rng(config.seed)
    state = AdamState.for_params(model.params, config.beta1, config.beta2, config.adam_eps)
    stopper = EarlyStopping(config.patience, config.min_delta)
    best = model.params.copy()
    tlog = TrainLog()
    for epoch in range(1, config.max_epochs + 1):
        seen, running = 0, 0.0
        for idx in _batches(len(train_samples), config.batch_size, rng):
            batch = [train_samples[i] for i in idx]
            loss, grads = model.objective(batch)
            loss = float(loss)
            if not math.isfinite(loss):
                raise DivergenceError(f"divergence: loss became {loss} at epoch {epoch}")
            adam_step(model.params, grads, state, config.learning_rate)
            running += loss * len(batch)
            seen += len(batch)
        if valid_loss_fn is not None:
            val = float(valid_loss_fn(epoch, model))
        else:
            val = dataset_loss(model, valid_samples, config.batch_size)
        improved = stopper.update(epoch, val)
        if improved:
            best = model.params.copy()
        tlog.records.append(EpochRecord(epoch, float(running / seen), val, improved))
        log.info("epoch %d train %.6f valid %.6f%s", epoch, running / seen, val, " *" if improved else "")
        if stopper.should_stop(epoch):
            tlog.stop_reason = "early_stopping"
            break
    else:
        tlog.stop_reason = "max_epochs"
    tlog.best_epoch, tlog.best_valid_loss = stopper.best_epoch, stopper.best
    return best, tlog


# --- evaluation ---------------------------------------------------------------

def to_samples(utterances: Sequence[PreparedUtterance], spec: ModelSpec) -> list[Sample]:
    xs = model_inputs(utterances, spec.context_radius if spec.uses_context else None)
    sl = articulator_slice(spec.articulator) if spec.task_mode == "ABA" else slice(None)
    return [Sample(x, u.targets[:, sl], u.phones) for x, u in zip(xs, utterances)]


@dataclass
class Evaluation:
    frame_errors: dict[str, np.ndarray]
    phone_accuracy: float | None = None
    predictions: list[np.ndarray] = field(default_factory=list)  # normalized, per utterance


def evaluate(model: InversionModel, utterances: Sequence[PreparedUtterance],
             pixel_spacing_mm: float) -> Evaluation:
    """Per-frame RMSE (mm) on evaluation frames for the articulators the model predicts."""
    spec = model.spec
    samples = to_samples(utterances, spec)
    outputs = model.predict([s.x for s in samples])
    arts = [spec.articulator] if spec.task_mode == "ABA" else list(ARTICULATORS)
    sl = articulator_slice(spec.articulator) if spec.task_mode == "ABA" else slice(None)
    errs: dict[str, list[np.ndarray]] = {a: [] for a in arts}
    correct = total = 0
    for u, s, out in zip(utterances, samples, outputs):
        e = frame_rmse_mm(out.contours, s.y, u.contour_stats.sliced(sl), pixel_spacing_mm)[u.eval_mask]
        for j, a in enumerate(arts):
            errs[a].append(e[:, j])
        if out.phone_probs is not None:
            pred = out.phone_probs.argmax(axis=1)[u.eval_mask]
            correct += int((pred == u.phones[u.eval_mask]).sum())
            total += int(u.eval_mask.sum())
    acc = correct / total if total else None
    return Evaluation({a: np.concatenate(v) for a, v in errs.items()}, acc,
                      [o.contours for o in outputs])


# --- experiments --------------------------------------------------------------

@dataclass
class RunResult:
    spec: ModelSpec
    log: TrainLog
    evaluation: Evaluation
    checkpoint: Path | None = None
    model: InversionModel | None = None


@dataclass
class ExperimentResult:
    approach: str
    variant: str
    report: MetricsReport
    runs: list[RunResult]

    @property
    def checkpoints(self) -> list[Path]:
        return [r.checkpoint for r in self.runs if r.checkpoint is not None]

    @property
    def phone_accuracy(self) -> float | None:
        accs = [r.evaluation.phone_accuracy for r in self.runs if r.evaluation.phone_accuracy is not None]
        return float(np.mean(accs)) if accs else None


def _train_one(spec: ModelSpec, train_u, valid_u, config: TrainConfig):
    dtype = np.float32 if config.precision == "float32" else np.float64
    model = build_model(spec, seed=config.seed, dtype=dtype)
    best, tlog = train(model, to_samples(train_u, spec), to_samples(valid_u, spec), config)
    model.params.set_flat(best.flat())
    return model, tlog


def run_experiment(approach: str | None, variant: str | None, corpus: PreparedCorpus, config: TrainConfig,
                   out_dir=None, articulators: Sequence[str] | None = None, workers: int = 1,
                   deterministic: bool = True, baseline: MetricsReport | None = None) -> ExperimentResult:
    """Train and test one ABA (one model per articulator) or AAT (one model) configuration.

    ``approach`` and ``variant`` default to the config's. With ``baseline``
    the report carries paired t-test p-values against it.
    """
    approach = (approach or config.task_mode).upper()
    variant = variant or config.variant
    if approach not in ("ABA", "AAT"):
        raise DataError(f"unknown approach {approach!r}")
    if approach == "ABA":
        arts = list(articulators) if articulators else list(ARTICULATORS)
        specs = [ModelSpec(variant, "ABA", a, hidden_width=config.hidden_width) for a in arts]
    else:
        specs = [ModelSpec(variant, "AAT", hidden_width=config.hidden_width)]

    train_u, valid_u = corpus.split("train"), corpus.split("valid")
    if not train_u or not valid_u:
        raise DataError("empty split")
    t0 = time.time()
    if workers > 1 and len(specs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            trained = list(pool.map(_train_one, specs, [train_u] * len(specs), [valid_u] * len(specs),
                                    [config] * len(specs)))
    else:
        trained = [_train_one(s, train_u, valid_u, config) for s in specs]

    test_u = corpus.split("test")
    if not test_u:
        raise DataError("empty split: no test utterances")
    runs = []
    frame_errors: dict[str, np.ndarray] = {}
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for spec, (model, tlog) in zip(specs, trained):
        ev = evaluate(model, test_u, corpus.pixel_spacing_mm)
        frame_errors.update(ev.frame_errors)
        ckpt = None
        if out is not None:
            tag = spec.articulator or "all"
            ckpt = out / f"model_{tag}.vtm"
            save_model(ckpt, model)
            tlog.write_csv(out / f"trainlog_{tag}.csv")
        runs.append(RunResult(spec, tlog, ev, ckpt, model))

    display = specs[0].display_name
    report = aggregate_arrays(frame_errors, approach, display)
    if baseline is not None:
        report.compare_to(baseline)
    result = ExperimentResult(approach, specs[0].variant, report, runs)
    if out is not None:
        write_metrics_csv(out / "metrics.csv", report)
        write_frame_errors_csv(out / "frame_errors.csv", report)
        info = {
            "approach": approach,
            "variant": specs[0].variant,
            "model": display,
            "config": asdict(config),
            "articulators": [s.articulator for s in specs] if approach == "ABA" else list(ARTICULATORS),
            "best_epochs": [r.log.best_epoch for r in runs],
            "stop_reasons": [r.log.stop_reason for r in runs],
            "phone_accuracy": result.phone_accuracy,
            "test_utterances": [u.id for u in test_u],
        }
        if not deterministic:
            info["created_unix"] = time.time()
            info["elapsed_s"] = time.time() - t0
        (out / "run.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return result


def write_predictions(out_dir, model: InversionModel, utterances: Sequence[PreparedUtterance],
                      evaluation: Evaluation) -> list[Path]:
    """Pixel-space predicted and true contours per utterance, as contour CSVs (AAT models only)."""
    from vtinv.corpus import denormalize, vectors_to_contours, write_contour_csv
    if model.spec.task_mode != "AAT":
        raise DataError("contour export needs an AAT model")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for u, pred in zip(utterances, evaluation.predictions):
        pred_px = vectors_to_contours(denormalize(pred, u.contour_stats))
        true_px = vectors_to_contours(u.pixel_targets())
        write_contour_csv(out / f"{u.id}_pred.csv", pred_px, u.frame_indices)
        write_contour_csv(out / f"{u.id}_truth.csv", true_px, u.frame_indices)
        paths.append(out / f"{u.id}_pred.csv")
    return paths
