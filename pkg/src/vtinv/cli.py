"""``vtinv`` command line: features, synth, prepare, train, evaluate, report, plot, gradcheck.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from vtinv.errors import DataError, NumericError

log = logging.getLogger("vtinv")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _read_json(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"config {path}: {exc}") from exc


def _workers() -> int:
    raw = os.environ.get("VT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"VT_THREADS must be an integer, got {raw!r}") from None


# --- commands -----------------------------------------------------------------

def cmd_features(args) -> int:
    from vtinv.features import MfccConfig, compute_features, read_wav, write_feature_file

    cfg = MfccConfig.from_dict(_read_json(args.config)) if args.config else MfccConfig()
    wav_dir, out = Path(args.wav_dir), Path(args.out_dir)
    if not wav_dir.is_dir():
        raise DataError(f"{wav_dir}: not a directory")
    wavs = sorted(wav_dir.glob("*.wav"))
    if not wavs:
        log.warning("no WAV files in %s", wav_dir)
        print("0 files, 0 frames")
        return EXIT_OK
    out.mkdir(parents=True, exist_ok=True)
    failures, frames = [], 0
    for wav in wavs:
        try:
            feats = compute_features(read_wav(wav), cfg)
        except DataError as exc:
            failures.append((wav.name, str(exc)))
            continue
        write_feature_file(out / f"{wav.stem}.vtf", feats)
        frames += len(feats)
        print(f"{wav.name}\t{len(feats)} frames")
    print(f"{len(wavs) - len(failures)} files, {frames} frames")
    for name, msg in failures:
        print(f"failed: {name}: {msg}", file=sys.stderr)
    return EXIT_DATA if failures else EXIT_OK


def cmd_synth(args) -> int:
    from vtinv.dataset import write_corpus
    from vtinv.synth import SynthSpec, generate_corpus, write_mapping

    spec = SynthSpec(n_acquisitions=args.acquisitions, utterances_per_acquisition=args.utterances,
                     frames_per_utterance=args.frames, noise=args.noise, seed=args.seed)
    raw, mapping = generate_corpus(spec)
    manifest = write_corpus(raw, args.out_dir)
    write_mapping(Path(args.out_dir) / "mapping.json", mapping, spec)
    print(f"{len(raw.utterances)} utterances -> {manifest}")
    return EXIT_OK


def cmd_prepare(args) -> int:
    from vtinv.dataset import load_corpus, prepare_corpus
    from vtinv.features import MfccConfig

    cfg = MfccConfig.from_dict(_read_json(args.config)) if args.config else MfccConfig()
    prepared = prepare_corpus(load_corpus(args.manifest, cfg), seed=args.seed, half_window=args.half_window)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    prepared.save(args.out)
    sizes = {k: len(v) for k, v in prepared.splits.items()}
    print(f"train {sizes['train']}, valid {sizes['valid']}, test {sizes['test']} utterances -> {args.out}")
    return EXIT_OK


_TRAIN_FLAGS = ("max_epochs", "batch_size", "learning_rate", "patience", "seed", "precision",
                "hidden_width", "variant", "task_mode")


def _train_config(args):
    from vtinv.training import TrainConfig

    raw = _read_json(args.config)
    for key in _TRAIN_FLAGS:
        v = getattr(args, key, None)
        if v is not None:
            raw[key] = v
    return TrainConfig.from_dict(raw), raw


def cmd_train(args) -> int:
    from vtinv.dataset import PreparedCorpus
    from vtinv.report import load_run
    from vtinv.training import run_experiment

    config, raw = _train_config(args)
    corpus_path = args.corpus or raw.get("corpus")
    out_dir = args.out_dir or raw.get("out_dir")
    if not corpus_path or not out_dir:
        raise UsageError("train needs --corpus and --out-dir (flags or config keys)")
    corpus = PreparedCorpus.load(corpus_path)
    baseline = load_run(args.baseline).report if args.baseline else None
    result = run_experiment(None, None, corpus, config, out_dir, args.articulators, workers=_workers(),
                            deterministic=args.deterministic, baseline=baseline)
    m = result.report.mean
    print(f"{result.approach} {result.report.model}: mean RMSE {m.rmse_mean_mm:.3f} mm "
          f"(median {m.median_mm:.3f}) over {len(result.checkpoints)} checkpoint(s) -> {out_dir}")
    if result.phone_accuracy is not None:
        print(f"phone accuracy {result.phone_accuracy:.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from vtinv.dataset import PreparedCorpus
    from vtinv.metrics import aggregate_arrays, write_frame_errors_csv, write_metrics_csv
    from vtinv.models import load_model
    from vtinv.training import evaluate, write_predictions

    corpus = PreparedCorpus.load(args.corpus)
    utts = corpus.split(args.split)
    models = [load_model(p) for p in args.checkpoints]
    modes = {m.spec.task_mode for m in models}
    if len(modes) != 1:
        raise DataError("checkpoints mix ABA and AAT models")
    errors, accs = {}, []
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for model in models:
        ev = evaluate(model, utts, corpus.pixel_spacing_mm)
        if set(ev.frame_errors) & set(errors):
            raise DataError("two checkpoints predict the same articulator")
        errors.update(ev.frame_errors)
        if ev.phone_accuracy is not None:
            accs.append(ev.phone_accuracy)
        if model.spec.task_mode == "AAT":
            write_predictions(out / "contours", model, utts, ev)
    report = aggregate_arrays(errors, modes.pop(), models[0].spec.display_name)
    write_metrics_csv(out / "metrics.csv", report)
    write_frame_errors_csv(out / "frame_errors.csv", report)
    print(f"mean RMSE {report.mean.rmse_mean_mm:.3f} mm on {len(utts)} {args.split} utterances")
    if accs:
        print(f"phone accuracy {np.mean(accs):.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    from vtinv.report import load_run, render_table, write_table_csv

    runs = []
    for spec in args.runs:
        label, sep, path = spec.partition("=")
        runs.append(load_run(path, label) if sep else load_run(spec))
    labels = [r.label for r in runs]
    if len(set(labels)) != len(labels):
        raise DataError(f"duplicate run labels {labels}; use LABEL=PATH")
    table = render_table(runs, args.baseline)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(table)
        write_table_csv(out.with_suffix(".csv"), runs, args.baseline)
    sys.stdout.write(table)
    return EXIT_OK


def cmd_plot(args) -> int:
    from vtinv.corpus import read_contour_csv
    from vtinv.report import write_overlay

    pred_idx, pred = read_contour_csv(args.pred)
    true_idx, truth = read_contour_csv(args.truth)
    out = Path(args.out)
    multiple = len(args.frame) > 1 or out.suffix.lower() != ".svg"
    if multiple:
        out.mkdir(parents=True, exist_ok=True)
    for frame in args.frame:
        ip = np.flatnonzero(pred_idx == frame)
        it = np.flatnonzero(true_idx == frame)
        if not len(ip) or not len(it):
            raise DataError(f"frame {frame} absent from {'prediction' if not len(ip) else 'truth'} file")
        path = out / f"frame_{frame:05d}.svg" if multiple else out
        rmse = write_overlay(path, pred[ip[0]], truth[it[0]], f"frame {frame}", args.pixel_spacing)
        print(f"{path}\tRMSE {rmse:.2f} mm")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from vtinv.models import VARIANTS, ModelSpec, build_model, check_model_gradients, random_batch

    variants = VARIANTS if args.variant == "all" else [args.variant]
    failed = False
    for v in variants:
        spec = ModelSpec(v, "AAT", feature_dim=args.feature_dim, hidden_width=args.hidden)
        model = build_model(spec, seed=args.seed)
        rep = check_model_gradients(model, random_batch(spec, [args.length, max(1, args.length - 2)], args.seed),
                                    n_coords=args.coords, seed=args.seed)
        print(f"{spec.display_name}: {rep.summary()}")
        failed |= not rep.passed
    if failed:
        raise NumericError("gradient check failed")
    return EXIT_OK


# --- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vtinv", description="Acoustic-to-articulatory inversion toolkit.")
    p.add_argument("--deterministic", action="store_true",
                   help="omit timestamps so outputs are byte-identical across runs")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("features", help="compute MFCC+delta features for a directory of WAVs")
    s.add_argument("--wav-dir", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--config", help="JSON MFCC configuration")
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("synth", help="write a synthetic corpus with a known mapping")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--acquisitions", type=int, default=20)
    s.add_argument("--utterances", type=int, default=10)
    s.add_argument("--frames", type=int, default=200)
    s.add_argument("--noise", type=float, default=0.05)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prepare", help="align, filter silence, normalize and split a corpus")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="prepared corpus file (.npz)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--half-window", type=int, default=50)
    s.add_argument("--config", help="JSON MFCC configuration (used when features come from WAVs)")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train and test one ABA or AAT configuration")
    s.add_argument("--corpus")
    s.add_argument("--out-dir")
    s.add_argument("--config", help="JSON experiment config (TrainConfig keys, corpus, out_dir)")
    s.add_argument("--approach", dest="task_mode", choices=("ABA", "AAT"))
    s.add_argument("--variant", choices=("ST5", "ST8", "MT5", "ST5_CW11"))
    s.add_argument("--articulators", nargs="+", help="ABA subset (default: all 8)")
    s.add_argument("--max-epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--learning-rate", type=float)
    s.add_argument("--patience", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--hidden-width", type=int)
    s.add_argument("--precision", choices=("float64", "float32"))
    s.add_argument("--baseline", help="run directory to t-test against")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="score checkpoints on a split; export contours")
    s.add_argument("--corpus", required=True)
    s.add_argument("--checkpoints", nargs="+", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--split", choices=("train", "valid", "test"), default="test")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", help="render a comparison table from run directories")
    s.add_argument("--runs", nargs="+", required=True, help="PATH or LABEL=PATH")
    s.add_argument("--baseline", help="label of the run to star significance against")
    s.add_argument("--out", help="text table path; a .csv is written alongside")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("plot", help="SVG overlay of predicted and true contours")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--frame", type=int, nargs="+", required=True)
    s.add_argument("--out", required=True, help=".svg file, or a directory for several frames")
    s.add_argument("--pixel-spacing", type=float, default=1.62)
    s.set_defaults(func=cmd_plot)

    s = sub.add_parser("gradcheck", help="finite-difference check of model gradients")
    s.add_argument("--variant", choices=("all", "ST5", "ST8", "MT5", "ST5_CW11"), default="all")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--length", type=int, default=6)
    s.add_argument("--hidden", type=int, default=5)
    s.add_argument("--feature-dim", type=int, default=39)
    s.add_argument("--coords", type=int, default=200)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"vtinv {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"vtinv {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"vtinv {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
