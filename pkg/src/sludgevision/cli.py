"""Command-line entry point: ``sludgevision <command> ...``.

Exit codes: 0 success, 1 validation error, 2 runtime/training failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data_ingest, evalcv, monitor, plotting, synth, trainer
from .config import load_config
from .errors import SludgeVisionError, ValidationError
from .model_zoo import ModelSpec, build_model

log = logging.getLogger("sludgevision")

MODE_NAMES = {"tl": "transfer_learning", "tfs": "from_scratch"}


def _spec(args, cfg, arch: str, mode: str) -> ModelSpec:
    init = getattr(args, "init_weights", None) or cfg.model.init_weights
    return ModelSpec.for_mode(arch, mode, stochastic_depth_rate=cfg.model.stochastic_depth_rate,
                              init_weights=init if mode == "tl" else None)


def _manifest(path, cfg):
    return data_ingest.load_manifest(path, cfg.resolution, cfg.normalization)


def cmd_synth_gen(args) -> int:
    params = synth.SynthParams.for_resolution(args.width, args.height)
    manifest = synth.generate_dataset(args.days, args.per_day, args.seed, args.out, params,
                                      synth.SynthLabelMap(args.label_map))
    print(f"wrote {len(manifest)} images over {args.days} days to {Path(args.out) / 'manifest.csv'}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    manifest = _manifest(args.manifest, cfg)
    spec = _spec(args, cfg, args.arch, args.mode)
    config = cfg.train_config(MODE_NAMES[args.mode])
    seed = args.seed if args.seed is not None else config.seed
    dataset = data_ingest.ImageDataset.from_manifest(manifest)
    tr, val = trainer.carve_validation(dataset, config.validation_fraction, np.random.default_rng(seed))
    model = build_model(spec, seed, cfg.model.weights_dir)
    model, history = trainer.train(model, tr, val, cfg.augment, config, seed, normalization=manifest.normalization)

    out = Path(args.out)
    name = trainer.checkpoint_name(args.arch, args.mode, 0, history.selected_checkpoint_epoch)
    trainer.save_checkpoint(out / name, model, config, seed, manifest.source_hash, manifest.normalization,
                            manifest.resolution)
    monitor.write_atomic(out / "history.json", history.to_json() + "\n")
    plotting.plot_history(history.rows(), out / "history.png", title=f"{args.arch} ({args.mode})")
    print(f"checkpoint {out / name} (epoch {history.selected_checkpoint_epoch}, "
          f"val MSE {history.epochs[history.selected_checkpoint_epoch].val_mse:.2f})")
    return 0


def cmd_cross_validate(args) -> int:
    cfg = load_config(args.config)
    manifest = _manifest(args.manifest, cfg)
    spec = _spec(args, cfg, args.arch, args.mode)
    k = args.k if args.k is not None else cfg.eval.k
    seed = args.seed if args.seed is not None else cfg.eval.seed
    folds = evalcv.kfold_split(manifest, k, seed, per_image=cfg.eval.per_image)
    out = Path(args.out)
    result = evalcv.cross_validate(spec, manifest, cfg.train_config(MODE_NAMES[args.mode]), cfg.augment, k, seed,
                                   folds=folds, checkpoint_dir=out / "checkpoints", weights_dir=cfg.model.weights_dir)
    monitor.emit_report(result, out / "cv_report.json")
    print(monitor.summarize(result.to_dict()), end="")
    return 0


def _parse_specs(text: str):
    entries = []
    for item in filter(None, (t.strip() for t in text.split(","))):
        arch, _, mode = item.partition(":")
        entries.append((arch, mode or "tl"))
    return entries


def cmd_compare(args) -> int:
    cfg = load_config(args.config)
    manifest = _manifest(args.manifest, cfg)
    entries = _parse_specs(args.specs)
    if len(entries) < 2 or any(m not in MODE_NAMES for _, m in entries):
        raise ValidationError(f"need at least two arch:mode entries with mode tl or tfs, got {args.specs!r}")
    k = args.k if args.k is not None else cfg.eval.k
    seed = args.seed if args.seed is not None else cfg.eval.seed
    dataset = data_ingest.ImageDataset.from_manifest(manifest)
    folds = evalcv.kfold_split(manifest, k, seed, per_image=cfg.eval.per_image)
    results = []
    for arch, mode in entries:
        spec = _spec(args, cfg, arch, mode)
        results.append(evalcv.cross_validate(spec, manifest, cfg.train_config(MODE_NAMES[mode]), cfg.augment, k,
                                             seed, dataset=dataset, folds=folds, weights_dir=cfg.model.weights_dir))
    rows = sorted((evalcv.LeaderboardRow(r.model, r.mode, r.aggregate) for r in results),
                  key=lambda r: r.aggregate["mae"].mean)
    out = Path(args.out)
    doc = {"leaderboard": [r.to_dict() for r in rows], "results": [r.to_dict() for r in results]}
    monitor.emit_report(doc, out / "leaderboard.json", summary=False)
    table = evalcv.format_leaderboard(rows)
    monitor.write_atomic(out / "leaderboard.txt", table)
    print(table, end="")
    return 0


def cmd_predict(args) -> int:
    model, payload = trainer.load_checkpoint(args.checkpoint)
    stats = data_ingest.NormalizationStats(**{k: tuple(v) for k, v in payload["normalization"].items()})
    resolution = tuple(payload.get("resolution") or data_ingest.DEFAULT_RESOLUTION)
    manifest = data_ingest.load_manifest(args.manifest, resolution, stats)
    dataset = data_ingest.ImageDataset.from_manifest(manifest)
    preds = trainer.predict_dataset(model, dataset, stats)
    out = Path(args.out)
    monitor.write_predictions(list(zip(dataset.samples, preds)), out / "predictions.csv")
    batch = evalcv.EvalBatch(dataset.labels, preds)
    metrics = evalcv.MetricsReport.from_batch(batch)
    monitor.emit_report({"checkpoint": str(args.checkpoint), "metrics": metrics.as_dict()},
                        out / "predict_metrics.json", summary=False)
    print(f"wrote {len(preds)} predictions to {out / 'predictions.csv'} (MAE {metrics.mae:.2f} mL/g)")
    return 0


def cmd_monitor(args) -> int:
    opts = load_config(args.config).monitor
    config = {k: getattr(args, k) if getattr(args, k) is not None else getattr(opts, k)
              for k in ("threshold", "persistence", "trend_window", "trend_slope_min")}
    series = monitor.aggregate_daily(monitor.read_predictions(args.predictions))
    warnings = monitor.detect_warnings(series, **config)
    report = monitor.emit_report(monitor.monitor_report(series, warnings, config), args.report)
    monitor.write_atomic(Path(report).with_suffix(".csv"), monitor.series_csv(series))
    if args.plot:
        plotting.emit_plot(series, warnings, args.plot, threshold=config["threshold"])
    for w in warnings:
        print(f"{w.onset_day.isoformat()}\t{w.kind}\t{w.trigger_value:.1f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sludgevision", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-gen", help="generate a synthetic floc/filament dataset")
    s.add_argument("--days", type=int, required=True)
    s.add_argument("--per-day", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--width", type=int, default=128)
    s.add_argument("--height", type=int, default=96)
    s.add_argument("--label-map", choices=("linear", "sigmoidal"), default="linear")
    s.set_defaults(func=cmd_synth_gen)

    def model_args(sp, arch_required=True):
        sp.add_argument("--manifest", required=True)
        if arch_required:
            sp.add_argument("--arch", required=True)
            sp.add_argument("--mode", choices=("tl", "tfs"), default="tl")
            sp.add_argument("--init-weights", help="checkpoint whose backbone seeds transfer learning")
        sp.add_argument("--config")
        sp.add_argument("--out", required=True)

    s = sub.add_parser("train", help="train one model with a validation carve-out")
    model_args(s)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("cross-validate", help="day-grouped k-fold cross-validation")
    model_args(s)
    s.add_argument("--k", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_cross_validate)

    s = sub.add_parser("compare", help="cross-validate several arch:mode entries on shared folds")
    model_args(s, arch_required=False)
    s.add_argument("--specs", required=True, help="comma list such as resnet18:tl,resnet18:tfs")
    s.add_argument("--init-weights")
    s.add_argument("--k", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("predict", help="per-image predictions from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("monitor", help="daily aggregation, early warnings, report and plot")
    s.add_argument("--predictions", required=True)
    s.add_argument("--threshold", type=float, help=f"default {monitor.BULKING_THRESHOLD:g} mL/g")
    s.add_argument("--persistence", type=int, help="default 2 consecutive entries")
    s.add_argument("--trend-window", type=int, help="default 4 entries")
    s.add_argument("--trend-slope-min", type=float, help="default 5 mL/g per day")
    s.add_argument("--config")
    s.add_argument("--plot")
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_monitor)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (SludgeVisionError, RuntimeError, OSError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
