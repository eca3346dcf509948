"""Command line driver for the pipeline.

One binary, eight subcommands:

    preprocess | split-folds | weights | train-head | predict
    | ensemble-search | evaluate | synth

Config comes from --config or the DERMPIPE_CONFIG environment variable;
flags override config values. Logs go to stderr, artifacts to files, and
stdout carries only the optional --json summary line. Exit codes: 0 ok,
1 validation error, 2 I/O error, 64 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from .config import PipelineConfig, load_config, rr_scales
from .constants import CLASS_INDEX, CLASSES
from .errors import MissingFeatures, PipelineError
from .features import FeatureStore
from .folds import (assemble_training_set, class_counts, class_weights,
                    load_manifests, read_folds, read_manifest, split_folds,
                    write_folds, write_weights)
from .head import (TrainConfig, head_dims, load_checkpoint, predict_proba,
                   save_checkpoint, train_head, write_history)
from .imaging import PreprocessSettings, preprocess_tree, write_crop_reports
from .ioutil import atomic_write
from .meta import encode_meta
from .metrics import confusion, mean_sensitivity, per_class_metrics, \
    write_class_report, write_summary
from .synth import generate_corpus
from .tta import (Configuration, PredictionMatrix, aggregate_predictions,
                  crop_schedule_rr, crop_schedule_ss, ensemble_average,
                  read_predictions, search_optimal_subset, write_predictions)

log = logging.getLogger("dermpipe")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_USAGE = 64

DEFAULT_DIMS = (450, 600)  # assumed image size when no image tree is given


class _Parser(argparse.ArgumentParser):
    """argparse with the conventional usage-error exit status."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _resolve_config(args) -> PipelineConfig:
    path = args.config or os.environ.get("DERMPIPE_CONFIG")
    return load_config(path) if path else PipelineConfig()


def _seed(args, fallback: int) -> int:
    return args.seed if args.seed is not None else fallback


# ---------------------------------------------------------------------------
# Subcommands. Each handler returns the --json summary dict.

def cmd_preprocess(args, cfg: PipelineConfig) -> dict:
    pre = cfg.preprocess
    settings = PreprocessSettings(threshold=pre.threshold, minkowski_p=pre.p,
                                  target=pre.target, inset=pre.inset,
                                  ratio_threshold=pre.ratio_threshold)
    rows = preprocess_tree(args.input, args.output, settings, jobs=args.jobs)
    report_path = Path(args.report) if args.report else Path(args.output) / "crop_report.csv"
    write_crop_reports(report_path, rows)
    cropped = sum(r.cropped for _, r in rows)
    degenerate = sum(r.warn_degenerate for _, r in rows)
    log.info("preprocessed %d images (%d cropped, %d degenerate)",
             len(rows), cropped, degenerate)
    return {"command": "preprocess", "images": len(rows), "cropped": cropped,
            "degenerate": degenerate, "report": str(report_path)}


def cmd_split_folds(args, cfg: PipelineConfig) -> dict:
    rows = read_manifest(args.manifest)
    assignment = split_folds(rows, m=cfg.folds.m, seed=_seed(args, cfg.folds.seed))
    write_folds(args.out, assignment)
    log.info("assigned %d images to %d folds", len(assignment), cfg.folds.m)
    return {"command": "split-folds", "images": len(assignment),
            "folds": cfg.folds.m, "out": str(args.out)}


def cmd_weights(args, cfg: PipelineConfig) -> dict:
    rows = load_manifests(args.manifest, args.external)
    k = args.k if args.k is not None else cfg.loss.k
    wts = class_weights(class_counts(rows), k)
    write_weights(args.out, wts)
    return {"command": "weights", "k": k, "classes": len(wts), "out": str(args.out)}


def cmd_train_head(args, cfg: PipelineConfig) -> dict:
    rows = load_manifests(args.manifest, args.external)
    assignment = read_folds(args.folds)
    train_rows, val_rows = assemble_training_set(assignment, rows, args.fold)
    wts = class_weights(class_counts(train_rows), cfg.loss.k)
    store = FeatureStore.load(args.features)
    if cfg.head.f and cfg.head.f != store.feature_dim:
        raise PipelineError(f"[head] f={cfg.head.f} but the feature store "
                            f"holds {store.feature_dim}-dim vectors")
    tc = TrainConfig(
        epochs=args.epochs if args.epochs is not None else cfg.head.epochs,
        learning_rate=args.lr if args.lr is not None else cfg.head.learning_rate,
        batch_size=cfg.head.batch_size,
        dropout_p=cfg.head.dropout_p,
        meta_dropout_p=cfg.head.meta_dropout_p,
        eval_every=cfg.head.eval_every,
        seed=_seed(args, cfg.head.seed),
    )
    log.info("fold %d: %d train / %d val images, %d epochs",
             args.fold, len(train_rows), len(val_rows), tc.epochs)
    result = train_head(store, train_rows, val_rows, wts, tc,
                        hidden=cfg.head.h, fused=cfg.head.d)
    out_dir = Path(args.out_dir)
    best_path = out_dir / f"fold{args.fold}_best.ckpt"
    last_path = out_dir / f"fold{args.fold}_last.ckpt"
    hist_path = out_dir / f"fold{args.fold}_history.csv"
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(best_path, result.best, extra={
        "fold": args.fold, "kind": "best", "epoch": result.best_epoch,
        "val_mean_sensitivity": result.best_sensitivity})
    save_checkpoint(last_path, result.last, extra={
        "fold": args.fold, "kind": "last", "epoch": tc.epochs})
    write_history(hist_path, result.history)
    log.info("fold %d: best val S %.4f at epoch %d",
             args.fold, result.best_sensitivity, result.best_epoch)
    return {"command": "train-head", "fold": args.fold,
            "best_epoch": result.best_epoch,
            "best_val_sensitivity": result.best_sensitivity,
            "best": str(best_path), "last": str(last_path),
            "history": str(hist_path)}


def _image_dims(images_dir: Path | None, image: str) -> tuple[int, int]:
    if images_dir is None:
        return DEFAULT_DIMS
    with Image.open(images_dir / f"{image}.png") as im:
        w, h = im.size
    return h, w


def cmd_predict(args, cfg: PipelineConfig) -> dict:
    # source tag is irrelevant here; "external" admits every label incl. UNK
    rows = read_manifest(args.manifest, source="external")
    if (args.folds is None) != (args.fold is None):
        raise PipelineError("--folds and --fold must be given together")
    if args.folds is not None:
        assignment = read_folds(args.folds)
        rows = [r for r in rows if assignment.get(r.image) == args.fold]
        if not rows:
            raise PipelineError(f"fold {args.fold} selects no images")
    store = FeatureStore.load(args.features)
    missing = sorted(r.image for r in rows if r.image not in store)
    if missing:
        raise MissingFeatures(f"no features for {len(missing)} images: {missing[:5]}")
    params, _ = load_checkpoint(args.checkpoint)
    if head_dims(params)[0] != store.feature_dim:
        raise PipelineError(f"checkpoint expects {head_dims(params)[0]}-dim features, "
                            f"store holds {store.feature_dim}")
    mode = args.mode or cfg.tta.mode
    images_dir = Path(args.images) if args.images else None
    scales = rr_scales(cfg)
    reps = store.replicates

    def predict_one(row) -> tuple[str, np.ndarray]:
        dims = _image_dims(images_dir, row.image)
        if mode == "ss":
            schedule = crop_schedule_ss(dims, cfg.tta.crop)
        else:
            schedule = crop_schedule_rr(dims, cfg.tta.input_size, scales)
        # each view stands on one precomputed feature replicate, cycling
        feats = store.get(row.image)[[v % reps for v in range(len(schedule))]]
        meta = np.tile(encode_meta(row.meta), (len(schedule), 1))
        per_view = predict_proba(params, feats.astype(np.float64), meta)
        return row.image, aggregate_predictions(per_view)

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = dict(pool.map(predict_one, rows))
    else:
        results = dict(predict_one(r) for r in rows)
    ids = sorted(results)
    pm = PredictionMatrix(ids, np.stack([results[i] for i in ids]))
    write_predictions(args.out, pm)
    views = 36 if mode == "ss" else 4 * len(scales)
    log.info("predicted %d images with %d %s views each", len(ids), views, mode)
    return {"command": "predict", "images": len(ids), "mode": mode,
            "views": views, "out": str(args.out)}


def _load_configuration(path: Path) -> Configuration:
    def folds_of(prefix: str):
        out = {}
        for f in sorted(path.glob(f"{prefix}*.csv")):
            try:
                fold = int(f.stem.removeprefix(prefix))
            except ValueError:
                raise PipelineError(f"{f}: cannot parse fold index") from None
            out[fold] = read_predictions(f)
        return out

    val = folds_of("val_fold")
    if not val:
        raise PipelineError(f"{path}: no val_fold*.csv prediction files")
    test = folds_of("test_fold") or None
    if test is not None and sorted(test) != sorted(val):
        raise PipelineError(f"{path}: test folds {sorted(test)} do not match "
                            f"validation folds {sorted(val)}")
    return Configuration(name=path.name, val_folds=val, test_folds=test)


def cmd_ensemble_search(args, cfg: PipelineConfig) -> dict:
    cfgs = [_load_configuration(Path(d)) for d in args.configs]
    rows = read_manifest(args.manifest)
    labels = {r.image: r.label for r in rows}
    scoring = args.scoring or cfg.ensemble.scoring
    result = search_optimal_subset(cfgs, labels, guard=cfg.ensemble.guard,
                                   scoring=scoring,
                                   collect_scores=args.per_subset_scores)
    payload = {"subset": list(result.names), "S_star": result.score}
    if result.per_subset_scores is not None:
        payload["per_subset_scores"] = result.per_subset_scores
    with atomic_write(args.out, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if args.val_out:
        write_predictions(args.val_out,
                          ensemble_average(result.subset, cfgs, "validation"))
    if args.test_out:
        write_predictions(args.test_out,
                          ensemble_average(result.subset, cfgs, "test"))
    log.info("best subset %s with S*=%.4f over %d configurations",
             "+".join(result.names), result.score, len(cfgs))
    return {"command": "ensemble-search", "configurations": len(cfgs),
            "subset": list(result.names), "S_star": result.score,
            "scoring": scoring, "out": str(args.out)}


def _read_truth(path) -> dict[str, str]:
    """image -> label from any CSV carrying at least those two columns."""
    out: dict[str, str] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        have = set(reader.fieldnames or [])
        if not {"image", "label"} <= have:
            raise PipelineError(f"{path}: truth file needs image and label columns")
        for rec in reader:
            image = rec["image"].strip()
            label = rec["label"].strip()
            if label not in CLASSES:
                raise PipelineError(f"{path}: image {image} has unknown label {label!r}")
            out[image] = label
    return out


def cmd_evaluate(args, cfg: PipelineConfig) -> dict:
    pm = read_predictions(args.pred)
    truth = _read_truth(args.truth)
    missing = [i for i in pm.ids if i not in truth]
    if missing:
        raise PipelineError(f"no truth labels for images {missing[:5]}")
    y = np.array([CLASS_INDEX[truth[i]] for i in pm.ids])
    s = mean_sensitivity(confusion(pm.probs, y))
    report = per_class_metrics(pm.probs, y, floor=args.floor)
    out_dir = Path(args.out_dir) if args.out_dir else Path(args.pred).parent
    report_path = out_dir / "class_report.csv"
    summary_path = out_dir / "summary.json"
    out_dir.mkdir(parents=True, exist_ok=True)
    write_class_report(report_path, report, auc_s_raw=args.auc_s_raw)
    write_summary(summary_path, s, report)
    log.info("mean sensitivity %.4f over %d images", s, len(pm.ids))
    return {"command": "evaluate", "images": len(pm.ids), "mean_sensitivity": s,
            "report": str(report_path), "summary": str(summary_path)}


def cmd_synth(args, cfg: PipelineConfig) -> dict:
    stats = generate_corpus(
        args.out, n_images=args.images, n_classes=args.classes,
        seed=_seed(args, 0), feature_dim=args.feature_dim,
        replicates=args.replicates, missing_rate=args.missing_rate,
        separation=args.separation, render_images=not args.no_render)
    log.info("wrote %d images (%d lesions) under %s",
             stats["images"], stats["lesions"], args.out)
    return {"command": "synth", "out": str(args.out), **stats}


# ---------------------------------------------------------------------------
# Parser assembly.

def build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="config file (also env DERMPIPE_CONFIG)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--jobs", type=int, default=1, help="worker pool width")
    common.add_argument("--json", action="store_true",
                        help="print a one-line JSON summary to stdout")

    parser = _Parser(prog="dermpipe",
                     description="skin lesion classification pipeline")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("preprocess", parents=[common],
                       help="crop, color-correct and resize an image tree")
    p.add_argument("--input", required=True, help="input image directory")
    p.add_argument("--output", required=True, help="output directory (mirror tree)")
    p.add_argument("--report", help="crop report CSV (default <output>/crop_report.csv)")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("split-folds", parents=[common],
                       help="assign main-set images to cross-validation folds")
    p.add_argument("--manifest", required=True, help="main manifest CSV")
    p.add_argument("--out", required=True, help="fold assignment CSV")
    p.set_defaults(func=cmd_split_folds)

    p = sub.add_parser("weights", parents=[common],
                       help="compute class balancing loss weights")
    p.add_argument("--manifest", required=True, help="main manifest CSV")
    p.add_argument("--external", help="external manifest CSV")
    p.add_argument("--k", type=float, help="balancing exponent (overrides config)")
    p.add_argument("--out", required=True, help="weights CSV")
    p.set_defaults(func=cmd_weights)

    p = sub.add_parser("train-head", parents=[common],
                       help="train the fusion head on one fold")
    p.add_argument("--manifest", required=True, help="main manifest CSV")
    p.add_argument("--external", help="external manifest CSV")
    p.add_argument("--features", required=True, help="feature store file")
    p.add_argument("--folds", required=True, help="fold assignment CSV")
    p.add_argument("--fold", type=int, required=True, help="validation fold index")
    p.add_argument("--epochs", type=int, help="override [head] epochs")
    p.add_argument("--lr", type=float, help="override [head] learning_rate")
    p.add_argument("--out-dir", required=True, help="checkpoint/history directory")
    p.set_defaults(func=cmd_train_head)

    p = sub.add_parser("predict", parents=[common],
                       help="predict with test-time augmentation")
    p.add_argument("--manifest", required=True, help="manifest of images to predict")
    p.add_argument("--features", required=True, help="feature store file")
    p.add_argument("--checkpoint", required=True, help="trained head checkpoint")
    p.add_argument("--folds", help="fold assignment CSV (restricts to one fold)")
    p.add_argument("--fold", type=int, help="fold index selected from --folds")
    p.add_argument("--images", help="preprocessed image directory (for crop geometry)")
    p.add_argument("--mode", choices=("ss", "rr"), help="TTA schedule (overrides config)")
    p.add_argument("--out", required=True, help="prediction CSV")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ensemble-search", parents=[common],
                       help="exhaustive configuration subset search")
    p.add_argument("--configs", nargs="+", required=True,
                   help="configuration directories holding val_fold<j>.csv files")
    p.add_argument("--manifest", required=True, help="main manifest CSV (labels)")
    p.add_argument("--scoring", choices=("pooled", "perfold"),
                   help="subset scoring rule (overrides config)")
    p.add_argument("--per-subset-scores", action="store_true",
                   help="include every subset's score in the report")
    p.add_argument("--out", required=True, help="search report JSON")
    p.add_argument("--val-out", help="pooled validation predictions of the best subset")
    p.add_argument("--test-out", help="test predictions of the best subset")
    p.set_defaults(func=cmd_ensemble_search)

    p = sub.add_parser("evaluate", parents=[common],
                       help="challenge metrics for a prediction file")
    p.add_argument("--pred", required=True, help="prediction CSV")
    p.add_argument("--truth", required=True, help="CSV with image and label columns")
    p.add_argument("--floor", type=float, default=0.8,
                   help="sensitivity floor for AUC-S")
    p.add_argument("--auc-s-raw", action="store_true",
                   help="add the unnormalized AUC-S column")
    p.add_argument("--out-dir", help="report directory (default: beside --pred)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", parents=[common],
                       help="generate a deterministic synthetic corpus")
    p.add_argument("--out", required=True, help="corpus directory")
    p.add_argument("--images", type=int, default=200)
    p.add_argument("--classes", type=int, default=9)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--replicates", type=int, default=4)
    p.add_argument("--missing-rate", type=float, default=0.3)
    p.add_argument("--separation", type=float, default=6.0)
    p.add_argument("--no-render", action="store_true",
                   help="skip PNG rendering, keep manifests and features")
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        summary = args.func(args, cfg)
    except (PipelineError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO
    if args.json:
        print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
