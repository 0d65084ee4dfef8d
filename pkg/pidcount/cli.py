"""
Command-line interface
Subcommands: synth, augment, train, eval, count, baseline, report
"""

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from PIL import Image

from config.settings import PIDNetConfig, Settings
from pidcount.classical_baselines import METHODS, run_baseline
from pidcount.data_pipeline import (
    Sample,
    augment_dataset,
    load_dataset,
    load_images,
    resize,
    save_dataset,
    split,
    synth_blobs,
)
from pidcount.errors import ConfigurationError, DatasetLoadError
from pidcount.metrics import ImageMetrics, build_report, evaluate_image, gt_count
from pidcount.pidnet_model import Model, Variant, build_model
from pidcount.postproc_counting import binarize, count_objects, save_label_map
from pidcount.report_exporter import ReportExporter
from pidcount.run_config import RunConfig, parse_config, with_overrides
from pidcount.runner import EXIT_USAGE, run_command_execution
from pidcount.trainer import TrainingCurves, predict, train
from pidcount.utils import configure_logging, parallel_map

logger = logging.getLogger(__name__)

METHOD_NAMES = {Variant.PID: "pidnet", Variant.M1: "m1", Variant.M2: "m2", Variant.UNET: "unet"}
PRED_MASKS_DIR = "pred_masks"
LABELS_DIR = "labels"
OVERLAYS_DIR = "overlays"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value run-config file; flags override its values")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="per-image workers (overrides PIDCOUNT_THREADS)")

    parser = argparse.ArgumentParser(prog="pidcount", description="PID-Net cell segmentation and counting")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic blob dataset")
    p.add_argument("--n", dest="n_images", type=int)
    p.add_argument("--size", dest="image_size", type=int, help="side length (default 32)")
    p.add_argument("--counts", help="min:max blobs per image")
    p.add_argument("--noise", dest="noise_sigma", type=float)
    p.add_argument("--split", help="also write train/ val/ test/ with this ratio, e.g. 3:1:1")
    p.add_argument("--out", required=True)

    p = sub.add_parser("augment", parents=[common], help="write the 8x rotation/mirror expansion")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resize", dest="image_size", type=int)
    p.add_argument("--split", help="split originals with this ratio before augmenting")
    p.add_argument("--policy", dest="augment_policy", choices=("default", "paper", "all", "none"))

    p = sub.add_parser("train", parents=[common], help="train a model and keep the best checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=[v.value for v in Variant])
    p.add_argument("--width", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--momentum", type=float)
    p.add_argument("--size", dest="image_size", type=int)
    p.add_argument("--split", help="ratio used when <data> has no train/ and val/")
    p.add_argument("--policy", dest="augment_policy", choices=("default", "paper", "all", "none"))
    p.add_argument("--reduce-kernel", dest="reduce_kernel", type=int)
    p.add_argument("--down-kernel", dest="down_kernel", type=int)
    p.add_argument("--bottleneck-depth", dest="bottleneck_depth", type=int)

    for name, help_text in (("eval", "evaluate a checkpoint on a labelled dataset"),
                            ("count", "print per-image counts for a checkpoint")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=(name == "eval"))
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--size", dest="image_size", type=int)
        p.add_argument("--prob-threshold", dest="prob_threshold", type=float)
        p.add_argument("--min-area", dest="min_area", type=int)

    p = sub.add_parser("baseline", parents=[common], help="run a classical counting baseline")
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", dest="image_size", type=int)
    p.add_argument("--min-area", dest="min_area", type=int)
    p.add_argument("--hough-r-min", dest="hough_r_min", type=int)
    p.add_argument("--hough-r-max", dest="hough_r_max", type=int)
    p.add_argument("--hough-threshold", dest="hough_threshold", type=float)
    p.add_argument("--edge-threshold", dest="edge_threshold", type=float)
    p.add_argument("--watershed-sigma", dest="watershed_sigma", type=float)
    p.add_argument("--watershed-min-distance", dest="watershed_min_distance", type=int)
    p.add_argument("--dark-foreground", dest="foreground_bright", action="store_const", const=False)

    p = sub.add_parser("report", parents=[common], help="render curves, overlays and comparison tables")
    p.add_argument("--out", required=True)
    p.add_argument("--curves", help="curves.csv of a training run")
    p.add_argument("--eval", dest="eval_dir", help="output directory of eval or baseline")
    p.add_argument("--data", help="labelled dataset the evaluation ran on")
    p.add_argument("--compare", nargs="+", help="eval/baseline output directories to tabulate")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    keys = set(RunConfig.__dataclass_fields__)
    values = {k: v for k, v in vars(args).items() if k in keys and v is not None}
    values["command"] = args.command
    if getattr(args, "split", None):
        values["split_output"] = True
    return values


def _resized(samples: List[Sample], size: Optional[int]) -> List[Sample]:
    return [resize(s, size) for s in samples] if size else samples


def _write_split_csv(rows, path: Path):
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["id", "split"])
        writer.writerows(rows)


def cmd_synth(config: RunConfig):
    out = Path(config.out)
    size = config.image_size or PIDNetConfig.SYNTH_IMAGE_SIZE
    samples = synth_blobs(config.counts, size, config.n_images, config.seed, config.noise_sigma)
    save_dataset(samples, out)
    if config.split_output:
        parts = split(samples, config.split, config.seed, augment_policy="none")
        for name, part in parts.parts().items():
            save_dataset(part, out / name)
        _write_split_csv(parts.membership(), out / Settings.SPLIT_FILENAME)


def cmd_augment(config: RunConfig):
    out = Path(config.out)
    samples = _resized(load_dataset(config.data), config.image_size)
    if not config.split_output:
        save_dataset(augment_dataset(samples), out)
        return
    parts = split(samples, config.split, config.seed, config.augment_policy)
    for name, part in parts.parts().items():
        save_dataset(part, out / name)
    _write_split_csv(parts.membership(), out / Settings.SPLIT_FILENAME)


def cmd_train(config: RunConfig):
    data, out = Path(config.data), Path(config.out)
    if (data / "train").is_dir() and (data / "val").is_dir():
        train_set = _resized(load_dataset(data / "train"), config.image_size)
        val_set = _resized(load_dataset(data / "val"), config.image_size)
    else:
        samples = _resized(load_dataset(data), config.image_size)
        parts = split(samples, config.split, config.seed, config.augment_policy)
        _write_split_csv(parts.membership(), out / Settings.SPLIT_FILENAME)
        train_set, val_set = parts.train, parts.val

    channels = train_set[0].image.shape[2]
    if channels != config.in_channels:
        logger.info(f"[INFO] Data has {channels} channel(s), setting in_channels accordingly")
        config = with_overrides(config, in_channels=channels)
        config.write(out)

    model = build_model(config.model_config(), seed=config.seed)
    logger.info("[INFO] Model topology:\n" + model.topology_dump())
    best, curves = train(model, train_set, val_set, config.hyper_params())
    best.save(out / Settings.CHECKPOINT_FILENAME, epoch=curves.best_epoch + 1,
              val_iou=curves.val_iou[curves.best_epoch])
    curves.to_csv(out / Settings.CURVES_FILENAME)


def _write_masks(out: Path, sample_id: str, mask: np.ndarray, labels) -> None:
    (out / PRED_MASKS_DIR).mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(out / PRED_MASKS_DIR / f"{sample_id}.png")
    save_label_map(labels, out / LABELS_DIR / f"{sample_id}.png")


def _finish_evaluation(rows: List[ImageMetrics], out: Path, method: str):
    report = build_report(rows, method=method)
    ReportExporter.export_metrics(report, out)
    logger.info(
        f"[OK] {method}: dice {report.dice:.4f}, jaccard {report.jaccard:.4f}, "
        f"counting accuracy {report.counting_accuracy}, hausdorff {report.hausdorff_px:.3f} px"
    )


def cmd_eval(config: RunConfig):
    out = Path(config.out)
    model, _ = Model.load(config.ckpt)
    samples = _resized(load_dataset(config.data), config.image_size)
    probabilities = predict(model, samples, config.batch_size)
    postproc = config.postproc_params(samples[0].size[0])
    method = METHOD_NAMES[model.config.variant]

    def evaluate(index: int) -> ImageMetrics:
        sample, probs = samples[index], probabilities[index]
        count, labels, _ = count_objects(probs, postproc)
        prediction = binarize(probs, postproc.prob_threshold)
        _write_masks(out, sample.id, prediction, labels)
        n_gt = sample.count if sample.count is not None else gt_count(sample.mask)
        return evaluate_image(sample.id, prediction, sample.mask, count, n_gt, method=method)

    _finish_evaluation(parallel_map(evaluate, list(range(len(samples))), config.threads), out, method)


def cmd_count(config: RunConfig):
    model, _ = Model.load(config.ckpt)
    samples = _resized(load_images(config.data), config.image_size)
    probabilities = predict(model, samples, config.batch_size)
    postproc = config.postproc_params(samples[0].size[0])
    counts = parallel_map(lambda probs: count_objects(probs, postproc)[0], probabilities, config.threads)

    print("id,count")
    for sample, count in zip(samples, counts):
        print(f"{sample.id},{count}")
    if config.out:
        out = Path(config.out)
        with open(out / Settings.COUNTS_FILENAME, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["id", "count"])
            writer.writerows(zip((s.id for s in samples), counts))


def cmd_baseline(config: RunConfig):
    out = Path(config.out)
    samples = _resized(load_dataset(config.data), config.image_size)
    params = config.baseline_params(samples[0].size[0])

    def evaluate(sample: Sample) -> ImageMetrics:
        result = run_baseline(config.method, sample.image, params)
        _write_masks(out, sample.id, result.mask, result.labels)
        n_gt = sample.count if sample.count is not None else gt_count(sample.mask)
        return evaluate_image(sample.id, result.mask, sample.mask, result.count, n_gt, method=config.method)

    _finish_evaluation(parallel_map(evaluate, samples, config.threads), out, config.method)


def cmd_report(config: RunConfig, curves_path: Optional[str], eval_dir: Optional[str],
               compare: Optional[Sequence[str]]):
    out = Path(config.out)
    if not (curves_path or eval_dir or compare):
        raise ConfigurationError("report needs --curves, --eval with --data, or --compare")
    if curves_path:
        ReportExporter.plot_curves(TrainingCurves.from_csv(curves_path), out / "curves.png")
    if eval_dir:
        if not config.data:
            raise ConfigurationError("report --eval needs --data to draw overlays")
        for sample in load_dataset(config.data):
            mask_path = Path(eval_dir) / PRED_MASKS_DIR / f"{sample.id}.png"
            if not mask_path.exists():
                raise DatasetLoadError(f"No predicted mask for {sample.id} in {eval_dir}")
            with Image.open(mask_path) as img:
                prediction = np.asarray(img.convert("L")) >= 128
            ReportExporter.render_overlay(sample.image, sample.mask, prediction, out / OVERLAYS_DIR / f"{sample.id}.png")
    if compare:
        ReportExporter.export_comparison([ReportExporter.load_aggregate(Path(d)) for d in compare], out)


def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse arguments and execute one subcommand

    Returns:
        Exit code: 0 success, 1 usage or configuration error, 2 data error,
        3 numerical failure
    """
    parser = build_parser()
    try:
        args = parser.parse_args(list(sys.argv[1:] if argv is None else argv))
    except SystemExit as e:
        return 0 if e.code in (0, None) else EXIT_USAGE

    configure_logging(args.command)
    try:
        config = parse_config(args.config, _overrides(args))
    except ConfigurationError as e:
        logger.error(f"[ERROR] {e}")
        return EXIT_USAGE

    handlers = {
        "synth": lambda: cmd_synth(config),
        "augment": lambda: cmd_augment(config),
        "train": lambda: cmd_train(config),
        "eval": lambda: cmd_eval(config),
        "count": lambda: cmd_count(config),
        "baseline": lambda: cmd_baseline(config),
        "report": lambda: cmd_report(config, args.curves, args.eval_dir, args.compare),
    }
    out = Path(config.out) if config.out else None
    return run_command_execution(handlers[args.command], out, run_type=args.command, config=config)
