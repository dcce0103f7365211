#!/usr/bin/env python3
#
# Command-line front-end: each stage can be run on its own
#
#   pycoalition gen-data | train | extract | explain | occlusion | evaluate | insertion | ablate
#
# Any config key can be overridden by its dotted name, e.g. --perturbation.v 0
#
from pycoalition.dataset import generate_shapes_dataset
from pycoalition.network import build_classifier, default_architecture, train_classifier, save_checkpoint, predict
from pycoalition.network import reconfigure_for_extraction
from pycoalition.coalition import extract_coalitions, save_coalitions, coalition_iou
from pycoalition.perturbation import optimize_mask, save_trace
from pycoalition.evaluation import occlusion_baseline
from pycoalition.pipeline import (
    prepare_dataset,
    prepare_classifier,
    perturbation_config,
    run_pipeline,
    evaluate_methods,
    write_insertion_curves,
    ablate,
)
from pycoalition.util.config import RunConfig
from pycoalition.util.image_io import load_image
from pycoalition.util.types import Baseline, Method
from pycoalition.util.version import package_version
import os
import sys
import argparse
import logging
import numpy as np

COMMANDS = ("gen-data", "train", "extract", "explain", "occlusion", "evaluate", "insertion", "ablate")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pycoalition",
        description="Coalition-guided perturbation saliency for small convolutional classifiers",
        epilog="Config keys can be overridden by dotted name: " + ", ".join(f"--{k}" for k in RunConfig.keys()),
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="run configuration: YAML (.yaml, .yml) or [section] key = value text")
    parser.add_argument("--debug", action="store_true", help="verbose logging")
    parser.add_argument("--version", action="version", version=f"pycoalition {package_version()}")
    parser.add_argument("--index", type=int, default=0, help="test image index (extract, explain, occlusion)")
    parser.add_argument("--image", help="PNG image instead of a dataset test image (extract, explain, occlusion)")
    parser.add_argument(
        "--method",
        choices=["both"] + [m.value for m in Method],
        default="both",
        help="methods to run (evaluate, insertion)",
    )
    return parser


def parse_overrides(tokens: list[str]) -> list[tuple[str, str]]:
    """
    ["--a.b", "1", "--c.d=x"] -> [("a.b", "1"), ("c.d", "x")]
    """
    overrides = []
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if not token.startswith("--") or "." not in token:
            raise ValueError(f"unrecognized argument {token}")
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ValueError(f"missing value for {token}")
            value = tokens[i + 1]
            i += 2
        overrides.append((key, value))
    return overrides


def load_config(args: argparse.Namespace, overrides: list[tuple[str, str]]) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for key, value in overrides:
        cfg.set(key, value)
    return cfg


# =====================================================================================================================


def _single_image(cfg: RunConfig, args: argparse.Namespace) -> tuple[np.ndarray, str, list | None]:
    """
    Image to explain, a name for its output directory, and ground-truth
    regions when known
    """
    if args.image:
        return load_image(args.image).data, os.path.splitext(os.path.basename(args.image))[0], None

    dataset = prepare_dataset(cfg)
    if not 0 <= args.index < len(dataset.test_images):
        raise ValueError(f"test image index {args.index} outside [0, {len(dataset.test_images)})")
    mask = dataset.test_masks[args.index]
    return dataset.test_images[args.index], f"sample_{args.index:03d}", [mask, ~mask]


def _extract(cfg: RunConfig, net, x: np.ndarray, directory: str, regions: list | None):
    settings = cfg["extraction"]
    enet = reconfigure_for_extraction(net, cluster_count=settings["clusters"], seed=settings["seed"])
    coalitions = extract_coalitions(
        x,
        enet,
        lam=settings["lam"],
        min_clusters=settings["min_clusters"],
        max_iters=settings["max_iters"],
        lr=settings["lr"],
    )
    meta = {"k": settings["min_clusters"], "lambda": settings["lam"], "seed": settings["seed"]}
    if regions is not None:
        meta["iou"] = round(coalition_iou(coalitions, regions), 4)
    save_coalitions(coalitions, os.path.join(directory, "coalitions"), meta)
    return coalitions


def command_single(cfg: RunConfig, args: argparse.Namespace) -> int:
    """
    extract / explain / occlusion on one image
    """
    logger = logging.getLogger("pycoalition.cli")
    net = prepare_classifier(cfg)
    x, name, regions = _single_image(cfg, args)
    directory = os.path.join(cfg.output_directory, args.command, name)
    prediction = predict(net, x)
    logger.info(f"{name}: predicted class {prediction.label} (confidence {prediction.confidence:.4f})")

    if args.command == "extract":
        coalitions = _extract(cfg, net, x, directory, regions)
        logger.info(f"{coalitions.count} coalitions after {coalitions.iterations} iterations -> {directory}")
    elif args.command == "explain":
        coalitions = _extract(cfg, net, x, directory, regions)
        result = optimize_mask(net, x, coalitions, perturbation_config(cfg))
        result.saliency.save(os.path.join(directory, "saliency"))
        save_trace(result.trace, os.path.join(directory, "trace.csv"))
        logger.info(f"saliency for class {result.label} -> {directory}")
    else:
        settings = cfg["evaluation"]
        saliency = occlusion_baseline(
            net,
            x,
            patch=settings["patch"],
            stride=settings["stride"],
            baseline=Baseline(settings["baseline"]),
            blur_sigma=cfg.get("perturbation.blur_sigma"),
        )
        saliency.save(os.path.join(directory, "saliency"))
        logger.info(f"occlusion saliency -> {directory}")

    cfg.write_manifest(directory, {"command": args.command, "image": args.image or f"test[{args.index}]"})
    return 0


def main(argv: list[str] | None = None) -> int:
    args, rest = build_parser().parse_known_args(argv)

    # Logging configuration
    logging.basicConfig()
    logging.getLogger().setLevel(logging.DEBUG if args.debug else logging.INFO)
    if not args.debug:
        logging.getLogger("pycoalition.pipeline.io").setLevel(logging.INFO)
    logger = logging.getLogger("pycoalition.cli")

    try:
        cfg = load_config(args, parse_overrides(rest))
    except (ValueError, FileNotFoundError) as e:
        logger.error(f"configuration error: {e}")
        return 2

    os.makedirs(cfg.output_directory, exist_ok=True)
    try:
        if args.command == "gen-data":
            settings = cfg["dataset"]
            dataset = generate_shapes_dataset(n=settings["n"], size=settings["size"], seed=settings["seed"])
            dataset.save(cfg.resolve(settings["path"]))
            return 0

        if args.command == "train":
            dataset = prepare_dataset(cfg)
            architecture = default_architecture(
                input_shape=(3,) + dataset.size,
                num_classes=cfg.get("model.num_classes"),
                channels=tuple(cfg.get("model.channels")),
            )
            net = build_classifier(architecture, seed=cfg.get("training.seed"))
            net, report = train_classifier(net, dataset, **cfg["training"])
            save_checkpoint(net, cfg.resolve(cfg.get("model.checkpoint")))
            cfg.write_manifest(cfg.output_directory, {"command": "train", "test_accuracy": report.test_accuracy})
            return 0

        if args.command in ("extract", "explain", "occlusion"):
            return command_single(cfg, args)

        if args.command == "ablate":
            summary = ablate(cfg)
            failed = sum(r.failed for runs in summary["reports"].values() for r in runs)
            return 0 if failed == 0 else 1

        # evaluate / insertion
        if args.method == "both":
            reports = evaluate_methods(cfg)
        else:
            cfg.set("evaluation.method", args.method)
            reports = {args.method: run_pipeline(cfg)}
        if args.command == "insertion":
            for path in write_insertion_curves(reports, cfg.output_directory):
                logger.info(f"insertion curve written: {path}")
        return 0 if all(r.failed == 0 for r in reports.values()) else 1

    except (ValueError, RuntimeError, FloatingPointError, FileNotFoundError) as e:
        logger.error(f"{args.command} failed: {type(e).__name__}: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
