#!/usr/bin/env python3
#
# End-to-end orchestration: dataset and classifier preparation, then for every
# test image predict -> extract coalitions -> optimize the mask (or run the
# occlusion scan) -> score, with per-sample artifacts, a report and a manifest
#
from pycoalition.dataset import ShapesDataset, generate_shapes_dataset
from pycoalition.network import (
    Network,
    ExtractionNet,
    build_classifier,
    default_architecture,
    train_classifier,
    reconfigure_for_extraction,
    save_checkpoint,
    load_checkpoint,
    clone_network,
)
from pycoalition.coalition import extract_coalitions, save_coalitions
from pycoalition.perturbation import PerturbationConfig, optimize_mask, save_trace
from pycoalition.evaluation import EvalReport, SampleRow, occlusion_baseline, score_sample, summary_table
from pycoalition.util.config import RunConfig
from pycoalition.util.types import Method, Baseline, SampleStatus
from pycoalition.util.files import atomic_write
from threading import Thread
import os
import copy
import time
import queue
import logging
import numpy as np


def perturbation_config(cfg: RunConfig) -> PerturbationConfig:
    return PerturbationConfig(**cfg["perturbation"])


def prepare_dataset(cfg: RunConfig) -> ShapesDataset:
    """
    Load the configured dataset archive, generating (and saving) it first if missing
    """
    path = cfg.resolve(cfg.get("dataset.path"))
    if os.path.exists(path):
        return ShapesDataset.load(path)

    settings = cfg["dataset"]
    dataset = generate_shapes_dataset(n=settings["n"], size=settings["size"], seed=settings["seed"])
    dataset.save(path)
    return dataset


def prepare_classifier(cfg: RunConfig, dataset: ShapesDataset | None = None) -> Network:
    """
    Load the configured checkpoint, training (and saving) a classifier first if missing
    """
    logger = logging.getLogger("pycoalition.pipeline")
    path = cfg.resolve(cfg.get("model.checkpoint"))
    if os.path.exists(path):
        return load_checkpoint(path)

    logger.info(f"no checkpoint at {path}, training a classifier")
    dataset = dataset if dataset is not None else prepare_dataset(cfg)
    architecture = default_architecture(
        input_shape=(3,) + dataset.size,
        num_classes=cfg.get("model.num_classes"),
        channels=tuple(cfg.get("model.channels")),
    )
    net = build_classifier(architecture, seed=cfg.get("training.seed"))
    net, _ = train_classifier(net, dataset, **cfg["training"])
    save_checkpoint(net, path)
    return net


# =====================================================================================================================


class Pipeline:
    """
    Saliency + scoring over the test split of a dataset, fanned out over worker
    threads. Results are keyed by sample index, so the report does not depend on
    how samples were scheduled.
    """

    def __init__(
        self,
        cfg: RunConfig,  # resolved run configuration (read-only while running)
        net: Network,  # trained classifier
        dataset: ShapesDataset,  # images to explain (test split)
        directory: str | None = None,  # run output directory (None = <output root>/<method>)
    ) -> None:

        self.__logger = logging.getLogger("pycoalition.pipeline")
        self.__io_logger = logging.getLogger("pycoalition.pipeline.io")

        self.cfg = cfg
        self.net = net
        self.dataset = dataset
        self.method = Method(cfg.get("evaluation.method"))
        self.directory = os.path.realpath(
            directory if directory is not None else os.path.join(cfg.output_directory, self.method.value)
        )

        self.__perturbation = perturbation_config(cfg)
        self.__baseline = Baseline(cfg.get("evaluation.baseline"))
        self.__blur_sigma = float(cfg.get("perturbation.blur_sigma"))

    # =================================================================================================================

    def run(self, manifest_extra: dict | None = None) -> EvalReport:
        """
        Explain and score every selected test image, write the report and manifest
        """
        images, labels = self.dataset.test_images, self.dataset.test_labels
        limit = int(self.cfg.get("pipeline.max_samples"))
        indices = list(range(len(images) if limit <= 0 else min(limit, len(images))))
        workers = max(1, min(int(self.cfg.get("pipeline.workers")), len(indices)))

        self.__logger.info(
            f"{self.method.value}: explaining {len(indices)} test images with {workers} worker(s) -> {self.directory}"
        )
        os.makedirs(self.directory, exist_ok=True)

        tasks = queue.Queue()
        for i in indices:
            tasks.put(i)
        results = {}

        started = time.perf_counter()
        threads = [
            Thread(target=self.__worker_loop, args=(tasks, results), name=f"pycoalition-worker-{n}", daemon=True)
            for n in range(workers)
        ]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()

        rows = [results[i] for i in indices]
        for row, i in zip(rows, indices):
            row.index = i
            row.true_label = int(labels[i])

        report = EvalReport.from_rows(
            self.method.value,
            self.__perturbation.seed,
            self.cfg.get("evaluation.retention"),
            rows,
            clamp_ad=bool(self.cfg.get("evaluation.clamp_ad")),
        )
        report_path = report.save(self.directory)

        extra = {
            "method": self.method.value,
            "samples": len(rows),
            "failed": report.failed,
            "report": os.path.basename(report_path),
            "dataset_seed": int(self.dataset.seed),
        }
        extra.update(manifest_extra or {})
        self.cfg.write_manifest(self.directory, extra)

        self.__logger.info(
            f"{self.method.value}: AD {report.ad:.4f}, PI {report.pi:.4f}, T1 {report.t1:.4f} "
            f"over {report.n} sample(s), {report.failed} failed ({round(time.perf_counter() - started, 1)} seconds)"
        )
        return report

    def __worker_loop(self, tasks: queue.Queue, results: dict) -> None:
        """
        Worker thread: its own classifier copy (and extraction network), samples
        drawn from the shared queue until it is empty
        """
        net, enet, setup_error = None, None, None
        try:
            net = clone_network(self.net)
            if self.method == Method.COALITION:
                enet = reconfigure_for_extraction(
                    net, cluster_count=self.cfg.get("extraction.clusters"), seed=self.cfg.get("extraction.seed")
                )
        except Exception as e:
            setup_error = e
            self.__logger.warning(f"worker setup failed: {type(e).__name__}: {e}")

        while True:
            try:
                i = tasks.get_nowait()
            except queue.Empty:
                break

            try:
                if setup_error is not None:
                    raise setup_error
                results[i] = self.__process(i, net, enet)
            except Exception as e:
                self.__logger.warning(f"sample {i} failed: {type(e).__name__}: {e}")
                results[i] = SampleRow(
                    index=i, true_label=-1, status=SampleStatus.FAILED, error=f"{type(e).__name__}: {e}"
                )

            # Notify queue of a completed task
            tasks.task_done()

    def __process(self, i: int, net: Network, enet: ExtractionNet | None) -> SampleRow:
        x = self.dataset.test_images[i]
        sample_dir = os.path.join(self.directory, f"sample_{i:03d}")
        coalition_count = 0

        if self.method == Method.COALITION:
            settings = self.cfg["extraction"]
            coalitions = extract_coalitions(
                x,
                enet,
                lam=settings["lam"],
                min_clusters=settings["min_clusters"],
                max_iters=settings["max_iters"],
                lr=settings["lr"],
            )
            coalition_count = coalitions.count
            save_coalitions(
                coalitions,
                os.path.join(sample_dir, "coalitions"),
                {"k": settings["min_clusters"], "lambda": settings["lam"], "seed": settings["seed"]},
            )

            result = optimize_mask(net, x, coalitions, self.__perturbation)
            saliency = result.saliency
            save_trace(result.trace, os.path.join(sample_dir, "trace.csv"))
        else:
            settings = self.cfg["evaluation"]
            saliency = occlusion_baseline(
                net,
                x,
                patch=settings["patch"],
                stride=settings["stride"],
                baseline=self.__baseline,
                blur_sigma=self.__blur_sigma,
            )

        saliency.save(os.path.join(sample_dir, "saliency"))
        self.__io_logger.debug(f"sample {i} artifacts written: {sample_dir}")

        row = score_sample(
            net,
            x,
            saliency,
            retention=self.cfg.get("evaluation.retention"),
            baseline=self.__baseline,
            fractions=self.cfg.get("evaluation.fractions"),
            blur_sigma=self.__blur_sigma,
        )
        row.coalitions = coalition_count
        return row


def run_pipeline(
    cfg: RunConfig,
    net: Network | None = None,  # classifier (None = load or train per config)
    dataset: ShapesDataset | None = None,  # dataset (None = load or generate per config)
    directory: str | None = None,
    manifest_extra: dict | None = None,
) -> EvalReport:
    dataset = dataset if dataset is not None else prepare_dataset(cfg)
    net = net if net is not None else prepare_classifier(cfg, dataset)
    return Pipeline(cfg, net, dataset, directory).run(manifest_extra)


# =====================================================================================================================


def evaluate_methods(cfg: RunConfig, net: Network | None = None, dataset: ShapesDataset | None = None) -> dict:
    """
    Coalition-guided saliency and occlusion on the same images, with a
    side-by-side summary
    """
    dataset = dataset if dataset is not None else prepare_dataset(cfg)
    net = net if net is not None else prepare_classifier(cfg, dataset)

    reports = {}
    for method in Method:
        run_cfg = RunConfig(copy.deepcopy(cfg.sections))
        run_cfg.set("evaluation.method", method.value)
        reports[method.value] = run_pipeline(run_cfg, net, dataset)

    path = atomic_write(os.path.join(cfg.output_directory, "evaluate_summary.txt"), summary_table(reports))
    logging.getLogger("pycoalition.pipeline").info(f"comparison written: {path}")
    return reports


def write_insertion_curves(reports: dict, directory: str) -> list[str]:
    """
    Mean insertion curve per method as CSV (fraction, confidence, top1)
    """
    paths = []
    for name, report in reports.items():
        lines = ["fraction,confidence,top1"] + [f"{f},{c!r},{h!r}" for f, c, h in report.insertion]
        paths.append(atomic_write(os.path.join(str(directory), f"insertion_{name}.csv"), "\n".join(lines) + "\n"))
    return paths


def ablate(cfg: RunConfig, net: Network | None = None, dataset: ShapesDataset | None = None) -> dict:
    """
    Paired runs without (v = 0) and with the consistency loss, over every seed
    in pipeline.seeds; returns mean AD / T1 per arm and whether the consistency
    loss helped
    """
    logger = logging.getLogger("pycoalition.pipeline")
    dataset = dataset if dataset is not None else prepare_dataset(cfg)
    net = net if net is not None else prepare_classifier(cfg, dataset)

    weight = float(cfg.get("perturbation.v"))
    arms = {"without": 0.0, "with": weight if weight > 0 else 1.0}
    reports = {name: [] for name in arms}

    for seed in cfg.get("pipeline.seeds"):
        for name, v in arms.items():
            run_cfg = RunConfig(copy.deepcopy(cfg.sections))
            run_cfg.set("evaluation.method", Method.COALITION.value)
            run_cfg.set("perturbation.v", v)
            run_cfg.set("perturbation.seed", int(seed))
            directory = os.path.join(cfg.output_directory, "ablation", f"v{v:g}_seed{seed}")
            reports[name].append(
                run_pipeline(run_cfg, net, dataset, directory, {"ablation": {"arm": name, "v": v, "seed": int(seed)}})
            )

    summary = {
        name: {
            "AD": float(np.mean([r.ad for r in runs])),
            "PI": float(np.mean([r.pi for r in runs])),
            "T1": float(np.mean([r.t1 for r in runs])),
        }
        for name, runs in reports.items()
    }
    summary["directions"] = {
        "T1_with_ge_without": summary["with"]["T1"] >= summary["without"]["T1"],
        "AD_with_le_without": summary["with"]["AD"] <= summary["without"]["AD"],
    }

    lines = [f"{'':<16} {'AD':>9} {'PI':>9} {'T1':>9}"]
    for name in arms:
        row = summary[name]
        lines.append(f"{name + ' L_c':<16} {row['AD']:>9.4f} {row['PI']:>9.4f} {row['T1']:>9.4f}")
    for key, value in summary["directions"].items():
        lines.append(f"{key}: {str(value).lower()}")
    path = atomic_write(os.path.join(cfg.output_directory, "ablation", "summary.txt"), "\n".join(lines) + "\n")

    logger.info(f"ablation summary written: {path}")
    summary["reports"] = reports
    return summary
