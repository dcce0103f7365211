#!/usr/bin/env python3
#
# Saliency scoring: top-fraction retention, average drop / percentage of
# increase / top-1 accuracy, insertion curves, the occlusion baseline, and the
# text report
#
from pycoalition.autodiff.tensor import Tensor
from pycoalition.autodiff import functional as F
from pycoalition.network import Network, predict
from pycoalition.perturbation import SaliencyMap, make_baseline
from pycoalition.util.types import Baseline, NormMode, SampleStatus
from pycoalition.util.files import atomic_write
from dataclasses import dataclass, field
import io
import os
import csv
import math
import logging
import numpy as np

# Default insertion grid 0.0, 0.1, ..., 1.0
DEFAULT_FRACTIONS = tuple(round(0.1 * i, 1) for i in range(11))


def _values(saliency: SaliencyMap | np.ndarray) -> np.ndarray:
    return saliency.values if isinstance(saliency, SaliencyMap) else np.asarray(saliency)


def top_fraction_mask(saliency: SaliencyMap | np.ndarray, fraction: float) -> np.ndarray:
    """
    Boolean (H, W) mask of the ceil(fraction * W * H) most salient pixels
    (ties go to the lower row-major index)
    """
    assert 0.0 <= fraction <= 1.0, f"fraction {fraction} outside [0, 1]"
    values = _values(saliency)
    n = values.size
    count = int(math.ceil(round(fraction * n, 9)))

    order = np.argsort(-values.reshape(-1), kind="stable")
    keep = np.zeros(n, dtype=bool)
    keep[order[:count]] = True
    return keep.reshape(values.shape)


def retain_top_fraction(
    saliency: SaliencyMap | np.ndarray,  # (H, W) importance
    x: np.ndarray,  # (3, H, W) image
    fraction: float,  # share of pixels kept
    baseline: Baseline | np.ndarray = Baseline.ZEROS,  # fill for dropped pixels
    blur_sigma: float = 2.0,  # width of the blur baseline
) -> np.ndarray:
    """
    Keep the top pixels (all channels jointly), replace the rest with the baseline
    """
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    keep = top_fraction_mask(saliency, fraction)
    if keep.shape != tuple(x.shape[1:]):
        raise ValueError(f"saliency shape {keep.shape} does not match image {x.shape}")
    fill = make_baseline(x, baseline, blur_sigma)
    return np.where(keep[None], x, fill)


# =====================================================================================================================


def average_drop(pairs: list[tuple[float, float]], clamp: bool = False) -> float:
    """
    (1/N) sum (f(x) - f(M)) / f(x) over (f(x), f(M)) pairs; clamp=True floors
    each term at 0
    """
    assert len(pairs) >= 1, "need at least one sample"
    total = 0.0
    for i, (before, after) in enumerate(pairs):
        if before == 0:
            raise ZeroDivisionError(f"sample {i} has zero confidence on the unmasked image")
        term = (before - after) / before
        total += max(0.0, term) if clamp else term
    return total / len(pairs)


def percent_increase(pairs: list[tuple[float, float]]) -> float:
    """
    Share of samples where confidence strictly rises on the masked image
    """
    assert len(pairs) >= 1, "need at least one sample"
    return sum(1 for before, after in pairs if before < after) / len(pairs)


def top1_accuracy(rows: list[tuple[int, int]]) -> float:
    """
    Share of (t, predicted class of the masked image) rows that agree
    """
    assert len(rows) >= 1, "need at least one sample"
    return sum(1 for t, predicted in rows if int(t) == int(predicted)) / len(rows)


@dataclass
class InsertionPoint:
    fraction: float
    confidence: float  # softmax confidence of t
    hit: bool  # t still the argmax


def insertion_curve(
    net: Network,
    x: np.ndarray,
    saliency: SaliencyMap | np.ndarray,
    fractions: tuple | list | None = None,
    baseline: Baseline | np.ndarray = Baseline.ZEROS,
    t: int | None = None,  # class to track (None = prediction on the unmasked image)
    blur_sigma: float = 2.0,
) -> list[InsertionPoint]:
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    fractions = DEFAULT_FRACTIONS if fractions is None else tuple(fractions)
    assert list(fractions) == sorted(fractions), "fractions must be ascending"

    t = predict(net, x).label if t is None else int(t)
    fill = make_baseline(x, baseline, blur_sigma)

    points = []
    for fraction in fractions:
        prediction = predict(net, retain_top_fraction(saliency, x, fraction, fill))
        points.append(InsertionPoint(float(fraction), float(prediction.probabilities[t]), prediction.label == t))
    return points


def occlusion_baseline(
    net: Network,
    x: np.ndarray,
    patch: int = 8,  # square patch side (pixels)
    stride: int = 4,  # patch step (pixels)
    baseline: Baseline | np.ndarray = Baseline.ZEROS,
    batch_size: int = 64,
    blur_sigma: float = 2.0,
) -> SaliencyMap:
    """
    Slide a baseline-filled patch over the image; each position scores
    f_t(x) - f_t(x occluded), pixels average the scores of the positions
    covering them, and the map is min-max normalized (a constant map becomes
    all zeros)

    Windows may hang over the border by up to patch - stride pixels (clipped
    to the image) so border pixels are covered as often as interior ones.
    Scores are taken in float64 as the gain of the other classes, so a
    softmax saturated at f_t = 1 still ranks the positions.
    """
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    _, h, w = x.shape
    assert 1 <= patch <= min(h, w), f"patch {patch} does not fit a {h}x{w} image"
    assert stride >= 1, "stride must be at least 1"

    net.set_norm_mode(NormMode.EVAL)
    reference = F.softmax(Tensor(net(Tensor(x[None])).data.astype(np.float64)), axis=1).data[0]
    t = int(np.argmax(reference))
    others = np.arange(reference.size) != t
    reference_rest = reference[others].sum()
    fill = make_baseline(x, baseline, blur_sigma)

    def positions(extent: int) -> list[int]:
        overhang = max(0, min(patch - stride, extent - patch))
        last = extent - patch + overhang
        starts = list(range(-overhang, last + 1, stride))
        if starts[-1] != last:
            starts.append(last)
        return starts

    def clip(r: int, c: int) -> tuple[slice, slice]:
        return slice(max(r, 0), min(r + patch, h)), slice(max(c, 0), min(c + patch, w))

    windows = [clip(r, c) for r in positions(h) for c in positions(w)]

    scores = []
    for start in range(0, len(windows), batch_size):
        chunk = windows[start : start + batch_size]
        batch = np.repeat(x[None], len(chunk), axis=0)
        for i, (rows, cols) in enumerate(chunk):
            batch[i, :, rows, cols] = fill[:, rows, cols]
        logits = net(Tensor(batch)).data.astype(np.float64)
        probs = F.softmax(Tensor(logits), axis=1).data
        # f_t(x) - f_t(occluded) as the gain of the other classes, exact for a saturated f_t
        scores.extend(probs[:, others].sum(axis=1) - reference_rest)

    total = np.zeros((h, w), dtype=np.float64)
    count = np.zeros((h, w), dtype=np.float64)
    for (rows, cols), score in zip(windows, scores):
        total[rows, cols] += score
        count[rows, cols] += 1
    importance = total / np.maximum(count, 1)

    low, high = importance.min(), importance.max()
    if high - low <= 0:
        normalized = np.zeros_like(importance)
    else:
        normalized = (importance - low) / (high - low)

    logging.getLogger("pycoalition.evaluation").debug(f"occlusion scanned {len(windows)} positions for class {t}")
    return SaliencyMap(values=normalized.astype(np.float32))


# =====================================================================================================================


@dataclass
class SampleRow:
    """
    One test image's scores at the configured retention
    """

    index: int
    true_label: int
    t: int = -1  # predicted class on the unmasked image
    confidence_before: float = 0.0  # f_t(x)
    confidence_after: float = 0.0  # f_t(retained image)
    predicted_after: int = -1
    coalitions: int = 0  # l' (0 for methods without coalitions)
    status: SampleStatus = SampleStatus.OK
    error: str = ""
    insertion: list[InsertionPoint] = field(default_factory=list)


def score_sample(
    net: Network,
    x: np.ndarray,
    saliency: SaliencyMap | np.ndarray,
    retention: float = 0.4,
    baseline: Baseline | np.ndarray = Baseline.ZEROS,
    fractions: tuple | list | None = None,
    blur_sigma: float = 2.0,
) -> SampleRow:
    """
    Confidence before / after retention plus the insertion curve, for one image
    """
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    before = predict(net, x)
    fill = make_baseline(x, baseline, blur_sigma)
    after = predict(net, retain_top_fraction(saliency, x, retention, fill))
    return SampleRow(
        index=-1,
        true_label=-1,
        t=before.label,
        confidence_before=before.confidence,
        confidence_after=float(after.probabilities[before.label]),
        predicted_after=after.label,
        insertion=insertion_curve(net, x, saliency, fractions, fill, t=before.label),
    )


@dataclass
class EvalReport:
    """
    Metrics over the successful samples of one method / seed / retention
    """

    method: str
    seed: int
    retention: float
    rows: list[SampleRow] = field(default_factory=list)
    clamp_ad: bool = False
    ad: float = float("nan")
    pi: float = float("nan")
    t1: float = float("nan")
    insertion: list[tuple[float, float, float]] = field(default_factory=list)  # (fraction, mean confidence, top-1)

    @property
    def ok_rows(self) -> list[SampleRow]:
        return [row for row in self.rows if row.status == SampleStatus.OK]

    @property
    def n(self) -> int:
        return len(self.ok_rows)

    @property
    def failed(self) -> int:
        return len(self.rows) - self.n

    @property
    def filename(self) -> str:
        return f"report_{self.method}_seed{self.seed}_ret{self.retention:g}.txt"

    @classmethod
    def from_rows(
        cls, method: str, seed: int, retention: float, rows: list[SampleRow], clamp_ad: bool = False
    ) -> "EvalReport":
        report = cls(method=str(method), seed=int(seed), retention=float(retention), rows=list(rows), clamp_ad=clamp_ad)
        ok = report.ok_rows
        if not ok:
            logging.getLogger("pycoalition.evaluation").warning(f"{method}: no successful samples to score")
            return report

        pairs = [(row.confidence_before, row.confidence_after) for row in ok]
        report.ad = average_drop(pairs, clamp=clamp_ad)
        report.pi = percent_increase(pairs)
        report.t1 = top1_accuracy([(row.t, row.predicted_after) for row in ok])

        curves = [row.insertion for row in ok if row.insertion]
        if curves:
            for i, point in enumerate(curves[0]):
                report.insertion.append(
                    (
                        point.fraction,
                        float(np.mean([curve[i].confidence for curve in curves])),
                        float(np.mean([curve[i].hit for curve in curves])),
                    )
                )
        return report

    # =================================================================================================================

    def to_text(self) -> str:
        """
        key: value header, then the per-sample CSV block, then the insertion CSV block
        """
        buffer = io.StringIO()
        for key, value in (
            ("method", self.method),
            ("seed", self.seed),
            ("retention", self.retention),
            ("N", self.n),
            ("failed", self.failed),
            ("clamp_ad", str(self.clamp_ad).lower()),
            ("AD", repr(self.ad)),
            ("PI", repr(self.pi)),
            ("T1", repr(self.t1)),
        ):
            buffer.write(f"{key}: {value}\n")

        writer = csv.writer(buffer, lineterminator="\n")
        buffer.write("\n[samples]\n")
        writer.writerow(
            [
                "index",
                "true_label",
                "t",
                "confidence_before",
                "confidence_after",
                "predicted_after",
                "coalitions",
                "status",
                "error",
            ]
        )
        for row in self.rows:
            writer.writerow(
                [
                    row.index,
                    row.true_label,
                    row.t,
                    repr(row.confidence_before),
                    repr(row.confidence_after),
                    row.predicted_after,
                    row.coalitions,
                    row.status.value,
                    row.error,
                ]
            )

        buffer.write("\n[insertion]\n")
        writer.writerow(["fraction", "confidence", "top1"])
        for fraction, confidence, top1 in self.insertion:
            writer.writerow([fraction, repr(confidence), repr(top1)])
        return buffer.getvalue()

    def save(self, directory: str) -> str:
        path = atomic_write(os.path.join(str(directory), self.filename), self.to_text())
        logging.getLogger("pycoalition.evaluation").info(f"report written: {path}")
        return path


def summary_table(reports: dict[str, EvalReport]) -> str:
    """
    Side-by-side AD / PI / T1 for several labelled reports
    """
    lines = [f"{'':<16} {'AD':>9} {'PI':>9} {'T1':>9} {'N':>5}"]
    for name, report in reports.items():
        lines.append(f"{name:<16} {report.ad:>9.4f} {report.pi:>9.4f} {report.t1:>9.4f} {report.n:>5d}")
    return "\n".join(lines) + "\n"
