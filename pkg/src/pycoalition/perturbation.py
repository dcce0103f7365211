#!/usr/bin/env python3
#
# Perturbation mask optimization guided by feature coalitions
#
# The mask p (per-pixel deletion strength) is grown as large as possible
# (mask loss), while a hinge on softmax confidences keeps the predicted class
# on top (confidence loss), and a Gaussian-smoothed coverage term over the
# coalitions (consistency loss) rewards coherent deletion. The saliency map is
# what could not be deleted: M_t = 1 - p.
#
from pycoalition.autodiff.tensor import Tensor, ComputationRecord, backward
from pycoalition.autodiff import functional as F
from pycoalition.network import Network, predict
from pycoalition.coalition import CoalitionSet
from pycoalition.util.types import PerturbMode, Baseline, HingeSign, NormMode
from pycoalition.util.image_io import save_image
from pycoalition.util.files import atomic_write
from dataclasses import dataclass, field
import io
import csv
import math
import time
import logging
import numpy as np


@dataclass
class PerturbationConfig:
    """
    Loss weights, smoothing and optimizer settings for mask optimization
    """

    mu: float = 100.0  # confidence loss weight
    v: float = 1.0  # consistency loss weight
    sigma: float = 1.0  # Gaussian kernel standard deviation (pixels)
    steps: int = 300  # gradient descent steps
    lr: float = 0.1  # step size on the latent field
    a_samples: int = 1  # draws of the perturbation strength a ~ U[0, 1] per step
    mode: PerturbMode = PerturbMode.MASK_BLEND
    hinge: HingeSign = HingeSign.PRESERVE
    baseline: Baseline = Baseline.ZEROS
    blur_sigma: float = 2.0  # only used by the blur baseline
    feasibility: bool = True  # scale the final mask toward 0 until t survives at a = 1
    seed: int = 0

    def __post_init__(self) -> None:
        self.mode = PerturbMode(self.mode)
        self.hinge = HingeSign(self.hinge)
        self.baseline = Baseline(self.baseline)
        assert self.mu >= 0 and self.v >= 0, "loss weights must be non-negative"
        assert self.sigma > 0 and self.blur_sigma > 0, "Gaussian sigma must be positive"
        assert int(self.steps) >= 1, "need at least one step"
        assert int(self.a_samples) >= 1, "need at least one sample of a per step"


@dataclass
class SaliencyMap:
    """
    Per-pixel importance in [0, 1], (H, W)
    """

    values: np.ndarray

    @classmethod
    def from_mask(cls, p: np.ndarray) -> "SaliencyMap":
        return cls(values=(1.0 - np.asarray(p, dtype=np.float32)).astype(np.float32))

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def save(self, stem: str) -> tuple[str, str]:
        """
        8-bit grayscale PNG (round(255 * M)) plus a raw float32 sidecar
        """
        return save_image(f"{stem}.png", self.values), save_image(f"{stem}.f32", self.values)


@dataclass
class TraceRow:
    step: int
    mask: float  # L_r
    confidence: float  # L_conf (averaged over the step's draws of a)
    consistency: float  # L_c
    total: float  # L


@dataclass
class MaskResult:
    p: np.ndarray  # final mask (H, W), strictly inside (0, 1)
    saliency: SaliencyMap  # 1 - p
    label: int  # class t being explained
    trace: list[TraceRow] = field(default_factory=list)
    final_confidence_loss: float = 0.0  # L_conf of the final mask at full strength (a = 1)
    scale: float = 1.0  # factor the optimized mask was scaled by to keep t at a = 1
    seconds: float = 0.0


# =====================================================================================================================


def gaussian_kernel(sigma: float, normalize: bool = True) -> Tensor:
    """
    (2*ceil(3 sigma) + 1)^2 samples of exp(-(w^2 + h^2) / 2 sigma^2) / (2 pi sigma^2)
    at integer offsets, renormalized to sum to 1 unless normalize=False
    """
    assert sigma > 0, "sigma must be positive"
    radius = int(math.ceil(3.0 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    squared = offsets[:, None] ** 2 + offsets[None, :] ** 2
    kernel = np.exp(-squared / (2.0 * sigma * sigma)) / (2.0 * math.pi * sigma * sigma)
    if normalize:
        kernel = kernel / kernel.sum()
    return Tensor(kernel)


def smooth(field: Tensor, kernel: Tensor) -> Tensor:
    """
    Convolve a stack of 2-D fields (M, H, W) with a square kernel, reflect padding
    """
    radius = kernel.shape[0] // 2
    stacked = F.reshape(field, (field.shape[0], 1) + tuple(field.shape[1:]))
    padded = F.pad(stacked, [(0, 0), (0, 0), (radius, radius), (radius, radius)], mode="reflect")
    weight = Tensor(kernel.data.reshape((1, 1) + kernel.shape), dtype=field.dtype)
    out = F.conv2d(padded, weight)
    return F.reshape(out, field.shape)


def make_baseline(x: np.ndarray, baseline: Baseline | np.ndarray, blur_sigma: float = 2.0) -> np.ndarray:
    """
    Fill image for deleted pixels: zeros, a Gaussian blur of x, or a given array
    """
    if isinstance(baseline, np.ndarray):
        return baseline.astype(np.float32)
    baseline = Baseline(baseline)
    if baseline == Baseline.ZEROS:
        return np.zeros_like(x, dtype=np.float32)
    blurred = smooth(Tensor(np.asarray(x, dtype=np.float32)), gaussian_kernel(blur_sigma))
    return blurred.data.astype(np.float32)


def perturb_input(
    x: Tensor | np.ndarray,  # (3, H, W) image
    p: Tensor,  # (H, W) mask in [0, 1]
    a: float,  # perturbation strength in [0, 1]
    mode: PerturbMode = PerturbMode.MASK_BLEND,
    baseline: np.ndarray | Baseline = Baseline.ZEROS,  # fill image (mask_blend only)
) -> Tensor:
    """
    mask_blend: x * (1 - a p) + b * (a p)   additive: x + a p
    (p is broadcast across channels)
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    p = p if isinstance(p, Tensor) else Tensor(p)
    assert 0.0 <= a <= 1.0, f"perturbation strength {a} outside [0, 1]"
    if tuple(p.shape) != tuple(x.shape[1:]):
        raise ValueError(f"mask shape {p.shape} does not match image {x.shape}")

    scaled = a * p
    if PerturbMode(mode) == PerturbMode.ADDITIVE:
        return x + scaled

    fill = make_baseline(x.data, baseline)
    return x * (1.0 - scaled) + fill * scaled


def hinge_from_probabilities(probabilities: Tensor, t: int, sign: HingeSign = HingeSign.PRESERVE) -> Tensor:
    """
    max(0, max_{j != t} f_j - f_t) on a (K,) probability vector (the literal
    sign flips the margin)
    """
    others = [j for j in range(probabilities.shape[0]) if j != t]
    margin = F.max(probabilities[np.array(others)]) - probabilities[t]
    if HingeSign(sign) == HingeSign.LITERAL:
        margin = -margin
    return F.relu(margin)


def confidence_loss(
    net: Network,
    x: Tensor | np.ndarray,
    p: Tensor,
    t: int,
    a: float,
    mode: PerturbMode = PerturbMode.MASK_BLEND,
    baseline: np.ndarray | Baseline = Baseline.ZEROS,
    sign: HingeSign = HingeSign.PRESERVE,
) -> Tensor:
    """
    Hinge that is zero exactly when class t stays the strict argmax of the
    softmax output on the perturbed image
    """
    perturbed = perturb_input(x, p, a, mode, baseline)
    logits = net(F.reshape(perturbed, (1,) + tuple(perturbed.shape)))
    probabilities = F.reshape(F.softmax(logits, axis=1), (logits.shape[1],))
    return hinge_from_probabilities(probabilities, t, sign)


def mask_loss(p: Tensor) -> Tensor:
    """
    -||p||_1 (p is non-negative)
    """
    return -F.sum(p)


def consistency_loss(p: Tensor, coalitions: CoalitionSet | np.ndarray, sigma_or_kernel: float | Tensor = 1.0) -> Tensor:
    """
    sum_i -(1 / (W H)) sum_{w,h} ((p * C_i) conv G_sigma)(w, h), reflect padded
    """
    masks = coalitions.masks if isinstance(coalitions, CoalitionSet) else np.asarray(coalitions)
    kernel = sigma_or_kernel if isinstance(sigma_or_kernel, Tensor) else gaussian_kernel(float(sigma_or_kernel))
    if tuple(masks.shape[1:]) != tuple(p.shape):
        raise ValueError(f"coalition masks {masks.shape} do not match mask {p.shape}")

    h, w = p.shape
    restricted = p * masks.astype(p.dtype)  # (l', H, W)
    return -F.sum(smooth(restricted, kernel)) / float(w * h)


# =====================================================================================================================


# Bisection steps when scaling an infeasible final mask
FEASIBILITY_STEPS = 16


def restore_feasibility(
    net: Network,
    x: Tensor | np.ndarray,  # (3, H, W) image
    p: np.ndarray,  # optimized mask (H, W)
    t: int,  # class that has to stay the argmax
    mode: PerturbMode = PerturbMode.MASK_BLEND,
    baseline: np.ndarray | Baseline = Baseline.ZEROS,
    steps: int = FEASIBILITY_STEPS,
) -> tuple[np.ndarray, float]:
    """
    Largest s in (0, 1] (by bisection) for which s * p keeps t the argmax at
    full strength a = 1. Returns (s * p, s); a mask that already keeps t comes
    back unchanged with s = 1.
    """

    def kept(scale: float) -> bool:
        return confidence_loss(net, x, Tensor(scale * p), t, 1.0, mode, baseline).item() == 0.0

    if kept(1.0):
        return p, 1.0

    low, high = 0.0, 1.0
    for _ in range(int(steps)):
        middle = 0.5 * (low + high)
        if kept(middle):
            low = middle
        else:
            high = middle

    if low == 0.0:
        logging.getLogger("pycoalition.perturbation").warning(
            f"no scaled mask keeps class {t} at full strength, returning the optimized mask"
        )
        return p, 1.0
    return (low * p).astype(np.float32), low


def optimize_mask(
    net: Network,  # classifier being explained (used read-only, inference statistics)
    x: Tensor | np.ndarray,  # (3, H, W) image
    coalitions: CoalitionSet,  # partition from extract_coalitions()
    cfg: PerturbationConfig | None = None,
) -> MaskResult:
    """
    Minimize L = L_r + mu * L_conf + v * L_c over p = logistic(z), z starting
    at 0 (p = 0.5), by plain gradient descent on z. With the confidence term
    on (mu > 0, preserving hinge) and cfg.feasibility set, a final mask that
    loses t at a = 1 is scaled toward 0 by restore_feasibility().
    """
    logger = logging.getLogger("pycoalition.perturbation")
    cfg = cfg if cfg is not None else PerturbationConfig()

    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    image = Tensor(data)
    net.set_norm_mode(NormMode.EVAL)
    t = predict(net, data).label

    rng = np.random.default_rng(cfg.seed)
    kernel = gaussian_kernel(cfg.sigma)
    fill = make_baseline(data, cfg.baseline, cfg.blur_sigma)
    z = Tensor(np.zeros(data.shape[1:], dtype=np.float32), requires_grad=True)

    started = time.perf_counter()
    trace = []
    for step in range(int(cfg.steps)):
        strengths = rng.uniform(0.0, 1.0, size=int(cfg.a_samples))

        with ComputationRecord() as record:
            p = F.sigmoid(z)
            l_conf = confidence_loss(net, image, p, t, float(strengths[0]), cfg.mode, fill, cfg.hinge)
            for a in strengths[1:]:
                l_conf = l_conf + confidence_loss(net, image, p, t, float(a), cfg.mode, fill, cfg.hinge)
            l_conf = l_conf / float(len(strengths))
            l_r = mask_loss(p)
            l_c = consistency_loss(p, coalitions, kernel)
            total = l_r + cfg.mu * l_conf + cfg.v * l_c

        value = total.item()
        if not np.isfinite(value):
            raise FloatingPointError(f"mask optimization loss is {value} at step {step}")
        trace.append(TraceRow(step, l_r.item(), l_conf.item(), l_c.item(), value))

        backward(total, record)
        z.data -= np.float32(cfg.lr) * z.grad

    p_final = F.sigmoid(z.detach()).data.astype(np.float32)
    scale = 1.0
    if cfg.feasibility and cfg.mu > 0 and cfg.hinge == HingeSign.PRESERVE:
        p_final, scale = restore_feasibility(net, image, p_final, t, cfg.mode, fill)
    final_conf = confidence_loss(net, image, Tensor(p_final), t, 1.0, cfg.mode, fill, cfg.hinge).item()

    result = MaskResult(
        p=p_final,
        saliency=SaliencyMap.from_mask(p_final),
        label=t,
        trace=trace,
        final_confidence_loss=final_conf,
        scale=scale,
        seconds=time.perf_counter() - started,
    )
    logger.info(
        f"mask optimized for class {t} in {round(result.seconds, 2)} seconds "
        f"(mean p {float(p_final.mean()):.3f}, scale {scale:.4g}, final L_conf {final_conf:.4f})"
    )
    return result


def trace_csv(trace: list[TraceRow]) -> str:
    """
    Loss trace as CSV text: step, L_r, L_conf, L_c, L
    """
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["step", "L_r", "L_conf", "L_c", "L"])
    for row in trace:
        writer.writerow([row.step, repr(row.mask), repr(row.confidence), repr(row.consistency), repr(row.total)])
    return buffer.getvalue()


def save_trace(trace: list[TraceRow], path: str) -> str:
    return atomic_write(path, trace_csv(trace))
