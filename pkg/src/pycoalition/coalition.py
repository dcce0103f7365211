#!/usr/bin/env python3
#
# Unsupervised extraction of correlated feature coalitions from one image
#
# The extraction network's per-pixel feature vectors are clustered by their
# own argmax: labels act as self-targets for a cross-entropy term, while an
# L1 penalty on spatial feature differences pulls neighbours together. Labels
# that no pixel selects any more simply die out, so the cluster count shrinks
# from l towards the requested minimum k.
#
from pycoalition.autodiff.tensor import Tensor, ComputationRecord, backward
from pycoalition.autodiff import functional as F
from pycoalition.network import ExtractionNet, clone_network
from pycoalition.layer import create_layer
from pycoalition.util.image_io import save_image
from pycoalition.util.files import atomic_write
from dataclasses import dataclass, field
import os
import time
import logging
import colorsys
import numpy as np


@dataclass
class LabelMap:
    """
    Per-pixel cluster labels (H, W), each in [0, cluster_count)
    """

    labels: np.ndarray
    cluster_count: int

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        assert self.labels.ndim == 2, f"label map must be 2-D, got shape {self.labels.shape}"
        assert self.labels.size == 0 or (
            self.labels.min() >= 0 and self.labels.max() < self.cluster_count
        ), "label values must lie in [0, cluster_count)"

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def distinct(self) -> int:
        return int(np.unique(self.labels).size)


@dataclass
class CoalitionSet:
    """
    Disjoint, non-empty binary masks (l', H, W) covering every pixel, plus
    where they came from
    """

    masks: np.ndarray
    label_map: LabelMap
    iterations: int = 0  # optimization steps taken (0 when built directly from labels)
    history: list = field(default_factory=list)  # (iteration, distinct labels) checkpoints
    losses: list = field(default_factory=list)  # L_t per iteration

    @property
    def count(self) -> int:
        """
        Number of coalitions l'
        """
        return int(self.masks.shape[0])

    def validate(self) -> None:
        """
        Partition check: every pixel in exactly one mask, no mask empty
        """
        coverage = self.masks.sum(axis=0)
        assert np.all(coverage == 1), "coalition masks must be disjoint and cover every pixel"
        assert np.all(self.masks.reshape(self.count, -1).any(axis=1)), "coalition masks must be non-empty"


# =====================================================================================================================


def assign_labels(r: Tensor | np.ndarray, size: tuple | None = None) -> LabelMap:
    """
    Label of each feature vector (rows of the (q, l) matrix r) = index of its
    maximum, lowest index on ties. `size` = (H, W) with H*W = q.
    """
    values = r.data if isinstance(r, Tensor) else np.asarray(r)
    if values.ndim != 2 or values.shape[1] < 2:
        raise ValueError(f"feature matrix must be (q, l) with l >= 2, got shape {values.shape}")

    q, cluster_count = values.shape
    size = (1, q) if size is None else tuple(size)
    if size[0] * size[1] != q:
        raise ValueError(f"label map size {size} does not hold {q} feature vectors")

    return LabelMap(labels=np.argmax(values, axis=1).reshape(size), cluster_count=cluster_count)


def feature_similarity_loss(r: Tensor, labels: LabelMap) -> Tensor:
    """
    -sum_n log softmax(r_n)[c_n], labels are constants (no gradient through argmax)
    """
    flat = labels.labels.reshape(-1)
    log_probs = F.log_softmax(r, axis=1)
    return -F.sum(F.getitem(log_probs, (np.arange(flat.size), flat)))


def continuity_loss(r: Tensor) -> Tensor:
    """
    L1 norm of forward differences of an (H, W, l) feature map along both
    spatial axes (open boundary, no wraparound)
    """
    assert r.ndim == 3, f"continuity loss expects (H, W, l), got {r.shape}"
    horizontal = r[:, 1:, :] - r[:, :-1, :]
    vertical = r[1:, :, :] - r[:-1, :, :]
    return F.sum(F.abs(horizontal)) + F.sum(F.abs(vertical))


def to_coalition_masks(labels: LabelMap) -> CoalitionSet:
    """
    One binary mask per distinct label (ascending label order)
    """
    present = np.unique(labels.labels)
    masks = labels.labels[None, :, :] == present[:, None, None]
    return CoalitionSet(masks=masks, label_map=labels)


# =====================================================================================================================


def _reseed_head(enet: ExtractionNet, seed: int) -> None:
    """
    Fresh parameters for the trailing 1x1 convolution + batch normalization
    """
    rng = np.random.default_rng(seed)
    for i in (len(enet.layers) - 2, len(enet.layers) - 1):
        fresh = create_layer(enet.layers[i].schema, rng)
        for target, source in zip(enet.layers[i].parameters(), fresh.parameters()):
            target.data = source.data


def extract_coalitions(
    image: Tensor | np.ndarray,  # (3, H, W) sample
    enet: ExtractionNet,  # reconfigured network (copied, the caller's instance is left untouched)
    lam: float = 1.0,  # continuity weight
    min_clusters: int = 4,  # stop once this many labels (or fewer) remain
    max_iters: int = 200,  # iteration budget
    lr: float = 0.1,  # gradient descent step size (per pixel)
    seed: int | None = None,  # re-initialize the feature head from this seed (None = keep as given)
    checkpoint_every: int = 10,  # label-count history spacing
    max_halvings: int = 10,  # retries at half the step when a step drops below min_clusters labels
) -> CoalitionSet:
    """
    Optimize the extraction network on one image with
    L_t = similarity + lam * continuity, until at most `min_clusters` distinct
    labels remain or the budget runs out. Returns the coalition masks of the
    final labeling (empty clusters dropped).

    Each step moves the parameters by lr / q times the gradient of L_t (q =
    H * W pixels), i.e. gradient descent on the per-pixel loss. A step that
    leaves fewer than `min_clusters` labels is undone and retried at half the
    size, and the smaller step is kept from then on.
    """
    logger = logging.getLogger("pycoalition.coalition")

    assert lam >= 0, "continuity weight must be non-negative"
    assert 2 <= min_clusters <= enet.cluster_count, f"need 2 <= k <= l, got k={min_clusters}, l={enet.cluster_count}"
    assert max_iters >= 0 and lr > 0 and max_halvings >= 0, "invalid optimization settings"

    data = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float32)
    if tuple(data.shape) != enet.input_shape:
        raise ValueError(f"image shape {tuple(data.shape)} does not match network input {enet.input_shape}")

    enet = clone_network(enet)
    if seed is not None:
        _reseed_head(enet, seed)

    params = enet.parameters()
    cluster_count = enet.cluster_count
    _, h, w = enet.input_shape
    x = Tensor(data[None])

    started = time.perf_counter()
    history, losses = [], []
    iteration, halvings = 0, 0
    step = float(lr) / (h * w)
    previous = None  # (parameter values, gradients) before the last step
    while True:
        with ComputationRecord() as record:
            features = F.transpose(F.reshape(enet(x), (cluster_count, h, w)), (1, 2, 0))
            r = F.reshape(features, (h * w, cluster_count))
            labels = assign_labels(r, (h, w))
            loss = feature_similarity_loss(r, labels)
            if lam > 0:
                loss = loss + lam * continuity_loss(features)

        value = loss.item()
        if not np.isfinite(value):
            raise FloatingPointError(f"extraction loss is {value} at iteration {iteration}")

        distinct = labels.distinct
        if distinct < min_clusters and previous is not None and halvings < max_halvings:
            # Overshot: redo the last step at half the size
            step /= 2.0
            halvings += 1
            for p, (values, grad) in zip(params, previous):
                p.data = values.copy()
                p.data -= np.float32(step) * grad
            logger.debug(f"iteration {iteration}: {distinct} labels, retrying at step {step:.3g}")
            continue

        losses.append(value)
        if iteration % checkpoint_every == 0:
            history.append((iteration, distinct))
        logger.debug(f"iteration {iteration}: L_t {value:.4f}, {distinct} labels")

        if distinct <= min_clusters or iteration >= max_iters:
            break

        backward(loss, record)
        previous = [(p.data.copy(), p.grad.copy()) for p in params]
        halvings = 0
        for p in params:
            p.data -= np.float32(step) * p.grad
        iteration += 1

    if not history or history[-1][0] != iteration:
        history.append((iteration, distinct))

    if distinct < 2:
        raise RuntimeError(f"coalition extraction collapsed to {distinct} label after {iteration} iterations")

    coalitions = to_coalition_masks(labels)
    coalitions.iterations = iteration
    coalitions.history = history
    coalitions.losses = losses
    coalitions.validate()

    logger.info(
        f"extracted {coalitions.count} coalitions in {iteration} iterations "
        f"({round(time.perf_counter() - started, 2)} seconds)"
    )
    return coalitions


def coalition_iou(coalitions: CoalitionSet, regions: list[np.ndarray]) -> float:
    """
    Mean over ground-truth regions of the best IoU any coalition achieves
    """
    scores = []
    for region in regions:
        region = np.asarray(region, dtype=bool)
        intersection = np.logical_and(coalitions.masks, region[None]).sum(axis=(1, 2))
        union = np.logical_or(coalitions.masks, region[None]).sum(axis=(1, 2))
        scores.append(float(np.max(intersection / np.maximum(union, 1))))
    return float(np.mean(scores))


# =====================================================================================================================


def label_colours(count: int) -> np.ndarray:
    """
    Fixed, well spread colours for label map rendering (golden-ratio hues)
    """
    hues = (np.arange(count) * 0.618033988749895) % 1.0
    return np.array([colorsys.hsv_to_rgb(hue, 0.75, 0.95) for hue in hues], dtype=np.float32)


def save_coalitions(coalitions: CoalitionSet, directory: str, meta: dict | None = None) -> str:
    """
    Write one 0/255 PNG per coalition mask, a colour-coded label map, and a
    manifest text file (l', iterations, label history, plus any `meta` such as
    k, lambda and seed)
    """
    directory = os.path.realpath(str(directory))
    os.makedirs(directory, exist_ok=True)

    for i, mask in enumerate(coalitions.masks):
        save_image(os.path.join(directory, f"coalition_{i:02d}.png"), mask)

    colours = label_colours(coalitions.count)
    index = np.argmax(coalitions.masks, axis=0)
    save_image(os.path.join(directory, "labels.png"), colours[index].transpose(2, 0, 1))

    lines = [f"coalitions: {coalitions.count}", f"iterations: {coalitions.iterations}"]
    for key, value in (meta or {}).items():
        lines.append(f"{key}: {value}")
    lines.append("history: " + " ".join(f"{it}:{n}" for it, n in coalitions.history))
    atomic_write(os.path.join(directory, "manifest.txt"), "\n".join(lines) + "\n")

    logging.getLogger("pycoalition.pipeline.io").debug(f"coalitions written: {directory}")
    return directory
