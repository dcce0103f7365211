#!/usr/bin/env python3
#
# Synthetic datasets: single shapes on textured backgrounds (classification),
# and four-rectangle images with known regions (coalition recovery)
#
from dataclasses import dataclass
import os
import logging
import numpy as np

SHAPE_CLASSES = ("circle", "square", "triangle", "cross")

# Well separated colours for rectangle regions
RECTANGLE_PALETTE = np.array(
    [
        [0.90, 0.10, 0.10],
        [0.10, 0.80, 0.20],
        [0.15, 0.20, 0.90],
        [0.95, 0.90, 0.10],
        [0.80, 0.20, 0.90],
        [0.10, 0.90, 0.90],
    ],
    dtype=np.float32,
)


@dataclass
class ShapesDataset:
    """
    Images (N, 3, H, W) in [0, 1], labels (N,), ground-truth shape masks
    (N, H, W). The first `train_count` samples form the training split.
    """

    images: np.ndarray
    labels: np.ndarray
    masks: np.ndarray
    train_count: int
    seed: int = 0

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def class_names(self) -> tuple:
        return SHAPE_CLASSES

    @property
    def num_classes(self) -> int:
        return len(SHAPE_CLASSES)

    @property
    def size(self) -> tuple:
        return tuple(self.images.shape[2:])

    @property
    def train_images(self) -> np.ndarray:
        return self.images[: self.train_count]

    @property
    def train_labels(self) -> np.ndarray:
        return self.labels[: self.train_count]

    @property
    def train_masks(self) -> np.ndarray:
        return self.masks[: self.train_count]

    @property
    def test_images(self) -> np.ndarray:
        return self.images[self.train_count :]

    @property
    def test_labels(self) -> np.ndarray:
        return self.labels[self.train_count :]

    @property
    def test_masks(self) -> np.ndarray:
        return self.masks[self.train_count :]

    # =================================================================================================================

    def save(self, output: str) -> str:
        """
        Save to a compressed numpy archive
        """
        output = str(output).strip()
        if not output.endswith(".npz"):
            output = f"{output}.npz"
        output = os.path.realpath(output)
        os.makedirs(os.path.dirname(output), exist_ok=True)
        np.savez_compressed(
            output,
            images=self.images,
            labels=self.labels,
            masks=self.masks,
            train_count=self.train_count,
            seed=self.seed,
        )
        logging.getLogger("pycoalition.dataset").info(f"dataset saved: {output} ({len(self)} samples)")
        return output

    @classmethod
    def load(cls, path: str) -> "ShapesDataset":
        path = os.path.realpath(str(path))
        if not os.path.exists(path):
            raise FileNotFoundError(f"dataset not found: {path}")
        with np.load(path) as archive:
            return cls(
                images=archive["images"].astype(np.float32),
                labels=archive["labels"].astype(np.int64),
                masks=archive["masks"].astype(bool),
                train_count=int(archive["train_count"]),
                seed=int(archive["seed"]),
            )


# =====================================================================================================================


def _shape_mask(label: int, size: tuple, cx: float, cy: float, r: float) -> np.ndarray:
    h, w = size
    y, x = np.mgrid[0:h, 0:w].astype(np.float32)
    dx, dy = x - cx, y - cy

    name = SHAPE_CLASSES[label]
    if name == "circle":
        return dx * dx + dy * dy <= r * r
    if name == "square":
        half = 0.85 * r
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    if name == "triangle":
        # Apex on top, base of width 2r at the bottom
        return (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    # Cross: two bars of thickness 0.6r
    bar = 0.3 * r
    return ((np.abs(dx) <= r) & (np.abs(dy) <= bar)) | ((np.abs(dy) <= r) & (np.abs(dx) <= bar))


def generate_shapes_dataset(n: int = 500, size: int | tuple = 32, seed: int = 0) -> ShapesDataset:
    """
    One shape per image (class cycles with the index so both splits stay
    balanced), varying position, scale and colour, on low-amplitude noise over
    a dark background (a zero fill reads as background, not as a shape).
    Deterministic given seed; 80/20 train/test split by index.
    """
    h, w = (size, size) if isinstance(size, int) else tuple(size)
    assert n >= 8, "need at least 8 samples"
    assert h >= 16 and w >= 16, "images must be at least 16x16"

    rng = np.random.default_rng(seed)
    images = np.empty((n, 3, h, w), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    masks = np.empty((n, h, w), dtype=bool)

    for i in range(n):
        label = i % len(SHAPE_CLASSES)
        r = rng.uniform(0.18, 0.30) * min(h, w)
        cx = rng.uniform(r + 1, w - r - 2)
        cy = rng.uniform(r + 1, h - r - 2)
        mask = _shape_mask(label, (h, w), cx, cy, r)

        background = rng.uniform(0.0, 0.3, size=3).astype(np.float32)
        colour = rng.uniform(0.6, 1.0, size=3).astype(np.float32)
        texture = rng.normal(0.0, 0.04, size=(3, h, w)).astype(np.float32)

        image = np.where(mask[None], colour[:, None, None], background[:, None, None]) + texture
        images[i] = np.clip(image, 0.0, 1.0)
        labels[i] = label
        masks[i] = mask

    train_count = int(round(0.8 * n))
    logging.getLogger("pycoalition.dataset").debug(f"generated {n} shape images ({h}x{w}, seed {seed})")
    return ShapesDataset(images=images, labels=labels, masks=masks, train_count=train_count, seed=int(seed))


def rectangles_image(size: int = 32, seed: int = 0, noise: float = 0.0) -> tuple[np.ndarray, list[np.ndarray]]:
    """
    Image split into 4 axis-aligned rectangles of distinct colours by one
    vertical and one horizontal cut. Returns the (3, H, W) image and the 4
    boolean region masks.
    """
    rng = np.random.default_rng(seed)
    sx = int(rng.integers(int(0.3 * size), int(0.7 * size) + 1))
    sy = int(rng.integers(int(0.3 * size), int(0.7 * size) + 1))
    colours = RECTANGLE_PALETTE[rng.permutation(len(RECTANGLE_PALETTE))[:4]]

    y, x = np.mgrid[0:size, 0:size]
    regions = [
        (y < sy) & (x < sx),
        (y < sy) & (x >= sx),
        (y >= sy) & (x < sx),
        (y >= sy) & (x >= sx),
    ]

    image = np.zeros((3, size, size), dtype=np.float32)
    for region, colour in zip(regions, colours):
        image[:, region] = colour[:, None]
    if noise > 0:
        image = np.clip(image + rng.normal(0.0, noise, size=image.shape), 0.0, 1.0).astype(np.float32)

    return image, regions


def augment_batch(
    images: np.ndarray,  # (N, 3, H, W) training images
    masks: np.ndarray,  # (N, H, W) shape masks of the same images
    rng: np.random.Generator,
    erase: float = 0.5,  # chance of erasing background inside a random rectangle
) -> np.ndarray:
    """
    Training-time variation: random horizontal flips (every class is mirror
    symmetric), and background pixels inside a random rectangle set to zero.
    Shape pixels are never erased, so labels stay valid.
    """
    out = images.copy()
    n, _, h, w = out.shape

    flips = rng.uniform(size=n) < 0.5
    out[flips] = out[flips, :, :, ::-1]
    masks = np.where(flips[:, None, None], masks[:, :, ::-1], masks)

    for i in np.flatnonzero(rng.uniform(size=n) < erase):
        eh, ew = int(rng.integers(h // 4, h + 1)), int(rng.integers(w // 4, w + 1))
        top, left = int(rng.integers(0, h - eh + 1)), int(rng.integers(0, w - ew + 1))
        region = np.zeros((h, w), dtype=bool)
        region[top : top + eh, left : left + ew] = True
        out[i][:, region & ~masks[i]] = 0.0
    return out
