#!/usr/bin/env python3
#
# Image files: 8-bit PNG (RGB or grayscale) through Pillow, and raw float
# sidecars (little-endian float32, row-major) for bit-exact values
#
from pycoalition.autodiff.tensor import Tensor
from pycoalition.util.files import atomic_write
from PIL import Image, UnidentifiedImageError
import io
import os
import logging
import numpy as np

RAW_EXTENSION = ".f32"


def _to_uint8(values: np.ndarray) -> np.ndarray:
    if values.dtype == bool:
        return values.astype(np.uint8) * 255
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(path: str, image: Tensor | np.ndarray) -> str:
    """
    Save (H, W) grayscale or (3, H, W) RGB values in [0, 1]. Paths ending in
    .f32 get the raw float sidecar format, everything else is written as PNG.
    """
    values = image.data if isinstance(image, Tensor) else np.asarray(image)
    path = str(path)

    if path.endswith(RAW_EXTENSION):
        payload = np.ascontiguousarray(values, dtype="<f4").tobytes()
    else:
        if values.ndim == 3 and values.shape[0] == 3:
            picture = Image.fromarray(np.ascontiguousarray(_to_uint8(values).transpose(1, 2, 0)))
        elif values.ndim == 2:
            picture = Image.fromarray(_to_uint8(values))
        else:
            raise ValueError(f"cannot save image of shape {values.shape} (need (H, W) or (3, H, W))")
        buffer = io.BytesIO()
        picture.save(buffer, format="PNG")
        payload = buffer.getvalue()

    written = atomic_write(path, payload)
    logging.getLogger("pycoalition.pipeline.io").debug(f"image written: {written}")
    return written


def load_image(path: str, shape: tuple | None = None) -> Tensor:
    """
    Load a PNG (-> (H, W) or (3, H, W) in [0, 1]) or a raw .f32 sidecar.
    Raw sidecars carry no header: pass `shape`, or a square 2-D shape is assumed.
    """
    path = str(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"image not found: {path}")

    if path.endswith(RAW_EXTENSION):
        values = np.fromfile(path, dtype="<f4").astype(np.float32)
        if shape is None:
            side = int(round(np.sqrt(values.size)))
            if side * side != values.size:
                raise ValueError(f"raw image {path} has {values.size} values, pass its shape")
            shape = (side, side)
        if int(np.prod(shape)) != values.size:
            raise ValueError(f"raw image {path} has {values.size} values, not {tuple(shape)}")
        return Tensor(values.reshape(shape))

    try:
        picture = Image.open(path)
        picture.load()
    except (UnidentifiedImageError, OSError) as e:
        raise ValueError(f"unreadable image {path}: {e}") from e

    if picture.mode in ("1", "L"):
        values = np.asarray(picture.convert("L"), dtype=np.float32) / 255.0
    elif picture.mode in ("RGB", "RGBA", "P"):
        values = np.asarray(picture.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0
    else:
        raise ValueError(f"unsupported image mode {picture.mode} in {path} (8-bit grayscale or RGB only)")

    return Tensor(np.ascontiguousarray(values))
