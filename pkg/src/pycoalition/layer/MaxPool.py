#!/usr/bin/env python3
from pycoalition.layer.layer import Layer
from pycoalition.autodiff.tensor import Tensor
from pycoalition.autodiff import functional as F
from pycoalition.util.types import LayerKind
import numpy as np


class MaxPool(Layer):
    """
    Max pooling over square windows (stride defaults to the window size)
    """

    VERSION = "0.1.0"
    KIND = LayerKind.MAXPOOL
    REQUIRED = ("kernel_size",)

    def __init__(self, schema: dict, rng: np.random.Generator | None = None) -> None:
        schema = {"stride": schema.get("kernel_size"), **schema}
        super().__init__(schema, rng)
        self.kernel_size = int(schema["kernel_size"])
        self.stride = int(schema["stride"])
        assert self.kernel_size >= 1 and self.stride >= 1, "invalid pooling geometry"

    def forward(self, x: Tensor) -> Tensor:
        return F.max_pool2d(x, kernel=self.kernel_size, stride=self.stride)

    def output_shape(self, input_shape: tuple) -> tuple:
        self._expect_dims(input_shape, 3)
        c, h, w = input_shape
        if h < self.kernel_size:
            raise ValueError(f"maxpool window {self.kernel_size} larger than input height {h}")
        if w < self.kernel_size:
            raise ValueError(f"maxpool window {self.kernel_size} larger than input width {w}")
        return (c, (h - self.kernel_size) // self.stride + 1, (w - self.kernel_size) // self.stride + 1)
