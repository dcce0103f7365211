#!/usr/bin/env python3
from pycoalition.layer.layer import Layer
from pycoalition.autodiff.tensor import Tensor
from pycoalition.autodiff import functional as F
from pycoalition.util.types import LayerKind
import numpy as np


class Flatten(Layer):
    """
    (N, C, H, W) -> (N, C*H*W)
    """

    VERSION = "0.1.0"
    KIND = LayerKind.FLATTEN

    def forward(self, x: Tensor) -> Tensor:
        return F.reshape(x, (x.shape[0], -1))

    def output_shape(self, input_shape: tuple) -> tuple:
        return (int(np.prod(input_shape)),)
