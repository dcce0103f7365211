#!/usr/bin/env python3
from pycoalition.layer.layer import Layer
from pycoalition.autodiff.tensor import Tensor
from pycoalition.autodiff import functional as F
from pycoalition.util.types import LayerKind


class ReLU(Layer):
    """
    Rectified-linear activation
    """

    VERSION = "0.1.0"
    KIND = LayerKind.RELU

    def forward(self, x: Tensor) -> Tensor:
        return F.relu(x)

    def output_shape(self, input_shape: tuple) -> tuple:
        return tuple(input_shape)
