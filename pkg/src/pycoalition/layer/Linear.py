#!/usr/bin/env python3
from pycoalition.layer.layer import Layer
from pycoalition.autodiff.tensor import Tensor
from pycoalition.autodiff import functional as F
from pycoalition.util.types import LayerKind
import numpy as np
import logging


class Linear(Layer):
    """
    Fully connected layer on (N, in_features) input
    """

    VERSION = "0.1.0"
    KIND = LayerKind.LINEAR
    REQUIRED = ("in_features", "out_features")

    def __init__(self, schema: dict, rng: np.random.Generator | None = None) -> None:

        # Setup logger
        self._logger = logging.getLogger(__name__)

        schema = {"bias": True, **schema}
        super().__init__(schema, rng)

        self.in_features = int(schema["in_features"])
        self.out_features = int(schema["out_features"])
        assert self.in_features >= 1 and self.out_features >= 1, "feature counts must be positive"

        self.weight = self._uniform((self.out_features, self.in_features), self.in_features)
        self.bias = self._uniform((self.out_features,), self.in_features) if schema["bias"] else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)

    def output_shape(self, input_shape: tuple) -> tuple:
        self._expect_dims(input_shape, 1)
        if input_shape[0] != self.in_features:
            raise ValueError(f"linear expects {self.in_features} input features, got {input_shape[0]}")
        return (self.out_features,)

    def parameters(self) -> list[Tensor]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]
