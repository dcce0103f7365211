#!/usr/bin/env python3
from pycoalition.layer.layer import Layer
from pycoalition.autodiff.tensor import Tensor
from pycoalition.autodiff import functional as F
from pycoalition.util.types import LayerKind
import numpy as np
import logging


class Conv2d(Layer):
    """
    2-D convolution layer (NCHW)
    """

    VERSION = "0.1.0"
    KIND = LayerKind.CONV2D
    REQUIRED = ("in_channels", "out_channels", "kernel_size")

    def __init__(self, schema: dict, rng: np.random.Generator | None = None) -> None:

        # Setup logger
        self._logger = logging.getLogger(__name__)

        # Fill in defaults before the base class stores the schema
        schema = {"stride": 1, "padding": 0, "bias": True, **schema}
        super().__init__(schema, rng)

        self.in_channels = int(schema["in_channels"])
        self.out_channels = int(schema["out_channels"])
        self.kernel_size = int(schema["kernel_size"])
        self.stride = int(schema["stride"])
        self.padding = int(schema["padding"])
        self.padding_mode = str(schema.get("padding_mode", "zeros"))  # "zeros" or "reflect"
        assert self.in_channels >= 1 and self.out_channels >= 1, "channel counts must be positive"
        assert self.kernel_size >= 1 and self.stride >= 1 and self.padding >= 0, "invalid conv geometry"
        assert self.padding_mode in ("zeros", "reflect"), f"unsupported padding mode {self.padding_mode}"

        fan_in = self.in_channels * self.kernel_size * self.kernel_size
        self.weight = self._uniform((self.out_channels, self.in_channels, self.kernel_size, self.kernel_size), fan_in)
        self.bias = self._uniform((self.out_channels,), fan_in) if schema["bias"] else None

    # =================================================================================================================

    def forward(self, x: Tensor) -> Tensor:
        if self.padding_mode == "reflect" and self.padding > 0:
            p = self.padding
            x = F.pad(x, [(0, 0), (0, 0), (p, p), (p, p)], mode="reflect")
            return F.conv2d(x, self.weight, self.bias, stride=self.stride)
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def output_shape(self, input_shape: tuple) -> tuple:
        self._expect_dims(input_shape, 3)
        c, h, w = input_shape
        if c != self.in_channels:
            raise ValueError(f"conv2d expects {self.in_channels} input channels, got {c}")

        out = []
        for name, size in (("height", h), ("width", w)):
            if self.padding_mode == "reflect" and self.padding >= size:
                raise ValueError(f"conv2d reflect padding {self.padding} needs an input {name} above {self.padding}")
            span = size + 2 * self.padding - self.kernel_size
            if span < 0:
                raise ValueError(
                    f"conv2d kernel {self.kernel_size} larger than padded input {name} {size + 2 * self.padding}"
                )
            out.append(span // self.stride + 1)
        return (self.out_channels, out[0], out[1])

    def parameters(self) -> list[Tensor]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]
