#!/usr/bin/env python3
from pycoalition.layer.layer import Layer
from pycoalition.autodiff.tensor import Tensor
from pycoalition.autodiff import functional as F
from pycoalition.util.types import LayerKind, NormMode
import numpy as np
import logging


class BatchNorm(Layer):
    """
    Batch normalization over channels (NCHW) or features (N, F)

    Statistics come from the input itself in TRAIN and SAMPLE modes (for a
    single NCHW sample that is per channel over spatial positions), and from
    the running estimates in EVAL mode. Only TRAIN updates the running estimates.
    """

    VERSION = "0.1.0"
    KIND = LayerKind.BATCHNORM
    REQUIRED = ("channels",)

    def __init__(self, schema: dict, rng: np.random.Generator | None = None) -> None:

        # Setup logger
        self._logger = logging.getLogger(__name__)

        schema = {"eps": 1e-5, "momentum": 0.1, **schema}
        super().__init__(schema, rng)

        self.channels = int(schema["channels"])
        self.eps = float(schema["eps"])
        self.momentum = float(schema["momentum"])
        assert self.channels >= 1, "channel count must be positive"

        self.gamma = Tensor(np.ones(self.channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(self.channels, dtype=np.float32), requires_grad=True)
        self.running_mean = Tensor(np.zeros(self.channels, dtype=np.float32))
        self.running_var = Tensor(np.ones(self.channels, dtype=np.float32))

        self.mode = NormMode.EVAL

    # =================================================================================================================

    def set_norm_mode(self, mode: NormMode) -> None:
        self.mode = NormMode(mode)

    def forward(self, x: Tensor) -> Tensor:
        if self.mode == NormMode.EVAL:
            shape = (1, self.channels) + (1,) * (x.ndim - 2)
            mean = self.running_mean.data.reshape(shape)
            inv_std = (1.0 / np.sqrt(self.running_var.data + self.eps)).astype(np.float32).reshape(shape)
            return (x - mean) * F.reshape(self.gamma, shape) * inv_std + F.reshape(self.beta, shape)

        if self.mode == NormMode.TRAIN:
            self.__update_running(x.data)

        return F.batch_norm(x, self.gamma, self.beta, eps=self.eps)

    def __update_running(self, x: np.ndarray) -> None:
        axes = (0, 2, 3) if x.ndim == 4 else (0,)
        count = int(np.prod([x.shape[a] for a in axes]))
        mean = x.mean(axis=axes)
        var = x.var(axis=axes, ddof=1) if count > 1 else np.zeros_like(mean)

        m = self.momentum
        self.running_mean.data = ((1.0 - m) * self.running_mean.data + m * mean).astype(np.float32)
        self.running_var.data = ((1.0 - m) * self.running_var.data + m * var).astype(np.float32)

    def output_shape(self, input_shape: tuple) -> tuple:
        if len(input_shape) not in (1, 3):
            raise ValueError(f"batchnorm expects (C, H, W) or (F,) per-sample input, got {tuple(input_shape)}")
        if input_shape[0] != self.channels:
            raise ValueError(f"batchnorm expects {self.channels} channels, got {input_shape[0]}")
        return tuple(input_shape)

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]

    def buffers(self) -> list[Tensor]:
        return [self.running_mean, self.running_var]
