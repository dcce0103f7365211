#!/usr/bin/env python3
from pycoalition.autodiff.tensor import Tensor
from pycoalition.util.types import LayerKind, NormMode
import numpy as np
import logging


class Layer:
    """
    Base class for network layers

    A layer is its description (the schema: kind + kind-specific parameters,
    everything needed to rebuild it) plus its parameter tensors. Subclasses
    implement forward() and output_shape().
    """

    # Define version of this layer's code here. It is written into checkpoint
    # headers so a stale checkpoint can be spotted on load
    VERSION = "base-0.1.0"

    # Layer kind handled by this class
    KIND: LayerKind | None = None

    # Schema keys (besides "kind") this layer requires
    REQUIRED: tuple = ()

    def __init__(
        self,
        schema: dict,  # kind-specific parameters (as exported by .schema)
        rng: np.random.Generator | None = None,  # parameter initialization stream (None = zero-filled, to be loaded)
    ) -> None:

        # Logger should be set up first by subclass, but if not
        # we can also set it up again here
        if not hasattr(self, "_logger"):
            self._logger = logging.getLogger(f"pycoalition.layer.{self.KIND.value}")

        missing = [k for k in self.REQUIRED if k not in schema]
        if missing:
            raise ValueError(f"{self.KIND.value} layer missing parameters: {', '.join(missing)}")

        self._schema = {k: v for k, v in schema.items() if k != "kind"}
        self._rng = rng

    def __repr__(self) -> str:
        return f"{type(self).__name__}: {self.schema}"

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    @property
    def kind(self) -> LayerKind:
        return self.KIND

    @property
    def schema(self) -> dict:
        """
        Export schema to dict (allows re-creation of the layer)
        """
        return {"kind": self.KIND.value, **self._schema}

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def output_shape(self, input_shape: tuple) -> tuple:
        """
        Per-sample output shape for a per-sample input shape (no batch axis).
        Raises ValueError naming the offending dimension if incompatible.
        """
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        """
        Trainable tensors in declaration order
        """
        return []

    def buffers(self) -> list[Tensor]:
        """
        Non-trainable state saved with checkpoints (declaration order)
        """
        return []

    def set_norm_mode(self, mode: NormMode) -> None:
        """
        Only normalization layers care, everything else ignores this
        """
        return

    # =================================================================================================================
    # Helpers for subclasses
    # =================================================================================================================

    def _uniform(self, shape: tuple, fan_in: int) -> Tensor:
        """
        Fan-in scaled uniform initialization U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
        or zeros when no random stream was given (parameters about to be loaded)
        """
        if self._rng is None:
            return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)
        bound = 1.0 / np.sqrt(fan_in)
        values = self._rng.uniform(-bound, bound, size=shape).astype(np.float32)
        return Tensor(values, requires_grad=True)

    def _expect_dims(self, input_shape: tuple, ndim: int) -> None:
        if len(input_shape) != ndim:
            raise ValueError(
                f"{self.KIND.value} expects {ndim}-D per-sample input, got shape {tuple(input_shape)}"
            )
