#!/usr/bin/env python3
# Consolidated import for pycoalition enum types
from enum import Enum


class LayerKind(Enum):
    """
    Layer kinds, value = kind string used in architecture descriptions
    """

    CONV2D = "conv2d"  # 2-D convolution (also 1x1 pointwise)
    RELU = "relu"  # rectified-linear activation
    BATCHNORM = "batchnorm"  # batch normalization
    MAXPOOL = "maxpool"  # max pooling
    LINEAR = "linear"  # fully connected
    FLATTEN = "flatten"  # (C, H, W) -> (C*H*W,)

    @property
    def module(self) -> str:
        """
        Name of the pycoalition.layer module (and class) implementing this kind
        """
        return {
            LayerKind.CONV2D: "Conv2d",
            LayerKind.RELU: "ReLU",
            LayerKind.BATCHNORM: "BatchNorm",
            LayerKind.MAXPOOL: "MaxPool",
            LayerKind.LINEAR: "Linear",
            LayerKind.FLATTEN: "Flatten",
        }[self]


class NormMode(Enum):
    """
    Where batch normalization takes its statistics from
    """

    TRAIN = "train"  # current batch, running statistics updated
    EVAL = "eval"  # running statistics
    SAMPLE = "sample"  # current input only, running statistics untouched (single-sample extraction)


class PerturbMode(Enum):
    """
    How a perturbation mask is applied to an image
    """

    MASK_BLEND = "mask_blend"  # x * (1 - a*p) + b * (a*p)
    ADDITIVE = "additive"  # x + a*p


class HingeSign(Enum):
    """
    Which side of the margin the confidence hinge penalizes
    """

    PRESERVE = "preserve"  # max(0, max_{j != t} f_j - f_t): zero while t stays on top
    LITERAL = "literal"  # max(0, f_t - max_{j != t} f_j): zero once t is pushed off the top


class Baseline(Enum):
    """
    Fill content for deleted pixels
    """

    ZEROS = "zeros"
    BLUR = "blur"


class Method(Enum):
    """
    Saliency methods the pipeline can run
    """

    COALITION = "coalition"  # coalition-guided perturbation
    OCCLUSION = "occlusion"  # sliding-patch occlusion baseline


class SampleStatus(Enum):
    OK = "ok"
    FAILED = "failed"
