#!/usr/bin/env python3
#
# Small convolutional classifiers: definition, training, prediction,
# reconfiguration into feature-extraction networks, and checkpoints
#
from pycoalition.autodiff.tensor import Tensor, ComputationRecord, backward
from pycoalition.autodiff import functional as F
from pycoalition.layer import Layer, create_layer
from pycoalition.dataset import augment_batch
from pycoalition.util.types import LayerKind, NormMode
from pycoalition.util.files import atomic_write
from pycoalition.util.version import package_version
from dataclasses import dataclass, field
import os
import json
import time
import logging
import numpy as np

# Checkpoint magic string (first line of every checkpoint file)
CHECKPOINT_MAGIC = "CPFC1"


class Network:
    """
    Ordered layer stack with per-sample input shape (C, H, W)
    """

    def __init__(
        self,
        layers: list[Layer],  # layers in execution order
        input_shape: tuple,  # per-sample input shape (C, H, W)
        num_classes: int | None = None,  # logits length (None for networks without a classifier head)
    ) -> None:

        self._logger = logging.getLogger("pycoalition.network")

        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.num_classes = None if num_classes is None else int(num_classes)

        # Validate the shape chain up front
        self.output_shape = self.validate()
        if self.num_classes is not None and self.output_shape != (self.num_classes,):
            raise ValueError(f"network output shape {self.output_shape} does not match {self.num_classes} classes")

    # =================================================================================================================

    def __repr__(self) -> str:
        kinds = ", ".join(layer.kind.value for layer in self.layers)
        return f"{type(self).__name__}({self.input_shape} -> {self.output_shape}: {kinds})"

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def validate(self) -> tuple:
        """
        Walk the per-sample shape through every layer; the first incompatible
        layer raises ValueError naming its index and kind
        """
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except ValueError as e:
                raise ValueError(f"layer {i} ({layer.kind.value}): {e}") from e
        return tuple(shape)

    def forward(self, x: Tensor) -> Tensor:
        """
        Batched forward pass, x is (N, C, H, W)
        """
        if tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"network expects input (N, {', '.join(map(str, self.input_shape))}), got {x.shape}")
        for layer in self.layers:
            x = layer(x)
        return x

    @property
    def schema(self) -> dict:
        """
        Architecture description (enough to rebuild the network without its parameters)
        """
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [layer.schema for layer in self.layers],
        }

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def buffers(self) -> list[Tensor]:
        return [b for layer in self.layers for b in layer.buffers()]

    def set_norm_mode(self, mode: NormMode) -> None:
        for layer in self.layers:
            layer.set_norm_mode(mode)


class ExtractionNet(Network):
    """
    Feature-extraction network: convolution / activation / normalization layers
    only, same-padded throughout, ending in a 1x1 convolution to `cluster_count`
    channels followed by batch normalization. Output is (N, l, H, W).
    """

    ALLOWED = {LayerKind.CONV2D, LayerKind.RELU, LayerKind.BATCHNORM}

    def __init__(self, layers: list[Layer], input_shape: tuple, cluster_count: int) -> None:
        super().__init__(layers, input_shape, num_classes=None)
        self.cluster_count = int(cluster_count)

        # Invariants
        kinds = {layer.kind for layer in self.layers}
        assert kinds <= self.ALLOWED, f"extraction network cannot contain {kinds - self.ALLOWED}"
        expected = (self.cluster_count,) + self.input_shape[1:]
        assert self.output_shape == expected, f"extraction output {self.output_shape}, expected {expected}"

        # Single-sample statistics in every normalization layer
        self.set_norm_mode(NormMode.SAMPLE)

    @property
    def schema(self) -> dict:
        schema = super().schema
        schema["cluster_count"] = self.cluster_count
        return schema


# =====================================================================================================================


def apply_layer(layer: Layer, x: Tensor) -> Tensor:
    """
    Run one layer on a batched input, validating the per-sample shape first
    """
    try:
        layer.output_shape(tuple(x.shape[1:]))
    except ValueError as e:
        raise ValueError(f"{layer.kind.value} layer: {e}") from e
    return layer(x)


def default_architecture(
    input_shape: tuple = (3, 32, 32),  # per-sample input (C, H, W)
    num_classes: int = 4,  # logits length
    channels: tuple = (16, 32, 32),  # output channels of each conv block
) -> dict:
    """
    conv-relu-batchnorm-maxpool blocks followed by a flatten + linear head
    """
    layers = []
    c, h, w = input_shape
    for out_channels in channels:
        layers += [
            {"kind": "conv2d", "in_channels": c, "out_channels": out_channels, "kernel_size": 3, "padding": 1},
            {"kind": "relu"},
            {"kind": "batchnorm", "channels": out_channels},
            {"kind": "maxpool", "kernel_size": 2},
        ]
        c, h, w = out_channels, h // 2, w // 2
    layers += [
        {"kind": "flatten"},
        {"kind": "linear", "in_features": c * h * w, "out_features": num_classes},
    ]
    return {"input_shape": list(input_shape), "num_classes": num_classes, "layers": layers}


def build_classifier(config: dict | None = None, seed: int = 0) -> Network:
    """
    Build a classifier from an architecture description, parameters drawn from
    a seeded fan-in scaled uniform distribution
    """
    config = config if config is not None else default_architecture()
    rng = np.random.default_rng(seed)

    layers = []
    for i, schema in enumerate(config["layers"]):
        try:
            layers.append(create_layer(schema, rng))
        except ValueError as e:
            raise ValueError(f"layer {i}: {e}") from e

    net = Network(layers, tuple(config["input_shape"]), config.get("num_classes"))
    logging.getLogger("pycoalition.network").debug(f"built {net} ({sum(p.size for p in net.parameters())} parameters)")
    return net


# =====================================================================================================================


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """
    Mean cross-entropy of (N, K) logits against integer labels
    """
    labels = np.asarray(labels, dtype=np.int64)
    log_probs = F.log_softmax(logits, axis=1)
    picked = F.getitem(log_probs, (np.arange(labels.size), labels))
    return -F.mean(picked)


@dataclass
class TrainingReport:
    """
    Per-epoch training history plus held-out accuracy
    """

    epochs: int
    losses: list[float] = field(default_factory=list)  # mean training loss per epoch
    train_accuracy: list[float] = field(default_factory=list)  # training-split accuracy per epoch
    test_accuracy: float = 0.0  # held-out accuracy after the final epoch
    seconds: float = 0.0


def accuracy(net: Network, images: np.ndarray, labels: np.ndarray, batch_size: int = 64) -> float:
    """
    Fraction of images whose predicted class equals the label (inference mode)
    """
    if len(images) == 0:
        return 0.0
    net.set_norm_mode(NormMode.EVAL)
    hits = 0
    for start in range(0, len(images), batch_size):
        logits = net(Tensor(images[start : start + batch_size])).data
        hits += int(np.sum(np.argmax(logits, axis=1) == labels[start : start + batch_size]))
    return hits / len(images)


def train_classifier(
    net: Network,  # network to train (parameters updated in place)
    dataset,  # labeled images with train/test splits (ShapesDataset)
    lr: float = 0.03,  # SGD step size
    epochs: int = 20,  # passes over the training split
    batch_size: int = 16,  # mini-batch size
    momentum: float = 0.9,  # heavy-ball momentum
    weight_decay: float = 5e-4,  # L2 penalty folded into each step
    augment: bool = True,  # random flips and background erasing per batch
    seed: int = 0,  # shuffling and augmentation stream
) -> tuple[Network, TrainingReport]:
    """
    Mini-batch SGD with momentum and weight decay on mean cross-entropy.
    Deterministic given seed.
    """
    logger = logging.getLogger("pycoalition.network")

    images, labels, masks = dataset.train_images, dataset.train_labels, dataset.train_masks
    if len(images) == 0:
        raise ValueError("cannot train on an empty dataset")
    if net.num_classes is None or np.any(labels < 0) or np.any(labels >= net.num_classes):
        raise ValueError(f"labels must lie in [0, {net.num_classes})")
    assert lr >= 0 and epochs >= 1 and batch_size >= 1 and weight_decay >= 0, "invalid training hyperparameters"

    rng = np.random.default_rng(seed)
    params = net.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    report = TrainingReport(epochs=int(epochs))
    started = time.perf_counter()

    for epoch in range(int(epochs)):
        net.set_norm_mode(NormMode.TRAIN)
        order = rng.permutation(len(images))
        epoch_loss, batches = 0.0, 0

        for start in range(0, len(order), batch_size):
            batch = order[start : start + batch_size]
            inputs = augment_batch(images[batch], masks[batch], rng) if augment else images[batch]
            with ComputationRecord() as record:
                loss = cross_entropy(net(Tensor(inputs)), labels[batch])
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"training diverged (loss {loss.item()}) in epoch {epoch + 1}")
            backward(loss, record)

            for p, v in zip(params, velocity):
                v *= momentum
                v += p.grad + np.float32(weight_decay) * p.data
                p.data -= np.float32(lr) * v

            epoch_loss += loss.item()
            batches += 1

        report.losses.append(epoch_loss / batches)
        report.train_accuracy.append(accuracy(net, images, labels))
        logger.info(
            f"epoch {epoch + 1}/{epochs}: loss {report.losses[-1]:.4f}, train accuracy {report.train_accuracy[-1]:.3f}"
        )

    report.test_accuracy = accuracy(net, dataset.test_images, dataset.test_labels)
    report.seconds = time.perf_counter() - started
    net.set_norm_mode(NormMode.EVAL)
    logger.info(f"training done in {round(report.seconds, 1)} seconds, held-out accuracy {report.test_accuracy:.3f}")
    return net, report


# =====================================================================================================================


@dataclass
class Prediction:
    probabilities: np.ndarray  # softmax over classes
    label: int  # predicted class t (lowest index wins ties)

    @property
    def confidence(self) -> float:
        return float(self.probabilities[self.label])


def predict(net: Network, image: Tensor | np.ndarray) -> Prediction:
    """
    Class probabilities and predicted class for one (C, H, W) image
    """
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    if tuple(data.shape) != net.input_shape:
        raise ValueError(f"image shape {tuple(data.shape)} does not match network input {net.input_shape}")

    net.set_norm_mode(NormMode.EVAL)
    probs = F.softmax(net(Tensor(data[None])), axis=1).data[0]
    return Prediction(probabilities=probs, label=int(np.argmax(probs)))


def reconfigure_for_extraction(net: Network, cluster_count: int = 20, seed: int = 0) -> ExtractionNet:
    """
    Keep only the convolution, activation and normalization layers (copying
    their parameters), force reflect same-padding with stride 1 so the spatial
    extent is preserved, and append a freshly initialized 1x1 convolution to
    `cluster_count` channels followed by batch normalization
    """
    if int(cluster_count) < 2:
        raise ValueError(f"cluster count must be at least 2, got {cluster_count}")

    layers = []
    channels = net.input_shape[0]
    for layer in net.layers:
        if layer.kind not in ExtractionNet.ALLOWED:
            continue

        schema = layer.schema
        if layer.kind == LayerKind.CONV2D:
            schema.update({"stride": 1, "padding": layer.kernel_size // 2, "padding_mode": "reflect"})
            if layer.kernel_size % 2 == 0:
                raise ValueError(f"conv2d kernel {layer.kernel_size} cannot be same-padded")
            channels = layer.out_channels

        copied = create_layer(schema)
        for target, source in zip(copied.parameters() + copied.buffers(), layer.parameters() + layer.buffers()):
            target.data = source.data.copy()
        layers.append(copied)

    if not any(layer.kind == LayerKind.CONV2D for layer in layers):
        raise ValueError("network has no convolution layers to reconfigure")

    rng = np.random.default_rng(seed)
    head = {"kind": "conv2d", "in_channels": channels, "out_channels": int(cluster_count), "kernel_size": 1}
    layers.append(create_layer(head, rng))
    layers.append(create_layer({"kind": "batchnorm", "channels": cluster_count}, rng))

    enet = ExtractionNet(layers, net.input_shape, cluster_count)
    logging.getLogger("pycoalition.network").debug(f"reconfigured for extraction: {enet}")
    return enet


# =====================================================================================================================


def save_checkpoint(net: Network, output: str) -> str:
    """
    Save a network: magic line, JSON architecture line, then every parameter
    tensor followed by every buffer as raw little-endian float32, in
    declaration order
    """
    output = str(output).strip()
    assert output != "", "Output must be specified"

    # Enforce file extension to prevent confusion with other artifacts
    if not output.endswith(".cpfc"):
        output = f"{output}.cpfc"

    tensors = net.parameters() + net.buffers()
    header = {
        "architecture": net.schema,
        "tensors": [list(t.shape) for t in tensors],
        "layer_versions": [type(layer).VERSION for layer in net.layers],
        "pycoalition_version": package_version(),
    }
    payload = f"{CHECKPOINT_MAGIC}\n{json.dumps(header)}\n".encode()
    payload += b"".join(np.ascontiguousarray(t.data, dtype="<f4").tobytes() for t in tensors)

    output = atomic_write(output, payload)
    logging.getLogger("pycoalition.network").info(f"checkpoint saved: {output}")
    return output


def load_checkpoint(path: str) -> Network:
    """
    Load a network saved by save_checkpoint()
    """
    logger = logging.getLogger("pycoalition.network")
    path = os.path.realpath(str(path))
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")

    with open(path, "rb") as f:
        magic = f.readline().decode(errors="replace").strip()
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint (magic {magic!r}, expected {CHECKPOINT_MAGIC})")
        header = json.loads(f.readline().decode())
        body = f.read()

    architecture = header["architecture"]
    layers = [create_layer(schema) for schema in architecture["layers"]]
    if "cluster_count" in architecture:
        net = ExtractionNet(layers, tuple(architecture["input_shape"]), architecture["cluster_count"])
    else:
        net = Network(layers, tuple(architecture["input_shape"]), architecture.get("num_classes"))

    versions = [type(layer).VERSION for layer in net.layers]
    if header.get("layer_versions") != versions:
        logger.warning(f"checkpoint layer versions differ from this code ({path})")

    offset = 0
    for t in net.parameters() + net.buffers():
        count = t.size * 4
        if offset + count > len(body):
            raise ValueError(f"checkpoint truncated: {path}")
        t.data = np.frombuffer(body, dtype="<f4", count=t.size, offset=offset).astype(np.float32).reshape(t.shape)
        offset += count
    if offset != len(body):
        raise ValueError(f"checkpoint has {len(body) - offset} trailing bytes: {path}")

    if not isinstance(net, ExtractionNet):
        net.set_norm_mode(NormMode.EVAL)
    logger.info(f"checkpoint loaded: {path}")
    return net


def clone_network(net: Network) -> Network:
    """
    Independent copy (same architecture, copied parameters and buffers)
    """
    layers = [create_layer(layer.schema) for layer in net.layers]
    if isinstance(net, ExtractionNet):
        copy = ExtractionNet(layers, net.input_shape, net.cluster_count)
    else:
        copy = Network(layers, net.input_shape, net.num_classes)

    for target, source in zip(copy.parameters() + copy.buffers(), net.parameters() + net.buffers()):
        target.data = source.data.copy()
    for target, source in zip(copy.layers, net.layers):
        if hasattr(source, "mode"):
            target.set_norm_mode(source.mode)
    return copy
