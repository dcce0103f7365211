#!/usr/bin/env python3
# Tests for classifier construction, training, prediction, reconfiguration and checkpoints
from pycoalition.autodiff import Tensor
from pycoalition.dataset import ShapesDataset, generate_shapes_dataset
from pycoalition.layer import create_layer
from pycoalition.network import (
    Network,
    ExtractionNet,
    CHECKPOINT_MAGIC,
    accuracy,
    build_classifier,
    clone_network,
    default_architecture,
    load_checkpoint,
    predict,
    reconfigure_for_extraction,
    save_checkpoint,
    train_classifier,
)
from pycoalition.util.types import LayerKind, NormMode
import numpy as np
import pytest


def small_classifier(seed: int = 0) -> Network:
    return build_classifier(default_architecture(input_shape=(3, 16, 16), channels=(4, 4)), seed=seed)


def bias_only_network(bias: list[float]) -> Network:
    """
    Flatten + zero-weight linear layer: logits equal the bias for any input
    """
    layers = [
        create_layer({"kind": "flatten"}),
        create_layer({"kind": "linear", "in_features": 1, "out_features": len(bias)}),
    ]
    layers[1].bias.data = np.array(bias, dtype=np.float32)
    return Network(layers, (1, 1, 1), len(bias))


def test_default_logits_length():
    net = build_classifier()
    logits = net(Tensor(np.zeros((2, 3, 32, 32))))
    assert logits.shape == (2, 4)


def test_mismatched_channels():
    """
    The first incompatible layer is named by index and kind
    """
    config = {
        "input_shape": [3, 8, 8],
        "num_classes": 2,
        "layers": [
            {"kind": "conv2d", "in_channels": 3, "out_channels": 8, "kernel_size": 3, "padding": 1},
            {"kind": "conv2d", "in_channels": 4, "out_channels": 8, "kernel_size": 3, "padding": 1},
            {"kind": "flatten"},
            {"kind": "linear", "in_features": 512, "out_features": 2},
        ],
    }
    with pytest.raises(ValueError, match="layer 1 \\(conv2d\\)"):
        build_classifier(config)


def test_unknown_layer_kind():
    with pytest.raises(ValueError, match="unsupported layer kind"):
        create_layer({"kind": "dropout"})


def test_same_seed_same_parameters():
    a, b = small_classifier(7), small_classifier(7)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert np.array_equal(pa.data, pb.data)
    c = small_classifier(8)
    assert not np.array_equal(a.parameters()[0].data, c.parameters()[0].data)


def test_schema_rebuilds_network():
    net = small_classifier()
    assert net.schema["layers"][0] == {
        "kind": "conv2d",
        "in_channels": 3,
        "out_channels": 4,
        "kernel_size": 3,
        "padding": 1,
        "stride": 1,
        "bias": True,
    }
    rebuilt = build_classifier(net.schema)
    assert rebuilt.output_shape == (4,)


def test_predict_argmax_and_ties():
    assert predict(bias_only_network([2.0, 1.0, 1.0, 1.0]), np.zeros((1, 1, 1))).label == 0
    prediction = predict(bias_only_network([1.0, 1.0]), np.zeros((1, 1, 1)))
    assert prediction.label == 0
    assert prediction.confidence == pytest.approx(0.5)


@pytest.mark.parametrize("c", [0.01, 0.5, 3.0, 40.0])
def test_predict_label_scale_invariant(c):
    """
    Scaling every logit by c > 0 changes the probabilities, never the predicted class
    """
    rng = np.random.default_rng(0)
    for _ in range(10):
        bias = rng.normal(size=5)
        plain = predict(bias_only_network(list(bias)), np.zeros((1, 1, 1)))
        scaled = predict(bias_only_network(list(c * bias)), np.zeros((1, 1, 1)))
        assert scaled.label == plain.label == int(np.argmax(bias.astype(np.float32)))


def test_predict_shape_error():
    with pytest.raises(ValueError):
        predict(small_classifier(), np.zeros((3, 8, 8)))


def test_zero_step_training():
    """
    lr 0 leaves every parameter untouched
    """
    dataset = generate_shapes_dataset(n=16, size=16, seed=0)
    net = small_classifier()
    before = [p.data.copy() for p in net.parameters()]

    net, report = train_classifier(net, dataset, lr=0.0, epochs=1, batch_size=4)
    for p, original in zip(net.parameters(), before):
        assert np.array_equal(p.data, original)
    assert len(report.losses) == 1
    assert 0.0 <= report.test_accuracy <= 1.0


def test_training_reduces_loss():
    dataset = generate_shapes_dataset(n=32, size=16, seed=1)
    _, report = train_classifier(small_classifier(), dataset, lr=0.05, epochs=4, batch_size=8, augment=False)
    assert report.losses[-1] < report.losses[0]


def test_training_is_deterministic():
    dataset = generate_shapes_dataset(n=16, size=16, seed=2)
    a, _ = train_classifier(small_classifier(), dataset, epochs=1, batch_size=4, seed=3)
    b, _ = train_classifier(small_classifier(), dataset, epochs=1, batch_size=4, seed=3)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert np.array_equal(pa.data, pb.data)


def test_empty_dataset():
    empty = ShapesDataset(
        images=np.zeros((0, 3, 16, 16), dtype=np.float32),
        labels=np.zeros(0, dtype=np.int64),
        masks=np.zeros((0, 16, 16), dtype=bool),
        train_count=0,
    )
    with pytest.raises(ValueError, match="empty"):
        train_classifier(small_classifier(), empty)


def test_accuracy_range():
    dataset = generate_shapes_dataset(n=16, size=16, seed=0)
    value = accuracy(small_classifier(), dataset.test_images, dataset.test_labels)
    assert 0.0 <= value <= 1.0


# =====================================================================================================================


def test_reconfigure_default():
    """
    Default three-block classifier, l = 20 -> same-padded blocks + head, 20 x 32 x 32 output
    """
    net = build_classifier()
    enet = reconfigure_for_extraction(net, 20)
    assert isinstance(enet, ExtractionNet)
    assert enet.output_shape == (20, 32, 32)
    assert {layer.kind for layer in enet.layers} <= {LayerKind.CONV2D, LayerKind.RELU, LayerKind.BATCHNORM}
    assert [layer.kind for layer in enet.layers[-2:]] == [LayerKind.CONV2D, LayerKind.BATCHNORM]
    assert sum(1 for layer in enet.layers if layer.kind == LayerKind.CONV2D) == 4

    # Retained layers start from the classifier's parameters
    assert np.array_equal(enet.layers[0].weight.data, net.layers[0].weight.data)
    assert enet.layers[0].weight is not net.layers[0].weight

    out = enet(Tensor(np.random.default_rng(0).uniform(size=(1, 3, 32, 32))))
    assert out.shape == (1, 20, 32, 32)


def test_reconfigure_needs_two_clusters():
    with pytest.raises(ValueError):
        reconfigure_for_extraction(build_classifier(), 1)


def test_reconfigure_head_seed():
    net = small_classifier()
    a = reconfigure_for_extraction(net, 6, seed=1)
    b = reconfigure_for_extraction(net, 6, seed=1)
    c = reconfigure_for_extraction(net, 6, seed=2)
    assert np.array_equal(a.layers[-2].weight.data, b.layers[-2].weight.data)
    assert not np.array_equal(a.layers[-2].weight.data, c.layers[-2].weight.data)


def test_extraction_reflect_same_padding():
    enet = reconfigure_for_extraction(small_classifier(), 4)
    convs = [layer for layer in enet.layers if layer.kind == LayerKind.CONV2D]
    assert all(layer.stride == 1 and layer.padding == layer.kernel_size // 2 for layer in convs)
    assert all(layer.padding_mode == "reflect" for layer in convs if layer.kernel_size > 1)
    assert enet.output_shape == (4, 16, 16)


def test_extraction_uses_sample_statistics():
    enet = reconfigure_for_extraction(small_classifier(), 4)
    assert all(layer.mode == NormMode.SAMPLE for layer in enet.layers if layer.kind == LayerKind.BATCHNORM)


# =====================================================================================================================


def test_checkpoint_round_trip(tmp_path):
    dataset = generate_shapes_dataset(n=16, size=16, seed=0)
    net, _ = train_classifier(small_classifier(), dataset, epochs=1, batch_size=8)

    path = save_checkpoint(net, str(tmp_path / "model"))
    assert path.endswith(".cpfc")
    with open(path, "rb") as f:
        assert f.readline().decode().strip() == CHECKPOINT_MAGIC

    loaded = load_checkpoint(path)
    for a, b in zip(net.parameters() + net.buffers(), loaded.parameters() + loaded.buffers()):
        assert np.array_equal(a.data, b.data)

    x = dataset.test_images[0]
    assert np.array_equal(predict(net, x).probabilities, predict(loaded, x).probabilities)


def test_checkpoint_extraction_net(tmp_path):
    enet = reconfigure_for_extraction(small_classifier(), 5)
    loaded = load_checkpoint(save_checkpoint(enet, str(tmp_path / "enet.cpfc")))
    assert isinstance(loaded, ExtractionNet)
    assert loaded.cluster_count == 5


def test_checkpoint_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(str(tmp_path / "missing.cpfc"))

    bogus = tmp_path / "bogus.cpfc"
    bogus.write_bytes(b"NOTIT\n{}\n")
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(str(bogus))

    path = save_checkpoint(small_classifier(), str(tmp_path / "short"))
    with open(path, "rb") as f:
        content = f.read()
    with open(path, "wb") as f:
        f.write(content[:-8])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(path)


def test_clone_is_independent():
    net = small_classifier()
    copy = clone_network(net)
    copy.parameters()[0].data += 1.0
    assert not np.array_equal(copy.parameters()[0].data, net.parameters()[0].data)
