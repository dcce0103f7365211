#!/usr/bin/env python3
# Tests for retention, the saliency metrics, insertion curves, occlusion and the report
from pycoalition.evaluation import (
    EvalReport,
    InsertionPoint,
    SampleRow,
    average_drop,
    insertion_curve,
    occlusion_baseline,
    percent_increase,
    retain_top_fraction,
    score_sample,
    summary_table,
    top1_accuracy,
    top_fraction_mask,
)
from pycoalition.layer import create_layer
from pycoalition.network import Network, predict
from pycoalition.perturbation import SaliencyMap
from pycoalition.util.types import SampleStatus
import os
import numpy as np
import pytest


def tiny_network(seed: int = 0, bias: bool = True) -> Network:
    rng = np.random.default_rng(seed)
    layers = [
        create_layer({"kind": "conv2d", "in_channels": 3, "out_channels": 2, "kernel_size": 3, "padding": 1}, rng),
        create_layer({"kind": "relu"}, rng),
        create_layer({"kind": "flatten"}, rng),
        create_layer({"kind": "linear", "in_features": 128, "out_features": 3, "bias": bias}, rng),
    ]
    return Network(layers, (3, 8, 8), 3)


def constant_network() -> Network:
    """
    Zero weights: the same logits for every input
    """
    layers = [
        create_layer({"kind": "flatten"}),
        create_layer({"kind": "linear", "in_features": 192, "out_features": 2}),
    ]
    layers[1].bias.data = np.array([0.3, -0.2], dtype=np.float32)
    return Network(layers, (3, 8, 8), 2)


def image(seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).uniform(size=(3, 8, 8)).astype(np.float32)


def test_retain_all_and_none():
    x = image()
    saliency = SaliencyMap(np.random.default_rng(1).uniform(size=(8, 8)).astype(np.float32))
    assert np.array_equal(retain_top_fraction(saliency, x, 1.0), x)
    assert np.all(retain_top_fraction(saliency, x, 0.0) == 0.0)


def test_retain_top_two():
    saliency = np.array([[0.9, 0.7], [0.2, 0.1]])
    x = np.ones((3, 2, 2))
    out = retain_top_fraction(saliency, x, 0.5)
    assert out[0].tolist() == [[1.0, 1.0], [0.0, 0.0]]
    assert np.array_equal(out[0], out[2])


def test_retain_ties_row_major():
    keep = top_fraction_mask(np.full((2, 2), 0.5), 0.25)
    assert keep.tolist() == [[True, False], [False, False]]


def test_retain_count_rounds_up():
    assert top_fraction_mask(np.arange(10.0).reshape(2, 5), 0.41).sum() == 5
    assert top_fraction_mask(np.arange(10.0).reshape(2, 5), 0.3).sum() == 3


def test_retain_monotone():
    saliency = np.random.default_rng(2).integers(0, 4, size=(8, 8)).astype(float)
    previous = np.zeros((8, 8), dtype=bool)
    for fraction in np.linspace(0.0, 1.0, 21):
        keep = top_fraction_mask(saliency, fraction)
        assert np.all(keep[previous])
        previous = keep


def test_average_drop_examples():
    assert average_drop([(0.8, 0.6)]) == pytest.approx(0.25)
    assert average_drop([(0.8, 0.8), (0.3, 0.3)]) == 0.0
    assert average_drop([(0.5, 1.0)]) == pytest.approx(-1.0)
    assert average_drop([(0.5, 1.0)], clamp=True) == 0.0


def test_average_drop_zero_confidence():
    with pytest.raises(ZeroDivisionError, match="sample 1"):
        average_drop([(0.5, 0.4), (0.0, 0.1)])


def test_percent_increase_examples():
    assert percent_increase([(0.5, 0.6), (0.5, 0.4), (0.2, 0.3), (0.9, 0.1)]) == 0.5
    assert percent_increase([(0.5, 0.4), (0.3, 0.1)]) == 0.0
    assert percent_increase([(0.5, 0.5), (0.3, 0.3)]) == 0.0


def test_top1_examples():
    assert top1_accuracy([(0, 0), (2, 2)]) == 1.0
    assert top1_accuracy([(0, 1), (2, 0)]) == 0.0
    assert top1_accuracy([(0, 0), (1, 1), (2, 2), (3, 0)]) == 0.75


# =====================================================================================================================


def test_insertion_identity_point():
    """
    Full retention reproduces the unmasked confidence bit-exactly
    """
    net, x = tiny_network(), image()
    saliency = SaliencyMap(np.random.default_rng(3).uniform(size=(8, 8)).astype(np.float32))
    points = insertion_curve(net, x, saliency)
    assert [p.fraction for p in points] == [round(0.1 * i, 1) for i in range(11)]
    assert points[-1].confidence == predict(net, x).confidence
    assert points[-1].hit


def test_insertion_empty_point():
    """
    Nothing retained with a zero baseline is the all-zeros image
    """
    net, x = tiny_network(bias=False), image(1)
    saliency = SaliencyMap(np.random.default_rng(4).uniform(size=(8, 8)).astype(np.float32))
    t = predict(net, x).label
    points = insertion_curve(net, x, saliency, fractions=[0.0, 1.0])
    assert points[0].confidence == float(predict(net, np.zeros_like(x)).probabilities[t])


def test_occlusion_constant_network():
    """
    Every contribution is equal, so the normalized map is all zeros
    """
    saliency = occlusion_baseline(constant_network(), np.full((3, 8, 8), 0.5, dtype=np.float32), patch=4, stride=2)
    assert saliency.shape == (8, 8)
    assert np.all(saliency.values == 0.0)


def test_occlusion_single_position():
    saliency = occlusion_baseline(tiny_network(), image(), patch=8, stride=1)
    assert np.all(saliency.values == 0.0)


def test_occlusion_range():
    saliency = occlusion_baseline(tiny_network(2), image(2), patch=3, stride=2)
    assert saliency.values.min() == 0.0
    assert saliency.values.max() == pytest.approx(1.0)


def test_occlusion_finds_patch():
    """
    A network that only looks at the top-left corner ranks that corner highest
    """
    layers = [
        create_layer({"kind": "flatten"}),
        create_layer({"kind": "linear", "in_features": 192, "out_features": 2}),
    ]
    weight = np.zeros((2, 3, 8, 8), dtype=np.float32)
    weight[0, :, :2, :2] = 5.0
    layers[1].weight.data = weight.reshape(2, 192)
    net = Network(layers, (3, 8, 8), 2)

    saliency = occlusion_baseline(net, np.ones((3, 8, 8), dtype=np.float32), patch=2, stride=2)
    assert np.unravel_index(np.argmax(saliency.values), (8, 8)) == (0, 0)


def centre_network(margin: float = 40.0) -> Network:
    """
    16x16 input, class 0 reads the central 2x2 block on top of a large bias:
    the softmax is saturated at 1.0 in float32 whatever gets occluded
    """
    layers = [
        create_layer({"kind": "flatten"}),
        create_layer({"kind": "linear", "in_features": 768, "out_features": 2}),
    ]
    weight = np.zeros((2, 3, 16, 16), dtype=np.float32)
    weight[0, :, 7:9, 7:9] = 1.0
    layers[1].weight.data = weight.reshape(2, 768)
    layers[1].bias.data = np.array([margin, 0.0], dtype=np.float32)
    return Network(layers, (3, 16, 16), 2)


def test_occlusion_saturated_softmax():
    """
    Positions are still ranked when f_t rounds to 1, and the maximum sits on the
    windows that cover the block rather than at a corner
    """
    net = centre_network()
    x = np.ones((3, 16, 16), dtype=np.float32)
    assert predict(net, x).confidence == 1.0

    values = occlusion_baseline(net, x, patch=8, stride=4).values
    row, col = np.unravel_index(np.argmax(values), values.shape)
    assert 4 <= row <= 11 and 4 <= col <= 11
    assert np.allclose(values[7:9, 7:9], values.max(), atol=1e-6)
    for corner in (values[0, 0], values[0, -1], values[-1, 0], values[-1, -1]):
        assert corner < 0.5


def test_occlusion_border_coverage():
    """
    A network that reads every pixel alike: each window score only depends on how
    many pixels it hides, so with even coverage the map is symmetric and the
    corners do not stand out
    """
    layers = [
        create_layer({"kind": "flatten"}),
        create_layer({"kind": "linear", "in_features": 768, "out_features": 2}),
    ]
    layers[1].weight.data = np.concatenate([np.full((1, 768), 0.01), np.zeros((1, 768))]).astype(np.float32)
    net = Network(layers, (3, 16, 16), 2)

    values = occlusion_baseline(net, np.ones((3, 16, 16), dtype=np.float32), patch=8, stride=4).values
    assert np.allclose(values, values[::-1, ::-1], atol=1e-6)
    assert np.allclose(values, values.T, atol=1e-6)
    assert values[0, 0] < values[8, 8]


def test_occlusion_blur_sigma():
    net, x = tiny_network(3), image(3)
    narrow = occlusion_baseline(net, x, patch=4, stride=2, baseline="blur", blur_sigma=0.5)
    wide = occlusion_baseline(net, x, patch=4, stride=2, baseline="blur", blur_sigma=3.0)
    assert not np.array_equal(narrow.values, wide.values)


# =====================================================================================================================


def test_score_sample():
    net, x = tiny_network(), image()
    saliency = SaliencyMap(np.random.default_rng(5).uniform(size=(8, 8)).astype(np.float32))
    row = score_sample(net, x, saliency, retention=0.4)
    assert row.t == predict(net, x).label
    assert row.confidence_before == predict(net, x).confidence
    assert 0 <= row.predicted_after < 3
    assert len(row.insertion) == 11


def report_rows() -> list[SampleRow]:
    curve = [InsertionPoint(0.0, 0.2, False), InsertionPoint(1.0, 0.8, True)]
    return [
        SampleRow(0, 1, 1, 0.8, 0.6, 1, 5, insertion=curve),
        SampleRow(1, 2, 2, 0.5, 0.7, 2, 4, insertion=curve),
        SampleRow(2, 0, -1, status=SampleStatus.FAILED, error="RuntimeError: collapsed"),
    ]


def test_report_metrics():
    report = EvalReport.from_rows("coalition", 3, 0.4, report_rows())
    assert report.n == 2
    assert report.failed == 1
    assert report.ad == pytest.approx((0.25 + (0.5 - 0.7) / 0.5) / 2)
    assert report.pi == 0.5
    assert report.t1 == 1.0
    assert report.insertion == [(0.0, pytest.approx(0.2), 0.0), (1.0, pytest.approx(0.8), 1.0)]


def test_report_text(tmp_path):
    report = EvalReport.from_rows("occlusion", 7, 0.4, report_rows(), clamp_ad=True)
    path = report.save(str(tmp_path))
    assert os.path.basename(path) == "report_occlusion_seed7_ret0.4.txt"

    with open(path) as f:
        text = f.read()
    assert text.startswith("method: occlusion\nseed: 7\nretention: 0.4\nN: 2\nfailed: 1\nclamp_ad: true\n")
    assert "\n[samples]\nindex,true_label,t," in text
    assert "2,0,-1,0.0,0.0,-1,0,failed,RuntimeError: collapsed" in text
    assert "\n[insertion]\nfraction,confidence,top1\n" in text


def test_report_without_successes():
    report = EvalReport.from_rows("coalition", 0, 0.4, report_rows()[2:])
    assert report.n == 0
    assert np.isnan(report.ad)


def test_summary_table():
    report = EvalReport.from_rows("coalition", 0, 0.4, report_rows())
    table = summary_table({"coalition": report})
    assert table.splitlines()[0].split() == ["AD", "PI", "T1", "N"]
    assert table.splitlines()[1].split()[0] == "coalition"
