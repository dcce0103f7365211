#!/usr/bin/env python3
# Tests for label assignment, the extraction losses and coalition masks
from pycoalition.autodiff import Tensor
from pycoalition.autodiff import functional as F
from pycoalition.coalition import (
    LabelMap,
    assign_labels,
    coalition_iou,
    continuity_loss,
    extract_coalitions,
    feature_similarity_loss,
    save_coalitions,
    to_coalition_masks,
)
from pycoalition.dataset import rectangles_image
from pycoalition.network import build_classifier, default_architecture, reconfigure_for_extraction
import os
import numpy as np
import pytest


def small_extraction_net(clusters: int = 8, seed: int = 0):
    net = build_classifier(default_architecture(input_shape=(3, 16, 16), channels=(8, 8)), seed=seed)
    return reconfigure_for_extraction(net, clusters, seed=seed)


def test_assign_one_hot():
    r = np.zeros((1, 5))
    r[0, 3] = 1.0
    assert assign_labels(r).labels.tolist() == [[3]]


def test_assign_tie():
    assert assign_labels(np.array([[0.5, 0.5]])).labels.tolist() == [[0]]


def test_assign_linear_scan():
    r = np.random.default_rng(0).normal(size=(16, 5))
    labels = assign_labels(Tensor(r), (4, 4)).labels.reshape(-1)
    for n in range(16):
        best = 0
        for i in range(1, 5):
            if r[n, i] > r[n, best]:
                best = i
        assert labels[n] == best


@pytest.mark.parametrize("alpha", [1e-3, 0.5, 2.0, 1e3])
def test_assign_scale_invariant(alpha):
    r = np.random.default_rng(1).normal(size=(64, 6))
    expected = assign_labels(r, (8, 8)).labels
    assert np.array_equal(assign_labels(alpha * r, (8, 8)).labels, expected)
    assert np.array_equal(assign_labels(Tensor(alpha * r), (8, 8)).labels, expected)


def test_assign_shape_errors():
    with pytest.raises(ValueError):
        assign_labels(np.zeros((4, 1)))
    with pytest.raises(ValueError):
        assign_labels(np.zeros((4, 3)), (3, 3))


def test_similarity_confident_assignment():
    r = Tensor(np.array([[50.0, 0.0]]))
    assert feature_similarity_loss(r, assign_labels(r)).item() < 1e-12


def test_similarity_uniform_softmax():
    """
    All-zero rows contribute ln(l) each
    """
    r = Tensor(np.zeros((3, 6)))
    assert feature_similarity_loss(r, assign_labels(r)).item() == pytest.approx(3 * np.log(6), abs=1e-6)


def test_similarity_direct_formula():
    r = np.random.default_rng(1).normal(size=(8, 4))
    labels = assign_labels(r)
    expected = 0.0
    for n, c in enumerate(labels.labels.reshape(-1)):
        expected -= r[n, c] - np.log(np.exp(r[n]).sum())
    assert feature_similarity_loss(Tensor(r), labels).item() == pytest.approx(expected, abs=1e-6)


def test_continuity_examples():
    assert continuity_loss(Tensor(np.full((3, 3, 2), 0.7))).item() == 0.0
    r = np.array([[0.0, 1.0], [0.0, 1.0]]).reshape(2, 2, 1)
    assert continuity_loss(Tensor(r)).item() == pytest.approx(2.0)


def test_continuity_double_loop():
    r = np.random.default_rng(2).normal(size=(4, 4, 3))
    expected = 0.0
    for h in range(4):
        for w in range(4):
            for i in range(3):
                if w + 1 < 4:
                    expected += abs(r[h, w + 1, i] - r[h, w, i])
                if h + 1 < 4:
                    expected += abs(r[h + 1, w, i] - r[h, w, i])
    assert continuity_loss(Tensor(r)).item() == pytest.approx(expected, abs=1e-6)


def test_masks_partition():
    coalitions = to_coalition_masks(LabelMap(np.array([[0, 0], [1, 1]]), 2))
    assert coalitions.count == 2
    assert coalitions.masks[0].tolist() == [[True, True], [False, False]]
    assert coalitions.masks[1].tolist() == [[False, False], [True, True]]


def test_masks_constant_labels():
    coalitions = to_coalition_masks(LabelMap(np.full((3, 3), 4), 6))
    assert coalitions.count == 1
    assert coalitions.masks[0].all()


def test_masks_random_labels():
    labels = np.random.default_rng(3).integers(0, 5, size=(8, 8))
    labels[0, :5] = np.arange(5)
    coalitions = to_coalition_masks(LabelMap(labels, 5))
    assert coalitions.count == 5
    assert coalitions.masks.sum() == 64
    assert np.all(coalitions.masks.sum(axis=0) == 1)
    coalitions.validate()


def test_coalition_iou_perfect():
    _, regions = rectangles_image(16, seed=0)
    labels = np.argmax(np.stack(regions), axis=0)
    assert coalition_iou(to_coalition_masks(LabelMap(labels, 4)), regions) == pytest.approx(1.0)


# =====================================================================================================================


def test_extract_rectangles_partition():
    """
    Partition invariants on a four-rectangle image (small network, short budget)
    """
    image, _ = rectangles_image(16, seed=0)
    coalitions = extract_coalitions(image, small_extraction_net(8), lam=1.0, min_clusters=4, max_iters=30)
    assert 2 <= coalitions.count <= 8
    assert coalitions.iterations <= 30
    assert coalitions.masks.shape == (coalitions.count, 16, 16)
    coalitions.validate()
    assert coalitions.history[0][0] == 0
    assert len(coalitions.losses) == coalitions.iterations + 1


def test_extract_leaves_network_untouched():
    image, _ = rectangles_image(16, seed=1)
    enet = small_extraction_net(8)
    before = [p.data.copy() for p in enet.parameters()]
    extract_coalitions(image, enet, max_iters=3, min_clusters=2)
    for p, original in zip(enet.parameters(), before):
        assert np.array_equal(p.data, original)


def test_extract_deterministic():
    image, _ = rectangles_image(16, seed=2)
    enet = small_extraction_net(8)
    a = extract_coalitions(image, enet, max_iters=10, min_clusters=2, seed=5)
    b = extract_coalitions(image, enet, max_iters=10, min_clusters=2, seed=5)
    assert np.array_equal(a.label_map.labels, b.label_map.labels)
    assert a.losses == b.losses


def test_extract_without_continuity():
    """
    lam = 0: the first recorded loss is exactly the similarity term
    """
    image, _ = rectangles_image(16, seed=3)
    enet = small_extraction_net(8)
    coalitions = extract_coalitions(image, enet, lam=0.0, min_clusters=2, max_iters=0)

    r = F.reshape(F.transpose(F.reshape(enet(Tensor(image[None])), (8, 16, 16)), (1, 2, 0)), (256, 8))
    expected = feature_similarity_loss(r, assign_labels(r, (16, 16))).item()
    assert coalitions.losses[0] == pytest.approx(expected, rel=1e-6)


def test_extract_overshoot_backs_off():
    """
    A huge step would merge everything at once; halving keeps at least k labels
    """
    image, _ = rectangles_image(16, seed=4)
    coalitions = extract_coalitions(
        image, small_extraction_net(8), min_clusters=3, max_iters=15, lr=200.0, max_halvings=40, seed=0
    )
    start = coalitions.history[0][1]
    assert coalitions.count >= min(3, start)
    coalitions.validate()


def test_extract_uniform_image_terminates():
    """
    No structure to find: either a partition within budget or a reported collapse
    """
    image = np.full((3, 16, 16), 0.5, dtype=np.float32)
    try:
        coalitions = extract_coalitions(image, small_extraction_net(8), max_iters=20, min_clusters=2)
    except RuntimeError as e:
        assert "collapsed" in str(e)
    else:
        assert coalitions.iterations <= 20
        coalitions.validate()


def test_extract_validation():
    enet = small_extraction_net(4)
    image, _ = rectangles_image(16, seed=0)
    with pytest.raises(AssertionError):
        extract_coalitions(image, enet, min_clusters=5)
    with pytest.raises(ValueError):
        extract_coalitions(np.zeros((3, 8, 8)), enet)


def test_save_coalitions(tmp_path):
    labels = np.array([[0, 0, 1], [2, 2, 1], [2, 2, 1]])
    coalitions = to_coalition_masks(LabelMap(labels, 3))
    directory = save_coalitions(coalitions, str(tmp_path / "out"), {"k": 4, "lambda": 1.0, "seed": 0})
    for name in ("coalition_00.png", "coalition_01.png", "coalition_02.png", "labels.png", "manifest.txt"):
        assert os.path.exists(os.path.join(directory, name))
    with open(os.path.join(directory, "manifest.txt")) as f:
        text = f.read()
    assert "coalitions: 3" in text
    assert "lambda: 1.0" in text
