#!/usr/bin/env python3
# Tests for the command-line front-end
from pycoalition.cli import main, parse_overrides
from pycoalition.dataset import ShapesDataset
import os
import pytest


def test_parse_overrides():
    assert parse_overrides(["--perturbation.v", "0", "--dataset.size=16"]) == [
        ("perturbation.v", "0"),
        ("dataset.size", "16"),
    ]
    assert parse_overrides([]) == []


def test_parse_overrides_errors():
    with pytest.raises(ValueError, match="unrecognized"):
        parse_overrides(["stray"])
    with pytest.raises(ValueError, match="missing value"):
        parse_overrides(["--perturbation.v"])


def test_gen_data(tmp_path):
    code = main(["gen-data", "--output.directory", str(tmp_path), "--dataset.n", "12", "--dataset.size", "16"])
    assert code == 0
    dataset = ShapesDataset.load(os.path.join(str(tmp_path), "shapes.npz"))
    assert len(dataset) == 12
    assert dataset.size == (16, 16)


def test_configuration_errors(tmp_path):
    assert main(["gen-data", "--output.directory", str(tmp_path), "--dataset.colour", "red"]) == 2
    assert main(["gen-data", "--config", str(tmp_path / "missing.yaml")]) == 2


def test_config_file(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(f"output:\n  directory: {tmp_path}\ndataset:\n  n: 8\n  size: 16\n  path: tiny.npz\n")
    assert main(["gen-data", "--config", str(path)]) == 0
    assert os.path.exists(os.path.join(str(tmp_path), "tiny.npz"))


def test_occlusion_command(tmp_path):
    overrides = [
        "--output.directory",
        str(tmp_path),
        "--dataset.n",
        "12",
        "--dataset.size",
        "16",
        "--model.channels",
        "4,4",
        "--training.epochs",
        "1",
        "--evaluation.patch",
        "4",
    ]
    assert main(["occlusion", "--index", "1"] + overrides) == 0
    directory = os.path.join(str(tmp_path), "occlusion", "sample_001")
    assert os.path.exists(os.path.join(directory, "saliency.png"))
    assert os.path.exists(os.path.join(directory, "manifest.yaml"))

    assert main(["occlusion", "--index", "99"] + overrides) == 1
