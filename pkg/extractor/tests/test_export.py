"""Extractor behavior plus integration with the core pipeline's CLI."""

import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from gcml_extractor import gct
from gcml_extractor.cli import main as extractor_main
from gcml_extractor.export import (
    ExportOptions,
    ToyConvNet,
    build_model,
    capture_stack,
    extract,
    find_layer,
    load_image,
    reference_cams,
)


def write_image(path: Path, seed: int, size: int = 8) -> None:
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, (size, size, 3), dtype=np.uint8)
    Image.fromarray(pixels, mode="RGB").save(path)


@pytest.fixture()
def image_folder(tmp_path):
    root = tmp_path / "images"
    for label, name in enumerate(["cats", "dogs"]):
        folder = root / name
        folder.mkdir(parents=True)
        for i in range(3):
            write_image(folder / f"img{i}.png", seed=100 * label + i)
    return root


def toy_options(grid=(4, 4), image_size=8):
    return ExportOptions(layer="features", grid=grid, image_size=image_size,
                         normalize="none")


def naive_conv3x3_relu(image: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Plain-loop 3x3 convolution with unit stride and 1-pixel zero padding."""
    num_filters = kernels.shape[0]
    _, h, w = image.shape
    padded = np.pad(image, ((0, 0), (1, 1), (1, 1)))
    out = np.zeros((num_filters, h, w))
    for k in range(num_filters):
        for y in range(h):
            for x in range(w):
                acc = 0.0
                for c in range(image.shape[0]):
                    for dy in range(3):
                        for dx in range(3):
                            acc += float(padded[c, y + dy, x + dx]) * float(
                                kernels[k, c, dy, dx]
                            )
                out[k, y, x] = acc
    return np.maximum(out, 0.0)


def block_mean(a: np.ndarray, target: int) -> np.ndarray:
    k, h, w = a.shape
    f = h // target
    return a.reshape(k, target, f, target, f).mean(axis=(2, 4))


class TestToyForward:
    def test_exported_stack_matches_hand_computation(self, image_folder):
        model = ToyConvNet(num_classes=2, seed=3)
        options = toy_options()
        image_path = image_folder / "cats" / "img0.png"
        image = load_image(image_path, options)

        stack = capture_stack(model, find_layer(model, "features"), image,
                              options.grid)

        kernels = model.features[0].weight.detach().numpy()
        expected = block_mean(naive_conv3x3_relu(image.squeeze(0).numpy(), kernels), 4)
        assert stack.shape == (2, 4, 4)
        assert np.max(np.abs(stack - expected)) <= 1e-4

    def test_fixed_seed_reproduces_parameters(self):
        a = ToyConvNet(num_classes=2, seed=9)
        b = ToyConvNet(num_classes=2, seed=9)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)


class TestExtract:
    def test_bundle_structure(self, image_folder, tmp_path):
        model, layer = build_model("toy", num_classes=2, seed=1)
        bundle = extract(model, layer, image_folder, toy_options(), tmp_path / "bundle")

        manifest = json.loads(bundle.dataset_manifest.read_text())
        assert manifest["classes"] == ["cats", "dogs"]
        assert len(manifest["samples"]) == 6
        labels = [s["label"] for s in manifest["samples"]]
        assert labels == [0, 0, 0, 1, 1, 1]

        head = json.loads(bundle.head_manifest.read_text())
        assert head["pooling_mode"] == "mean"
        weights = gct.load_tensor(bundle.out_dir / head["weights"])
        assert weights.shape == (2, 2)
        bias = gct.load_tensor(bundle.out_dir / head["bias"])
        assert bias.shape == (2,)
        for sample in manifest["samples"]:
            stack = gct.load_tensor(bundle.out_dir / sample["path"])
            assert stack.shape == (2, 4, 4)
            assert np.isfinite(stack).all()

    def test_export_is_deterministic(self, image_folder, tmp_path):
        for name in ("a", "b"):
            model, layer = build_model("toy", num_classes=2, seed=1)
            extract(model, layer, image_folder, toy_options(), tmp_path / name)
        for file_a in sorted((tmp_path / "a").iterdir()):
            file_b = tmp_path / "b" / file_a.name
            assert file_a.read_bytes() == file_b.read_bytes()

    def test_adaptive_pool_handles_non_divisible_grids(self, image_folder, tmp_path):
        # 7x7 activations reduced to 5x5, the classic non-divisible case.
        model, layer = build_model("toy", num_classes=2, seed=1)
        options = toy_options(grid=(5, 5), image_size=7)
        bundle = extract(model, layer, image_folder, options, tmp_path / "bundle")
        stack = gct.load_tensor(bundle.sample_files[0])
        assert stack.shape == (2, 5, 5)

    def test_unknown_layer_rejected(self, image_folder, tmp_path):
        model, _ = build_model("toy", num_classes=2)
        with pytest.raises(ValueError, match="not found"):
            extract(model, "missing_layer", image_folder, toy_options(), tmp_path / "x")

    def test_empty_folder_rejected(self, tmp_path):
        (tmp_path / "images").mkdir()
        model, layer = build_model("toy", num_classes=2)
        with pytest.raises(ValueError, match="class folders"):
            extract(model, layer, tmp_path / "images", toy_options(), tmp_path / "x")

    def test_class_count_mismatch_rejected(self, image_folder, tmp_path):
        model, layer = build_model("toy", num_classes=3)
        with pytest.raises(ValueError, match="folders"):
            extract(model, layer, image_folder, toy_options(), tmp_path / "x")

    def test_resnet_random_init_exports(self, image_folder, tmp_path):
        model, layer = build_model("resnet18", num_classes=2)
        options = ExportOptions(layer=layer, grid=(4, 4), image_size=64,
                                normalize="imagenet")
        bundle = extract(model, layer, image_folder, options, tmp_path / "bundle")
        stack = gct.load_tensor(bundle.sample_files[0])
        assert stack.shape == (512, 4, 4)
        weights = gct.load_tensor(bundle.out_dir / "head_weights.gct")
        assert weights.shape == (2, 512)


class TestCli:
    def test_cli_exports_bundle(self, image_folder, tmp_path, capsys):
        code = extractor_main(
            ["--images", str(image_folder), "--out", str(tmp_path / "bundle"),
             "--model", "toy", "--grid", "4x4", "--image-size", "8",
             "--normalize", "none", "--seed", "1"]
        )
        assert code == 0
        assert (tmp_path / "bundle" / "manifest.json").exists()
        assert "exported 6 stacks" in capsys.readouterr().out

    def test_cli_reports_errors(self, tmp_path, capsys):
        code = extractor_main(
            ["--images", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]
        )
        assert code == 1
        assert "error:" in capsys.readouterr().err


def run_core(*args: str) -> subprocess.CompletedProcess:
    return subprocess.run(
        [sys.executable, "-m", "gcml.cli", *args], capture_output=True, text=True
    )


class TestCoreIntegration:
    @pytest.fixture()
    def bundle(self, image_folder, tmp_path):
        model, layer = build_model("toy", num_classes=2, seed=5)
        return model, extract(model, layer, image_folder, toy_options(),
                              tmp_path / "bundle")

    def test_train_and_predict_accept_the_bundle(self, bundle, tmp_path):
        _, b = bundle
        store = tmp_path / "store.gcs"
        train = run_core(
            "train", "--dataset", str(b.dataset_manifest), "--head",
            str(b.head_manifest), "--out", str(store), "--tau", "0.5",
        )
        assert train.returncode == 0, train.stderr
        assert train.stderr == ""

        predictions = tmp_path / "pred.csv"
        predict = run_core(
            "predict", "--dataset", str(b.dataset_manifest), "--head",
            str(b.head_manifest), "--store", str(store), "--out", str(predictions),
        )
        assert predict.returncode == 0, predict.stderr
        assert predict.stderr == ""
        rows = list(csv.DictReader(predictions.open()))
        assert len(rows) == 6

    def test_core_cams_match_extractor_reference(self, bundle, image_folder, tmp_path):
        model, b = bundle
        options = toy_options()
        heat_dir = tmp_path / "heat"
        for class_index in (0, 1):
            result = run_core(
                "heatmap", "--dataset", str(b.dataset_manifest), "--head",
                str(b.head_manifest), "--class-index", str(class_index),
                "--size", "4x4", "--out-dir", str(heat_dir / str(class_index)),
            )
            assert result.returncode == 0, result.stderr

        layer = find_layer(model, "features")
        manifest = json.loads(b.dataset_manifest.read_text())
        for sample in manifest["samples"]:
            stem = Path(sample["path"]).stem
            class_name, image_stem = stem.split("_", 1)
            image_path = image_folder / class_name / f"{image_stem}.png"
            reference = reference_cams(
                model, layer, load_image(image_path, options), options.grid
            )
            for class_index in (0, 1):
                heat = gct.load_tensor(
                    heat_dir / str(class_index) / f"{stem}_heatmap.gct"
                )
                assert np.max(np.abs(heat - reference[class_index])) <= 1e-4
