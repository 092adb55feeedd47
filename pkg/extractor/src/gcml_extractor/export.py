"""Run images through a CNN and export feature stacks plus head weights.

A forward hook on a named layer captures that layer's activations; the
captured maps are adaptive-average-pooled to the requested grid (this
is where non-divisible reductions like 7x7 -> 5x5 live, so the core can
keep exact integer pooling) and written one GCT1 file per image. The
final linear layer provides the per-class weight matrix and bias, which
export with pooling mode "mean" because the networks feed that layer
from global average pooling.

Class labels come from the image folder names in sorted order; for a
fine-tuned checkpoint the folder order must match the class order the
head was trained with.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

from . import gct

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tiff"}


@dataclass
class ExportOptions:
    layer: str
    grid: tuple[int, int]
    image_size: int = 224
    normalize: str = "imagenet"  # or "none"

    def __post_init__(self) -> None:
        if self.normalize not in ("imagenet", "none"):
            raise ValueError(f"normalize must be imagenet or none, got {self.normalize}")
        if self.grid[0] < 1 or self.grid[1] < 1:
            raise ValueError(f"bad target grid {self.grid}")
        if self.image_size < 1:
            raise ValueError("image size must be >= 1")


@dataclass
class ExportBundle:
    out_dir: Path
    dataset_manifest: Path
    head_manifest: Path
    classes: list[str]
    sample_files: list[Path] = field(default_factory=list)


class ToyConvNet(nn.Module):
    """Small fixed-weight network for deterministic end-to-end tests.

    One 3x3 convolution, ReLU, global average pooling, and a linear
    head; all parameters are filled from a seeded generator, so two
    constructions with the same seed are identical.
    """

    def __init__(self, num_classes: int, num_filters: int = 2, seed: int = 0) -> None:
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, num_filters, kernel_size=3, padding=1, bias=False),
            nn.ReLU(),
        )
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.classifier = nn.Linear(num_filters, num_classes)
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p in self.parameters():
                p.copy_(torch.rand(p.shape, generator=generator) - 0.5)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        maps = self.features(x)
        pooled = self.pool(maps).flatten(1)
        return self.classifier(pooled)


def build_model(name: str, num_classes: int, seed: int = 0,
                checkpoint: str | None = None) -> tuple[nn.Module, str]:
    """Construct a supported model; returns (model, default capture layer)."""
    if name == "toy":
        model = ToyConvNet(num_classes, seed=seed)
        default_layer = "features"
    elif name in ("resnet18", "resnet50"):
        import torchvision.models as models

        model = getattr(models, name)(weights=None, num_classes=num_classes)
        default_layer = "layer4"
    else:
        raise ValueError(f"unknown model {name!r} (expected toy, resnet18, resnet50)")
    if checkpoint:
        state = torch.load(checkpoint, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    model.eval()
    return model, default_layer


def find_layer(model: nn.Module, name: str) -> nn.Module:
    for module_name, module in model.named_modules():
        if module_name == name:
            return module
    raise ValueError(f"layer {name!r} not found in model")


def final_linear(model: nn.Module) -> nn.Linear:
    last = None
    for module in model.modules():
        if isinstance(module, nn.Linear):
            last = module
    if last is None:
        raise ValueError("model has no linear head to export")
    return last


def load_image(path: str | Path, options: ExportOptions) -> torch.Tensor:
    """Resized, optionally normalized (1, 3, H, W) float tensor."""
    image = Image.open(path).convert("RGB")
    image = image.resize((options.image_size, options.image_size), Image.BILINEAR)
    array = np.asarray(image, dtype=np.float32) / 255.0
    tensor = torch.from_numpy(array).permute(2, 0, 1)
    if options.normalize == "imagenet":
        mean = torch.tensor(IMAGENET_MEAN).view(3, 1, 1)
        std = torch.tensor(IMAGENET_STD).view(3, 1, 1)
        tensor = (tensor - mean) / std
    return tensor.unsqueeze(0)


def list_class_folders(image_dir: str | Path) -> list[tuple[str, list[Path]]]:
    image_dir = Path(image_dir)
    folders = sorted(p for p in image_dir.iterdir() if p.is_dir())
    if not folders:
        raise ValueError(f"no class folders under {image_dir}")
    out = []
    for folder in folders:
        images = sorted(
            p for p in folder.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS
        )
        out.append((folder.name, images))
    return out


def capture_stack(model: nn.Module, layer: nn.Module, image: torch.Tensor,
                  grid: tuple[int, int]) -> np.ndarray:
    """(K, grid_h, grid_w) activations of `layer` for one input image."""
    captured: list[torch.Tensor] = []

    def hook(_module, _inputs, output):
        captured.append(output.detach())

    handle = layer.register_forward_hook(hook)
    try:
        with torch.no_grad():
            model(image)
    finally:
        handle.remove()
    if not captured:
        raise ValueError("capture layer never fired during the forward pass")
    maps = captured[-1]
    if maps.ndim != 4 or maps.shape[0] != 1:
        raise ValueError(f"expected (1, K, H, W) activations, got {tuple(maps.shape)}")
    pooled = F.adaptive_avg_pool2d(maps, grid)
    return pooled.squeeze(0).cpu().numpy().astype(np.float32)


def reference_cams(model: nn.Module, layer: nn.Module, image: torch.Tensor,
                   grid: tuple[int, int]) -> np.ndarray:
    """(C, grid_h, grid_w) class activation maps computed in torch.

    The invariant the bundle must satisfy: the core, combining the
    exported head row c with the exported stack, reproduces these maps.
    """
    stack = torch.from_numpy(capture_stack(model, layer, image, grid))
    head = final_linear(model)
    weights = head.weight.detach()
    return torch.einsum("ck,khw->chw", weights, stack).cpu().numpy().astype(np.float32)


def extract(model: nn.Module, layer_name: str, image_dir: str | Path,
            options: ExportOptions, out_dir: str | Path) -> ExportBundle:
    """Export one GCT1 stack per image plus head tensors and manifests."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    layer = find_layer(model, layer_name)
    head = final_linear(model)
    folders = list_class_folders(image_dir)
    classes = [name for name, _ in folders]
    if head.out_features != len(classes):
        raise ValueError(
            f"head has {head.out_features} classes but {len(classes)} folders found"
        )

    model.eval()
    samples: list[tuple[str, int]] = []
    sample_files: list[Path] = []
    expected_filters: int | None = None
    for label, (name, images) in enumerate(folders):
        for image_path in images:
            stack = capture_stack(model, layer, load_image(image_path, options),
                                  options.grid)
            if expected_filters is None:
                expected_filters = stack.shape[0]
            elif stack.shape[0] != expected_filters:
                raise ValueError("filter count changed between images")
            file_name = f"{name}_{image_path.stem}.gct"
            gct.save_tensor(stack, out_dir / file_name)
            samples.append((file_name, label))
            sample_files.append(out_dir / file_name)
    if not samples:
        raise ValueError(f"no images found under {image_dir}")
    if head.in_features != expected_filters:
        raise ValueError(
            f"head expects {head.in_features} filters, capture layer emits "
            f"{expected_filters}; pick the layer feeding the pooled head"
        )

    gct.save_tensor(head.weight.detach().cpu().numpy(), out_dir / "head_weights.gct")
    bias_name = None
    if head.bias is not None:
        bias_name = "head_bias.gct"
        gct.save_tensor(head.bias.detach().cpu().numpy(), out_dir / bias_name)
    gct.save_head_manifest("head_weights.gct", bias_name, "mean", out_dir / "head.json")
    gct.save_dataset_manifest(classes, samples, out_dir / "manifest.json")
    return ExportBundle(
        out_dir=out_dir,
        dataset_manifest=out_dir / "manifest.json",
        head_manifest=out_dir / "head.json",
        classes=classes,
        sample_files=sample_files,
    )
