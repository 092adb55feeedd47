"""Bridge from pretrained CNNs to the attention pipeline's file formats."""

from .export import (
    ExportBundle,
    ExportOptions,
    ToyConvNet,
    build_model,
    capture_stack,
    extract,
    reference_cams,
)

__version__ = "0.1.0"

__all__ = [
    "ExportBundle",
    "ExportOptions",
    "ToyConvNet",
    "build_model",
    "capture_stack",
    "extract",
    "reference_cams",
]
