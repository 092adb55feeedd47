"""Binary tensor container (GCT1) and dataset manifests.

Every stage of the pipeline exchanges float32 arrays through one tiny
on-disk format, GCT1, so that files written on any platform read back
bit-for-bit on any other:

    bytes 0..3   magic, ASCII "GCT1"
    byte  4      dtype code (0x01 = float32; the only code in v1)
    byte  5      number of dimensions, u8
    next         ndim x u32 little-endian dimension sizes
    rest         row-major payload of little-endian float32

No padding, no trailing bytes. Datasets are described by a JSON sidecar
(the manifest) that names an ordered class list and one tensor file per
sample; tensor paths are resolved relative to the manifest's directory.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"GCT1"
DTYPE_F32 = 0x01


class TensorFormatError(ValueError):
    """Raised when a byte stream is not a well-formed GCT1 tensor."""


def _check_tensor(a: np.ndarray) -> np.ndarray:
    if a.ndim < 1:
        raise ValueError("tensor must have at least one dimension")
    if any(d < 1 for d in a.shape):
        raise ValueError(f"all dimensions must be >= 1, got shape {a.shape}")
    return np.ascontiguousarray(a, dtype=np.float32)


def write_tensor(t: np.ndarray, destination: BinaryIO) -> None:
    """Write a float32 array to a binary sink in GCT1 format."""
    a = _check_tensor(t)
    if a.ndim > 255:
        raise ValueError("GCT1 supports at most 255 dimensions")
    destination.write(MAGIC)
    destination.write(struct.pack("<BB", DTYPE_F32, a.ndim))
    destination.write(struct.pack(f"<{a.ndim}I", *a.shape))
    destination.write(a.astype("<f4", copy=False).tobytes(order="C"))


def _read_exact(source: BinaryIO, n: int, what: str) -> bytes:
    data = source.read(n)
    if len(data) != n:
        raise TensorFormatError(
            f"truncated stream: expected {n} bytes for {what}, got {len(data)}"
        )
    return data


def read_tensor(source: BinaryIO) -> np.ndarray:
    """Read one GCT1 tensor from a binary stream.

    Leaves the stream positioned just past the payload, so multiple
    tensors may be read from a concatenated stream.
    """
    magic = source.read(4)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    dtype_code, ndim = struct.unpack("<BB", _read_exact(source, 2, "header"))
    if dtype_code != DTYPE_F32:
        raise TensorFormatError(f"unsupported dtype code {dtype_code:#04x}")
    if ndim < 1:
        raise TensorFormatError("tensor must have at least one dimension")
    shape = struct.unpack(f"<{ndim}I", _read_exact(source, 4 * ndim, "dims"))
    if any(d < 1 for d in shape):
        raise TensorFormatError(f"all dimensions must be >= 1, got {shape}")
    count = int(np.prod(shape, dtype=np.int64))
    payload = _read_exact(source, 4 * count, "payload")
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)


def save_tensor(t: np.ndarray, path: str | Path) -> None:
    with open(path, "wb") as f:
        write_tensor(t, f)


def load_tensor(path: str | Path) -> np.ndarray:
    """Read a GCT1 file, rejecting trailing bytes after the payload."""
    with open(path, "rb") as f:
        t = read_tensor(f)
        if f.read(1):
            raise TensorFormatError(f"trailing bytes after payload in {path}")
    return t


@dataclass
class DatasetManifest:
    """Ordered class labels plus (tensor path, label index) samples.

    `base_dir` records where the manifest was loaded from; relative
    sample paths resolve against it.
    """

    classes: list[str]
    samples: list[tuple[str, int]]
    base_dir: Path = field(default_factory=Path)

    def __post_init__(self) -> None:
        if not self.classes:
            raise ValueError("manifest needs at least one class")
        for path, label in self.samples:
            if not 0 <= label < len(self.classes):
                raise ValueError(
                    f"label {label} for {path!r} out of range for "
                    f"{len(self.classes)} classes"
                )

    def __len__(self) -> int:
        return len(self.samples)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def load_sample(self, index: int) -> tuple[np.ndarray, int]:
        path, label = self.samples[index]
        return load_tensor(self.resolve(path)), label


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    doc = {
        "classes": manifest.classes,
        "samples": [{"path": p, "label": l} for p, l in manifest.samples],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    try:
        classes = list(doc["classes"])
        samples = [(str(s["path"]), int(s["label"])) for s in doc["samples"]]
    except (KeyError, TypeError) as e:
        raise ValueError(f"malformed manifest {path}: {e}") from e
    return DatasetManifest(classes=classes, samples=samples, base_dir=path.parent)
