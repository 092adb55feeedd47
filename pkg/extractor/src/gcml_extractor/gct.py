"""Writers for the interchange formats the core pipeline consumes.

The extractor talks to the core strictly over files, so it carries its
own small implementation of the GCT1 tensor container and the JSON
manifests instead of importing the core package.

GCT1: ASCII magic "GCT1"; one dtype byte (0x01 = float32); one ndim
byte; ndim u32 little-endian dims; row-major little-endian float32
payload. No padding or trailing bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GCT1"
DTYPE_F32 = 0x01


def save_tensor(a: np.ndarray, path: str | Path) -> None:
    a = np.ascontiguousarray(a, dtype=np.float32)
    if a.ndim < 1 or any(d < 1 for d in a.shape):
        raise ValueError(f"invalid tensor shape {a.shape}")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<BB", DTYPE_F32, a.ndim))
        f.write(struct.pack(f"<{a.ndim}I", *a.shape))
        f.write(a.astype("<f4", copy=False).tobytes(order="C"))


def load_tensor(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    dtype_code, ndim = struct.unpack("<BB", raw[4:6])
    if dtype_code != DTYPE_F32:
        raise ValueError(f"{path}: unsupported dtype {dtype_code:#04x}")
    shape = struct.unpack(f"<{ndim}I", raw[6 : 6 + 4 * ndim])
    payload = raw[6 + 4 * ndim :]
    count = int(np.prod(shape, dtype=np.int64))
    if len(payload) != 4 * count:
        raise ValueError(f"{path}: payload is {len(payload)} bytes, expected {4 * count}")
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)


def save_dataset_manifest(classes: list[str], samples: list[tuple[str, int]],
                          path: str | Path) -> None:
    doc = {
        "classes": classes,
        "samples": [{"path": p, "label": l} for p, l in samples],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def save_head_manifest(weights_name: str, bias_name: str | None,
                       pooling_mode: str, path: str | Path) -> None:
    doc = {"weights": weights_name, "bias": bias_name, "pooling_mode": pooling_mode}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
