"""Class scores and class activation maps from exported feature stacks.

A feature stack is a (k, h, w) float array of last-conv-layer activations.
A classifier head holds one weight row per class; scoring pools each
filter map to a scalar and takes the weighted sum, while the activation
map for a class keeps the spatial grid and weights each filter map
elementwise. Both are linear in the features, which is what makes
average-pool-then-map equal map-then-average-pool.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensorio

POOLING_MODES = ("sum", "mean")


@dataclass
class ClassifierHead:
    """Per-class filter weights (c x k), optional per-class bias."""

    weights: np.ndarray
    bias: Optional[np.ndarray] = None
    pooling: str = "sum"

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float32)
        if self.weights.ndim != 2:
            raise ValueError(f"weights must be 2-d (c, k), got {self.weights.shape}")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float32)
            if self.bias.shape != (self.weights.shape[0],):
                raise ValueError(
                    f"bias shape {self.bias.shape} does not match "
                    f"{self.weights.shape[0]} classes"
                )
            if not np.all(np.isfinite(self.bias)):
                raise ValueError("bias must be finite")
        if self.pooling not in POOLING_MODES:
            raise ValueError(f"pooling must be one of {POOLING_MODES}")

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def num_filters(self) -> int:
        return self.weights.shape[1]


@dataclass
class Cam:
    """Activation-intensity grid for one class."""

    values: np.ndarray
    class_index: int

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValueError(f"cam must be 2-d, got shape {self.values.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def check_stack(f: np.ndarray) -> np.ndarray:
    """Validate a (k, h, w) feature stack and coerce it to float32."""
    f = np.asarray(f, dtype=np.float32)
    if f.ndim != 3:
        raise ValueError(f"feature stack must be 3-d (k, h, w), got {f.shape}")
    if any(d < 1 for d in f.shape):
        raise ValueError(f"feature stack dims must be >= 1, got {f.shape}")
    if not np.all(np.isfinite(f)):
        raise ValueError("feature stack must be finite")
    return f


def _check_pair(f: np.ndarray, head: ClassifierHead, c: int) -> np.ndarray:
    f = check_stack(f)
    if not 0 <= c < head.num_classes:
        raise ValueError(f"class index {c} out of range for {head.num_classes} classes")
    if head.num_filters != f.shape[0]:
        raise ValueError(
            f"head expects {head.num_filters} filters, stack has {f.shape[0]}"
        )
    return f


def class_score(f: np.ndarray, head: ClassifierHead, c: int) -> float:
    """Pooled-feature score for class c: sum_k w[c,k] * pool(f[k]) + bias.

    Scores are scalars off the tensor pipeline, so they accumulate in
    float64.
    """
    f = _check_pair(f, head, c)
    return float(class_scores(f, head)[c])


def class_scores(f: np.ndarray, head: ClassifierHead) -> np.ndarray:
    """Scores for all classes at once (same arithmetic as class_score)."""
    f = check_stack(f)
    if head.num_filters != f.shape[0]:
        raise ValueError(
            f"head expects {head.num_filters} filters, stack has {f.shape[0]}"
        )
    pooled = f.sum(axis=(1, 2), dtype=np.float64)
    if head.pooling == "mean":
        pooled = pooled / (f.shape[1] * f.shape[2])
    scores = head.weights.astype(np.float64) @ pooled
    if head.bias is not None:
        scores = scores + head.bias.astype(np.float64)
    return scores


def compute_cam(f: np.ndarray, head: ClassifierHead, c: int) -> Cam:
    """Class activation map: elementwise sum_k w[c,k] * f[k]. Bias never enters."""
    f = _check_pair(f, head, c)
    values = np.tensordot(head.weights[c], f, axes=(0, 0))
    return Cam(values=values, class_index=c)


def downsample_avg(values: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Average-pool the trailing two dims down to (target_h, target_w).

    Accepts a 2-d map or a 3-d stack (pooled per filter). Source dims
    must be integer multiples of the target dims; non-divisible
    reductions belong upstream, in the exporter.
    """
    a = np.asarray(values, dtype=np.float32)
    if a.ndim not in (2, 3):
        raise ValueError(f"expected 2-d map or 3-d stack, got shape {a.shape}")
    h, w = a.shape[-2], a.shape[-1]
    if target_h < 1 or target_w < 1 or target_h > h or target_w > w:
        raise ValueError(f"target {target_h}x{target_w} invalid for source {h}x{w}")
    if h % target_h or w % target_w:
        raise ValueError(
            f"source {h}x{w} not divisible into target {target_h}x{target_w}"
        )
    wh, ww = h // target_h, w // target_w
    lead = a.shape[:-2]
    pooled = a.reshape(*lead, target_h, wh, target_w, ww).mean(axis=(-3, -1))
    return pooled.astype(np.float32)


def downsample_cam(m: Cam, target_h: int, target_w: int) -> Cam:
    return Cam(values=downsample_avg(m.values, target_h, target_w),
               class_index=m.class_index)


def minmax_normalize(m: Cam) -> Cam:
    """Rescale to [0, 1]; a constant map normalizes to all zeros."""
    v = m.values
    if not np.all(np.isfinite(v)):
        raise ValueError("cam values must be finite")
    lo = float(v.min())
    hi = float(v.max())
    if hi == lo:
        out = np.zeros_like(v)
    else:
        out = (v - lo) / (hi - lo)
    return Cam(values=out, class_index=m.class_index)


def upsample_bilinear(m: Cam, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear upsampling of an activation map.

    Grid corners map exactly onto output corners, so a same-size call
    is the identity and a 1x1 map broadcasts its single value.
    """
    v = m.values
    h, w = v.shape
    if out_h < h or out_w < w:
        raise ValueError(f"output {out_h}x{out_w} smaller than map {h}x{w}")

    def coords(n_in: int, n_out: int) -> np.ndarray:
        if n_in == 1 or n_out == 1:
            return np.zeros(n_out)
        return np.arange(n_out) * (n_in - 1) / (n_out - 1)

    ys = coords(h, out_h)
    xs = coords(w, out_w)
    y0 = np.minimum(np.floor(ys).astype(int), h - 1)
    x0 = np.minimum(np.floor(xs).astype(int), w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]

    top = v[np.ix_(y0, x0)] * (1 - fx) + v[np.ix_(y0, x1)] * fx
    bot = v[np.ix_(y1, x0)] * (1 - fx) + v[np.ix_(y1, x1)] * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)


def save_head(head: ClassifierHead, manifest_path: str | Path,
              weights_name: str = "head_weights.gct",
              bias_name: str = "head_bias.gct") -> None:
    """Write head tensors next to a JSON head manifest."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    tensorio.save_tensor(head.weights, base / weights_name)
    doc = {"weights": weights_name, "bias": None, "pooling_mode": head.pooling}
    if head.bias is not None:
        tensorio.save_tensor(head.bias, base / bias_name)
        doc["bias"] = bias_name
    manifest_path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_head(manifest_path: str | Path) -> ClassifierHead:
    manifest_path = Path(manifest_path)
    doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    try:
        weights_rel = doc["weights"]
        bias_rel = doc.get("bias")
        pooling = doc.get("pooling_mode", "sum")
    except TypeError as e:
        raise ValueError(f"malformed head manifest {manifest_path}: {e}") from e
    base = manifest_path.parent
    weights = tensorio.load_tensor(base / weights_rel)
    bias = tensorio.load_tensor(base / bias_rel) if bias_rel else None
    return ClassifierHead(weights=weights, bias=bias, pooling=pooling)
