"""Synthetic datasets where only spatial arrangement separates classes.

Every class lays its intensity blobs on the grid so that per-sample
totals are equal across classes; a pooled-score classifier then has no
signal, while the bit-pattern path sees distinct arrangements. Stacks
are generated with a single filter and used with a unit-weight head, so
the activation map is the feature map itself and the attention pipeline
is exercised in isolation.

Also holds the brute-force counting oracle: a from-scratch reference
that recomputes every key with naive loops (float32 scalar arithmetic,
matching the pipeline's dtype) and shares no logic with the production
modules it checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorio
from .attention import GcmlConfig
from .cam import ClassifierHead, class_scores
from .store import GcmlStore

Blob = tuple[int, int, float]


@dataclass
class SpatialClassSpec:
    """Grid dims plus one blob layout (cell, intensity) per class."""

    grid_h: int
    grid_w: int
    class_blobs: list[list[Blob]]
    noise_sigma: float = 0.0
    jitter_prob: float = 0.0
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.grid_h < 1 or self.grid_w < 1:
            raise ValueError("grid dims must be >= 1")
        if not self.class_blobs:
            raise ValueError("need at least one class layout")
        for blobs in self.class_blobs:
            for r, c, intensity in blobs:
                if not (0 <= r < self.grid_h and 0 <= c < self.grid_w):
                    raise ValueError(f"blob ({r}, {c}) outside {self.grid_h}x{self.grid_w} grid")
                if intensity <= 0:
                    raise ValueError(f"blob intensity must be > 0, got {intensity}")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        if not 0.0 <= self.jitter_prob <= 1.0:
            raise ValueError("jitter probability must be in [0, 1]")
        if not self.class_names:
            self.class_names = [f"class_{i}" for i in range(len(self.class_blobs))]
        if len(self.class_names) != len(self.class_blobs):
            raise ValueError("class_names length must match class_blobs")

    @property
    def num_classes(self) -> int:
        return len(self.class_blobs)


@dataclass
class SynthDataset:
    """In-memory labeled feature stacks, reproducible from (spec, seed)."""

    classes: list[str]
    samples: list[tuple[np.ndarray, int]]
    seed: int


def two_class_corner_spec(
    grid: int = 4,
    intensity: float = 1.0,
    noise_sigma: float = 0.05,
    jitter_prob: float = 0.0,
) -> SpatialClassSpec:
    """Two classes with equal-intensity blobs on opposite diagonals.

    Per-sample activation totals are identical across classes by
    construction, so pooled scores carry no class signal.
    """
    g = grid - 1
    return SpatialClassSpec(
        grid_h=grid,
        grid_w=grid,
        class_blobs=[
            [(0, 0, intensity), (g, g, intensity)],
            [(0, g, intensity), (g, 0, intensity)],
        ],
        noise_sigma=noise_sigma,
        jitter_prob=jitter_prob,
    )


def shared_peak_spec(noise_sigma: float = 0.05) -> SpatialClassSpec:
    """Corner layouts plus one dominant blob both classes share.

    Near tau = 1 only the shared peak survives thresholding, so both
    classes collapse onto the same key and accuracy falls to chance;
    lower tau keeps the distinguishing corners visible.
    """
    return SpatialClassSpec(
        grid_h=4,
        grid_w=4,
        class_blobs=[
            [(1, 2, 2.0), (0, 0, 1.0), (3, 3, 1.0)],
            [(1, 2, 2.0), (0, 3, 1.0), (3, 0, 1.0)],
        ],
        noise_sigma=noise_sigma,
    )


def _render_sample(spec: SpatialClassSpec, label: int, rng: np.random.Generator) -> np.ndarray:
    grid = np.zeros((1, spec.grid_h, spec.grid_w), dtype=np.float32)
    for r, c, intensity in spec.class_blobs[label]:
        if spec.jitter_prob > 0 and rng.random() < spec.jitter_prob:
            moves = [
                (rr, cc)
                for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1))
                if 0 <= rr < spec.grid_h and 0 <= cc < spec.grid_w
            ]
            r, c = moves[int(rng.integers(len(moves)))]
        value = intensity
        if spec.noise_sigma > 0:
            value += rng.normal(0.0, spec.noise_sigma)
        grid[0, r, c] += np.float32(value)
    return grid


def gen_spatial_classes(spec: SpatialClassSpec, seed: int, n_per_class: int) -> SynthDataset:
    """Generate n_per_class samples per class, grouped by class.

    Each sample draws from a generator derived from (seed, global
    index), so regeneration is byte-identical and per-sample work could
    be farmed out in parallel.
    """
    if n_per_class < 0:
        raise ValueError("n_per_class must be >= 0")
    samples: list[tuple[np.ndarray, int]] = []
    index = 0
    for label in range(spec.num_classes):
        for _ in range(n_per_class):
            rng = np.random.default_rng([seed, index])
            samples.append((_render_sample(spec, label, rng), label))
            index += 1
    return SynthDataset(classes=list(spec.class_names), samples=samples, seed=seed)


def unit_head(num_classes: int, num_filters: int = 1) -> ClassifierHead:
    """All-ones weights, no bias: the activation map equals the feature map."""
    return ClassifierHead(weights=np.ones((num_classes, num_filters), dtype=np.float32))


def fit_additive_head(dataset: SynthDataset) -> ClassifierHead:
    """Best-effort pooled-score classifier: nearest class mean on pooled features.

    Scores mu_c . F - |mu_c|^2 / 2 rank classes by distance of the
    pooled feature vector F to each class's training mean, the
    strongest classifier a purely additive decision can realize here.
    """
    if not dataset.samples:
        raise ValueError("cannot fit a head on an empty dataset")
    k = dataset.samples[0][0].shape[0]
    n_classes = len(dataset.classes)
    sums = np.zeros((n_classes, k), dtype=np.float64)
    counts = np.zeros(n_classes, dtype=np.int64)
    for stack, label in dataset.samples:
        sums[label] += stack.sum(axis=(1, 2))
        counts[label] += 1
    means = np.divide(sums, counts[:, None], out=np.zeros_like(sums), where=counts[:, None] > 0)
    bias = -0.5 * (means**2).sum(axis=1)
    return ClassifierHead(
        weights=means.astype(np.float32), bias=bias.astype(np.float32), pooling="sum"
    )


def additive_baseline(dataset: SynthDataset, head: ClassifierHead) -> float:
    """Accuracy of classifying every sample by its argmax pooled score."""
    if not dataset.samples:
        raise ValueError("empty dataset")
    correct = 0
    for stack, label in dataset.samples:
        if int(np.argmax(class_scores(stack, head))) == label:
            correct += 1
    return correct / len(dataset.samples)


def write_dataset(dataset: SynthDataset, out_dir: str | Path,
                  manifest_name: str = "manifest.json") -> Path:
    """Emit one GCT1 file per sample plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries: list[tuple[str, int]] = []
    for i, (stack, label) in enumerate(dataset.samples):
        name = f"sample_{i:05d}.gct"
        tensorio.save_tensor(stack, out_dir / name)
        entries.append((name, label))
    manifest = tensorio.DatasetManifest(
        classes=list(dataset.classes), samples=entries, base_dir=out_dir
    )
    path = out_dir / manifest_name
    tensorio.save_manifest(manifest, path)
    return path


def oracle_store(dataset: SynthDataset, head: ClassifierHead, cfg: GcmlConfig) -> GcmlStore:
    """Brute-force reference: recount every key with naive loops.

    Independent reimplementation of the map -> normalize -> threshold ->
    flatten -> pack -> count chain, written against the arithmetic
    contract (float32 ops) rather than the production code. Only the
    result container is shared.
    """
    f32 = np.float32
    rows: list[dict[int, int]] = [{} for _ in dataset.classes]
    totals = [0 for _ in dataset.classes]
    for stack, label in dataset.samples:
        k, h, w = stack.shape
        if h != cfg.grid_h or w != cfg.grid_w:
            raise ValueError(f"sample grid {h}x{w} does not match config")
        # Weighted elementwise sum over filters for the labeled class.
        cam = [[f32(0.0)] * w for _ in range(h)]
        for y in range(h):
            for x in range(w):
                acc = f32(0.0)
                for j in range(k):
                    acc = f32(acc + f32(f32(head.weights[label, j]) * f32(stack[j, y, x])))
                cam[y][x] = acc
        lo = cam[0][0]
        hi = cam[0][0]
        for y in range(h):
            for x in range(w):
                if cam[y][x] < lo:
                    lo = cam[y][x]
                if cam[y][x] > hi:
                    hi = cam[y][x]
        key = 0
        position = 0
        span = f32(float(hi) - float(lo))
        for y in range(h):
            for x in range(w):
                if hi == lo:
                    normalized = f32(0.0)
                else:
                    normalized = f32(f32(cam[y][x] - lo) / span)
                if float(normalized) >= cfg.tau:
                    if cfg.bit_order == "little":
                        key += 2 ** position
                    else:
                        key += 2 ** (cfg.L - 1 - position)
                position += 1
        rows[label][key] = rows[label].get(key, 0) + 1
        totals[label] += 1
    return GcmlStore(
        classes=list(dataset.classes),
        cfg=cfg,
        rows=rows,
        row_totals=totals,
    )
