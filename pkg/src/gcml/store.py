"""Per-class keyed counting store with training, merging, and prediction.

Each class owns a sparse map from attention key to an integer count.
Training increments one count per labeled sample; dividing a row by its
total turns it into a discrete likelihood distribution over the 2**L
possible activation patterns. Rows stay sparse because realistic L (up
to 64) makes a dense table impossible, and counts are never destroyed
by normalization, so a store can always absorb more data later.

Prediction computes the activation map for every class, keys each one,
and takes the class whose own row assigns its key the highest
likelihood. Lookups of unseen keys return 0; an all-zero likelihood
vector falls back to the pooled-score classifier (or to class 0).

On-disk format GCS1 (all integers little-endian):

    magic "GCS1"; u16 version=1; u8 L; f32 tau; u8 bit_order
    (0=little, 1=big); u8 normalized flag; u8 pooling (0=sum, 1=mean);
    u32 class count; per class a u16-length-prefixed UTF-8 label; then
    per class: u64 row total, u64 entry count, entries as
    (u64 key, u64 count) sorted ascending by key.
"""

from __future__ import annotations

import math
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterator, Optional

import numpy as np

from . import tensorio
from .attention import BIT_ORDERS, GcmlConfig, attention_key
from .cam import POOLING_MODES, Cam, ClassifierHead, class_scores, compute_cam

STORE_MAGIC = b"GCS1"
STORE_VERSION = 1
FALLBACK_POLICIES = ("cnn", "first")


class StoreFormatError(ValueError):
    """Raised when a byte stream is not a well-formed GCS1 store."""


@dataclass(eq=False)
class GcmlStore:
    """Sparse per-class key->count rows plus the config that keyed them."""

    classes: list[str]
    cfg: GcmlConfig
    pooling: str = "sum"
    normalized: bool = False
    rows: list[dict[int, int]] = field(default_factory=list)
    row_totals: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.classes:
            raise ValueError("store needs at least one class")
        if self.pooling not in POOLING_MODES:
            raise ValueError(f"pooling must be one of {POOLING_MODES}")
        if not self.rows:
            self.rows = [{} for _ in self.classes]
        if not self.row_totals:
            self.row_totals = [sum(r.values()) for r in self.rows]
        if len(self.rows) != len(self.classes) or len(self.row_totals) != len(self.classes):
            raise ValueError("rows/row_totals length must match class count")
        for c, row in enumerate(self.rows):
            if self.row_totals[c] != sum(row.values()):
                raise ValueError(f"row_totals[{c}] does not match summed counts")
            for key in row:
                if not 0 <= key < (1 << self.cfg.L):
                    raise ValueError(f"key {key} out of range for L={self.cfg.L}")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def total_count(self) -> int:
        return sum(self.row_totals)

    def dense_row(self, c: int) -> np.ndarray:
        """Materialize one row as a dense 2**L count array (testing aid)."""
        if self.cfg.L > 20:
            raise ValueError(f"dense rows are capped at L=20, store has L={self.cfg.L}")
        out = np.zeros(1 << self.cfg.L, dtype=np.uint64)
        for key, count in self.rows[c].items():
            out[key] = count
        return out

    def __eq__(self, other: object) -> bool:
        # Grid shape is runtime-only metadata; persisted identity is
        # (labels, counts, tau, L, bit order, pooling, normalized).
        if not isinstance(other, GcmlStore):
            return NotImplemented
        return (
            self.classes == other.classes
            and self.rows == other.rows
            and self.row_totals == other.row_totals
            and self.cfg.tau == other.cfg.tau
            and self.cfg.L == other.cfg.L
            and self.cfg.bit_order == other.cfg.bit_order
            and self.pooling == other.pooling
            and self.normalized == other.normalized
        )


@dataclass
class Prediction:
    """Argmax-likelihood class plus the evidence behind it."""

    class_index: int
    likelihoods: list[float]
    keys: list[int]
    fallback_used: bool = False


def key_for_cam(s: GcmlStore, m: Cam) -> int:
    """Attention key for a map under this store's tau and bit order.

    The key depends only on the flattened cell sequence, so any map
    whose cell count equals L is accepted.
    """
    h, w = m.shape
    cfg = s.cfg
    if (h, w) != (cfg.grid_h, cfg.grid_w):
        if h * w != cfg.L:
            raise ValueError(f"cam {h}x{w} has {h * w} cells, store expects L={cfg.L}")
        cfg = GcmlConfig(tau=cfg.tau, grid_h=h, grid_w=w, bit_order=cfg.bit_order)
    return attention_key(m, cfg)


def _check_head(s: GcmlStore, head: ClassifierHead) -> None:
    if head.num_classes != s.num_classes:
        raise ValueError(
            f"head has {head.num_classes} classes, store has {s.num_classes}"
        )


def train_update(s: GcmlStore, f: np.ndarray, head: ClassifierHead, label: int) -> None:
    """Count one labeled sample: key its own-class activation map."""
    if s.normalized:
        raise ValueError("store is frozen as normalized; train on raw counts")
    if not 0 <= label < s.num_classes:
        raise ValueError(f"label {label} out of range for {s.num_classes} classes")
    _check_head(s, head)
    key = key_for_cam(s, compute_cam(f, head, label))
    s.rows[label][key] = s.rows[label].get(key, 0) + 1
    s.row_totals[label] += 1


def augment_rng(seed: int, index: int) -> np.random.Generator:
    """Per-sample generator; identical (seed, index) replays identically."""
    return np.random.default_rng([seed, index])


def epoch_seed(seed: int, epoch: int) -> int:
    """Stable per-epoch seed so multi-epoch runs replay exactly."""
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def jitter_stack(f: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Shift the spatial grid by one cell in a random direction.

    Wrap-around shift, so per-filter totals (and pooled scores) are
    unchanged; mimics the positional variation of random-crop training.
    """
    dy = int(rng.integers(-1, 2))
    dx = int(rng.integers(-1, 2))
    if dy == 0 and dx == 0:
        return f
    return np.roll(f, (dy, dx), axis=(1, 2))


def train_epoch(
    s: GcmlStore,
    dataset: tensorio.DatasetManifest,
    head: ClassifierHead,
    augment_seed: Optional[int] = None,
) -> None:
    """One counting pass over a dataset, optionally with seeded jitter."""
    for index in range(len(dataset)):
        f, label = dataset.load_sample(index)
        if augment_seed is not None:
            f = jitter_stack(f, augment_rng(augment_seed, index))
        train_update(s, f, head, label)


def lookup(s: GcmlStore, class_index: int, key: int, alpha: float = 0.0) -> float:
    """Row likelihood of a key: count/total, or 0.0 for unseen keys.

    With add-alpha smoothing: (count + alpha) / (total + alpha * 2**L).
    """
    if not 0 <= class_index < s.num_classes:
        raise ValueError(f"class {class_index} out of range")
    if not 0 <= key < (1 << s.cfg.L):
        raise ValueError(f"key {key} out of range for L={s.cfg.L}")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    count = s.rows[class_index].get(key, 0)
    total = s.row_totals[class_index]
    if alpha == 0.0:
        return count / total if total else 0.0
    return (count + alpha) / (total + alpha * float(1 << s.cfg.L))


def argmax_or_fallback(
    likelihoods: list[float], scores: np.ndarray, fallback: str
) -> tuple[int, bool]:
    """Shared decision rule: argmax likelihood, lowest index on ties;
    all zeros defers to the fallback policy."""
    if fallback not in FALLBACK_POLICIES:
        raise ValueError(f"fallback must be one of {FALLBACK_POLICIES}")
    best = max(likelihoods)
    if best > 0.0:
        return likelihoods.index(best), False
    if fallback == "cnn":
        return int(np.argmax(scores)), True
    return 0, True


def predict(
    f: np.ndarray,
    head: ClassifierHead,
    s: GcmlStore,
    alpha: float = 0.0,
    fallback: str = "cnn",
) -> Prediction:
    """Key every class's activation map and take the max-likelihood class.

    Ties go to the lowest class index. If every likelihood is zero the
    configured fallback decides: "cnn" takes the argmax pooled score,
    "first" takes class 0; either way fallback_used is reported.
    """
    if fallback not in FALLBACK_POLICIES:
        raise ValueError(f"fallback must be one of {FALLBACK_POLICIES}")
    _check_head(s, head)
    keys = [key_for_cam(s, compute_cam(f, head, c)) for c in range(s.num_classes)]
    likelihoods = [lookup(s, c, keys[c], alpha=alpha) for c in range(s.num_classes)]
    winner, fell_back = argmax_or_fallback(likelihoods, class_scores(f, head), fallback)
    return Prediction(
        class_index=winner, likelihoods=likelihoods, keys=keys, fallback_used=fell_back
    )


class NormalizedStoreView:
    """Read-only likelihood view; nonempty rows sum to 1, counts untouched."""

    def __init__(self, store: GcmlStore) -> None:
        self._store = store

    @property
    def classes(self) -> list[str]:
        return list(self._store.classes)

    @property
    def empty_classes(self) -> tuple[int, ...]:
        return tuple(
            c for c, total in enumerate(self._store.row_totals) if total == 0
        )

    def lookup(self, class_index: int, key: int) -> float:
        return lookup(self._store, class_index, key)

    def row(self, class_index: int) -> dict[int, float]:
        total = self._store.row_totals[class_index]
        if total == 0:
            return {}
        return {k: c / total for k, c in self._store.rows[class_index].items()}


def normalize_rows(s: GcmlStore) -> NormalizedStoreView:
    """Likelihood view over the raw counts (further training stays possible)."""
    return NormalizedStoreView(s)


def merge(a: GcmlStore, b: GcmlStore) -> GcmlStore:
    """Add two stores' counts; both must share tau, L, bit order, and classes."""
    if (a.cfg.tau, a.cfg.L, a.cfg.bit_order) != (b.cfg.tau, b.cfg.L, b.cfg.bit_order):
        raise ValueError(
            f"config mismatch: ({a.cfg.tau}, L={a.cfg.L}, {a.cfg.bit_order}) vs "
            f"({b.cfg.tau}, L={b.cfg.L}, {b.cfg.bit_order})"
        )
    if a.classes != b.classes:
        raise ValueError("class lists differ")
    if a.pooling != b.pooling:
        raise ValueError(f"pooling mismatch: {a.pooling} vs {b.pooling}")
    rows = []
    for row_a, row_b in zip(a.rows, b.rows):
        row = dict(row_a)
        for key, count in row_b.items():
            row[key] = row.get(key, 0) + count
        rows.append(row)
    totals = [ta + tb for ta, tb in zip(a.row_totals, b.row_totals)]
    return GcmlStore(
        classes=list(a.classes),
        cfg=a.cfg,
        pooling=a.pooling,
        normalized=False,
        rows=rows,
        row_totals=totals,
    )


_U64_MAX = (1 << 64) - 1


@contextmanager
def _as_stream(target, mode: str) -> Iterator[BinaryIO]:
    if isinstance(target, (str, Path)):
        with open(target, mode) as f:
            yield f
    else:
        yield target


def save_store(s: GcmlStore, destination) -> None:
    """Write a store in GCS1 format to a path or binary sink."""
    with _as_stream(destination, "wb") as out:
        out.write(STORE_MAGIC)
        out.write(struct.pack("<H", STORE_VERSION))
        out.write(
            struct.pack(
                "<BfBBB",
                s.cfg.L,
                s.cfg.tau,
                BIT_ORDERS.index(s.cfg.bit_order),
                1 if s.normalized else 0,
                POOLING_MODES.index(s.pooling),
            )
        )
        out.write(struct.pack("<I", s.num_classes))
        for label in s.classes:
            raw = label.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise ValueError(f"class label too long: {label[:32]!r}...")
            out.write(struct.pack("<H", len(raw)))
            out.write(raw)
        for c in range(s.num_classes):
            row = s.rows[c]
            if s.row_totals[c] > _U64_MAX:
                raise ValueError("row total exceeds u64")
            out.write(struct.pack("<QQ", s.row_totals[c], len(row)))
            for key in sorted(row):
                out.write(struct.pack("<QQ", key, row[key]))


def _read_exact(source: BinaryIO, n: int, what: str) -> bytes:
    data = source.read(n)
    if len(data) != n:
        raise StoreFormatError(
            f"truncated store: expected {n} bytes for {what}, got {len(data)}"
        )
    return data


def _grid_for_length(L: int) -> tuple[int, int]:
    # The file records only L; reconstruct a display shape (square when
    # possible). Keys and all compatibility checks depend on L alone.
    root = math.isqrt(L)
    if root * root == L:
        return root, root
    return 1, L


def load_store(source) -> GcmlStore:
    """Read a GCS1 store, revalidating totals, key range, and key order."""
    with _as_stream(source, "rb") as f:
        magic = f.read(4)
        if magic != STORE_MAGIC:
            raise StoreFormatError(f"bad magic {magic!r}, expected {STORE_MAGIC!r}")
        (version,) = struct.unpack("<H", _read_exact(f, 2, "version"))
        if version != STORE_VERSION:
            raise StoreFormatError(f"unsupported store version {version}")
        L, tau, order_code, normalized, pooling_code = struct.unpack(
            "<BfBBB", _read_exact(f, 8, "header")
        )
        if not 1 <= L <= 64:
            raise StoreFormatError(f"L={L} out of range [1, 64]")
        if not 0.0 <= tau <= 1.0:
            raise StoreFormatError(f"tau={tau} out of range [0, 1]")
        if order_code >= len(BIT_ORDERS):
            raise StoreFormatError(f"unknown bit order code {order_code}")
        if pooling_code >= len(POOLING_MODES):
            raise StoreFormatError(f"unknown pooling code {pooling_code}")
        (num_classes,) = struct.unpack("<I", _read_exact(f, 4, "class count"))
        if num_classes < 1:
            raise StoreFormatError("store must have at least one class")
        classes = []
        for i in range(num_classes):
            (n,) = struct.unpack("<H", _read_exact(f, 2, f"label {i} length"))
            try:
                classes.append(_read_exact(f, n, f"label {i}").decode("utf-8"))
            except UnicodeDecodeError as e:
                raise StoreFormatError(f"label {i} is not valid UTF-8") from e
        rows: list[dict[int, int]] = []
        totals: list[int] = []
        for c in range(num_classes):
            total, entry_count = struct.unpack(
                "<QQ", _read_exact(f, 16, f"row {c} header")
            )
            row: dict[int, int] = {}
            prev_key = -1
            for _ in range(entry_count):
                key, count = struct.unpack("<QQ", _read_exact(f, 16, f"row {c} entry"))
                if key <= prev_key:
                    raise StoreFormatError(f"row {c} keys not strictly ascending")
                if key >= (1 << L):
                    raise StoreFormatError(f"row {c} key {key} out of range for L={L}")
                row[key] = count
                prev_key = key
            if total != sum(row.values()):
                raise StoreFormatError(
                    f"row {c} total {total} does not match summed counts"
                )
            rows.append(row)
            totals.append(total)
        if f.read(1):
            raise StoreFormatError("trailing bytes after store payload")
    grid_h, grid_w = _grid_for_length(L)
    cfg = GcmlConfig(
        tau=float(tau), grid_h=grid_h, grid_w=grid_w, bit_order=BIT_ORDERS[order_code]
    )
    return GcmlStore(
        classes=classes,
        cfg=cfg,
        pooling=POOLING_MODES[pooling_code],
        normalized=bool(normalized),
        rows=rows,
        row_totals=totals,
    )
