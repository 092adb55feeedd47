"""Encode an activation map into an integer datastore key.

The pipeline is: min-max normalize, threshold at tau (inclusive >=),
flatten row-major to a bit vector of length L, pack the bits into an
unsigned integer. L is capped at 64 so every key fits one machine word;
the key space is 2**L. Bit order (little or big) is free but must match
between training and lookup, so it is stamped into store metadata.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cam import Cam, minmax_normalize

BIT_ORDERS = ("little", "big")
MAX_BITS = 64


@dataclass(frozen=True)
class GcmlConfig:
    """Threshold, attention grid shape, and bit packing order."""

    tau: float
    grid_h: int
    grid_w: int
    bit_order: str = "little"

    def __post_init__(self) -> None:
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must be in [0, 1], got {self.tau}")
        # tau persists as float32 in store files; quantize up front so
        # thresholds behave identically before and after a round trip.
        object.__setattr__(self, "tau", float(np.float32(self.tau)))
        if self.grid_h < 1 or self.grid_w < 1:
            raise ValueError(f"grid dims must be >= 1, got {self.grid_h}x{self.grid_w}")
        if self.grid_h * self.grid_w > MAX_BITS:
            raise ValueError(
                f"grid {self.grid_h}x{self.grid_w} needs {self.grid_h * self.grid_w} "
                f"bits; keys are capped at {MAX_BITS}"
            )
        if self.bit_order not in BIT_ORDERS:
            raise ValueError(f"bit_order must be one of {BIT_ORDERS}")

    @property
    def L(self) -> int:
        return self.grid_h * self.grid_w


def threshold(m: Cam, tau: float) -> np.ndarray:
    """Boolean grid: cell set iff normalized value >= tau (inclusive).

    Expects values already in [0, 1]; anything outside means the caller
    skipped normalization.
    """
    v = m.values
    if v.size and (v.min() < 0.0 or v.max() > 1.0):
        raise ValueError("cam values outside [0, 1]; normalize before thresholding")
    return v >= tau


def flatten_bits(grid: np.ndarray) -> np.ndarray:
    """Row-major flattening of a 2-d boolean grid to a 1-d bit vector."""
    grid = np.asarray(grid, dtype=bool)
    if grid.ndim != 2:
        raise ValueError(f"bit grid must be 2-d, got shape {grid.shape}")
    return grid.reshape(-1)


def unflatten_bits(bits: np.ndarray, h: int, w: int) -> np.ndarray:
    bits = np.asarray(bits, dtype=bool)
    if bits.size != h * w:
        raise ValueError(f"{bits.size} bits do not fill a {h}x{w} grid")
    return bits.reshape(h, w)


def key_from_bits(bits: np.ndarray, bit_order: str = "little") -> int:
    """Pack a bit vector into an integer key.

    little: bit i contributes 2**i; big: bit i contributes 2**(L-1-i).
    """
    bits = np.asarray(bits, dtype=bool).reshape(-1)
    n = bits.size
    if n > MAX_BITS:
        raise ValueError(f"{n} bits exceed the {MAX_BITS}-bit key cap")
    if bit_order not in BIT_ORDERS:
        raise ValueError(f"bit_order must be one of {BIT_ORDERS}")
    indices = np.flatnonzero(bits)
    if bit_order == "big":
        indices = n - 1 - indices
    return int(sum(1 << int(i) for i in indices))


def attention_key(m: Cam, cfg: GcmlConfig) -> int:
    """Full map-to-key pipeline: normalize, threshold, flatten, pack."""
    h, w = m.shape
    if (h, w) != (cfg.grid_h, cfg.grid_w):
        raise ValueError(
            f"cam is {h}x{w} but config grid is {cfg.grid_h}x{cfg.grid_w}"
        )
    bits = flatten_bits(threshold(minmax_normalize(m), cfg.tau))
    return key_from_bits(bits, cfg.bit_order)
